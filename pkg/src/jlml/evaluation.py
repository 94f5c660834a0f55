"""Feature extraction, ranking and CMC / mAP scoring."""
from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import JlmlModel, forward
from .tensor import DimensionError

L1, L2 = "l1", "l2"
SQ, MQ = "sq", "mq"
SS, MS = "ss", "ms"


@dataclass(frozen=True)
class FeatureRecord:
    id: int
    camera: int
    feature: np.ndarray
    # length of the global segment; the rest is the local segment
    split_at: int

    @property
    def global_segment(self) -> np.ndarray:
        return self.feature[: self.split_at]

    @property
    def local_segment(self) -> np.ndarray:
        return self.feature[self.split_at:]


def normalise_segments(feature: np.ndarray, split_at: int) -> np.ndarray:
    """L2-normalise ``[:split_at]`` and ``[split_at:]`` separately (rows of a 2-D array)."""
    f = np.array(feature, dtype=np.float64, copy=True)
    for seg in (f[..., :split_at], f[..., split_at:]):
        if seg.shape[-1] == 0:
            continue
        norm = np.linalg.norm(seg, axis=-1, keepdims=True)
        seg /= np.where(norm > 0, norm, 1.0)
    return f


@dataclass
class Extraction:
    records: list[FeatureRecord]
    seconds: float

    @property
    def ms_per_image(self) -> float:
        return 1e3 * self.seconds / max(1, len(self.records))

    @property
    def images_per_second(self) -> float:
        return len(self.records) / self.seconds if self.seconds > 0 else float("inf")

    def matrix(self) -> np.ndarray:
        return np.stack([r.feature for r in self.records]) if self.records else np.zeros((0, 0))


def extract(model: JlmlModel, images: np.ndarray, ids, cameras, batch_size: int = 64) -> Extraction:
    """Eval-mode forward; each branch feature is unit-normalised before concatenation."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"expected N x C x H x W images, got shape {images.shape}")
    if len(ids) != len(images) or len(cameras) != len(images):
        raise DimensionError("ids and cameras must have one entry per image")
    split_at = model.config.feat_dim_global
    records = []
    start = time.perf_counter()
    for s in range(0, len(images), batch_size):
        out = forward(model, images[s:s + batch_size], training=False)
        feats = np.concatenate([out.global_feature.data, out.local_feature.data], axis=1)
        feats = normalise_segments(feats, split_at)
        for k, f in enumerate(feats):
            records.append(FeatureRecord(int(ids[s + k]), int(cameras[s + k]), f, split_at))
    return Extraction(records, time.perf_counter() - start)


def select_branch(records: list[FeatureRecord], branch: str) -> list[FeatureRecord]:
    """Keep only the global or local segment ('joint' returns the records unchanged)."""
    if branch == "joint":
        return records
    if branch == "global":
        return [FeatureRecord(r.id, r.camera, r.global_segment, r.split_at) for r in records]
    if branch == "local":
        return [FeatureRecord(r.id, r.camera, r.local_segment, 0) for r in records]
    raise ValueError(f"unknown branch {branch!r}")


def distance(a, b, metric: str = L2) -> float:
    va = a.feature if isinstance(a, FeatureRecord) else np.asarray(a, dtype=np.float64)
    vb = b.feature if isinstance(b, FeatureRecord) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionError(f"feature dims differ: {va.shape} vs {vb.shape}")
    d = va - vb
    if metric == L2:
        return float(np.sqrt(np.dot(d, d)))
    if metric == L1:
        return float(np.abs(d).sum())
    raise ValueError(f"unknown metric {metric!r}")


def distances(probe: np.ndarray, gallery: np.ndarray, metric: str = L2) -> np.ndarray:
    """Distances from one probe vector to every gallery row."""
    if probe.shape[-1] != gallery.shape[-1]:
        raise DimensionError(f"feature dims differ: {probe.shape[-1]} vs {gallery.shape[-1]}")
    d = gallery - probe
    if metric == L2:
        return np.sqrt(np.einsum("ij,ij->i", d, d))
    if metric == L1:
        return np.abs(d).sum(axis=1)
    raise ValueError(f"unknown metric {metric!r}")


class EmptyGalleryError(ValueError):
    pass


def rank_gallery(probe: FeatureRecord, gallery: list[FeatureRecord], metric: str = L2,
                 cross_camera_filter: bool = True, dists: np.ndarray | None = None) -> np.ndarray:
    """Gallery indices by ascending distance; ties keep gallery order.

    With the filter on, entries sharing both identity and camera with the
    probe are dropped.
    """
    if dists is None:
        dists = distances(probe.feature, np.stack([g.feature for g in gallery]), metric) if gallery else np.zeros(0)
    keep = np.arange(len(gallery))
    if cross_camera_filter:
        keep = np.array([i for i, g in enumerate(gallery) if not (g.id == probe.id and g.camera == probe.camera)],
                        dtype=np.int64)
    if keep.size == 0:
        raise EmptyGalleryError("gallery is empty after cross-camera filtering")
    order = np.argsort(dists[keep], kind="stable")
    return keep[order]


def _match_flags(ranked: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.asarray(truth, dtype=bool)[ranked]


def cmc(ranked_lists, truths, max_rank: int | None = None) -> tuple[np.ndarray, int]:
    """Cumulative match curve; ``truths[p]`` flags true matches over the full gallery.

    Probes without any true match in their ranked list are skipped; the count
    of those is returned alongside the curve (index 0 holds rank 1).
    """
    first_hits, excluded = [], 0
    length = max_rank or max((len(r) for r in ranked_lists), default=0)
    for ranked, truth in zip(ranked_lists, truths):
        hits = np.flatnonzero(_match_flags(ranked, truth))
        if hits.size == 0:
            excluded += 1
            continue
        first_hits.append(hits[0])
    curve = np.zeros(length)
    if first_hits:
        counts = np.bincount(np.minimum(first_hits, length), minlength=length + 1)[:length]
        curve = np.cumsum(counts) / len(first_hits)
    return curve, excluded


def average_precision(ranked: np.ndarray, truth: np.ndarray) -> float | None:
    flags = _match_flags(ranked, truth)
    hits = np.flatnonzero(flags)
    if hits.size == 0:
        return None
    precision_at_hit = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hit.mean())


def map_score(ranked_lists, truths) -> tuple[float, int]:
    aps = [average_precision(r, t) for r, t in zip(ranked_lists, truths)]
    kept = [a for a in aps if a is not None]
    return (float(np.mean(kept)) if kept else 0.0), len(aps) - len(kept)


def multi_query_pool(records: list[FeatureRecord]) -> FeatureRecord:
    """Mean of the features, then each branch segment renormalised."""
    if not records:
        raise ValueError("cannot pool an empty set")
    head = records[0]
    if any(r.id != head.id or r.camera != head.camera or r.split_at != head.split_at for r in records):
        raise ValueError("multi-query pooling needs records from one identity and camera")
    mean = np.mean([r.feature for r in records], axis=0)
    return FeatureRecord(head.id, head.camera, normalise_segments(mean, head.split_at), head.split_at)


def pool_queries(records: list[FeatureRecord]) -> list[FeatureRecord]:
    groups: dict[tuple[int, int], list[FeatureRecord]] = {}
    for r in records:
        groups.setdefault((r.id, r.camera), []).append(r)
    return [multi_query_pool(groups[k]) for k in sorted(groups)]


def single_shot_protocol(gallery: list[FeatureRecord], rng: np.random.Generator) -> list[FeatureRecord]:
    """One uniformly drawn gallery image per identity, kept in gallery order."""
    by_id: dict[int, list[int]] = {}
    for i, g in enumerate(gallery):
        by_id.setdefault(g.id, []).append(i)
    chosen = sorted(int(rng.choice(ix)) if len(ix) > 1 else ix[0] for ix in by_id.values())
    return [gallery[i] for i in chosen]


@dataclass
class EvalReport:
    cmc: list[float]
    map: float
    protocol: str
    metric: str
    num_probes: int
    excluded_probes: int
    trials: int = 1
    best_match_ranks: list[int] = field(default_factory=list)
    config: dict[str, str] = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return self.cmc[0] if self.cmc else 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["cmc", "map", "protocol", "metric", "num_probes", "excluded_probes"],
    "properties": {
        "cmc": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "map": {"type": "number", "minimum": 0, "maximum": 1},
        "protocol": {"type": "string", "pattern": "^(SQ|MQ)-(SS|MS)$"},
        "metric": {"enum": ["L1", "L2"]},
        "num_probes": {"type": "integer", "minimum": 0},
        "excluded_probes": {"type": "integer", "minimum": 0},
        "trials": {"type": "integer", "minimum": 1},
        "best_match_ranks": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "config": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


def _score_once(probes, gallery, metric, cross_camera_filter, max_rank):
    G = np.stack([g.feature for g in gallery])
    gids = np.array([g.id for g in gallery])
    ranked, truths, ranks = [], [], []
    for p in probes:
        r = rank_gallery(p, gallery, metric, cross_camera_filter, distances(p.feature, G, metric))
        t = gids == p.id
        ranked.append(r)
        truths.append(t)
        hits = np.flatnonzero(t[r])
        if hits.size:
            ranks.append(int(hits[0]) + 1)
    curve, excluded = cmc(ranked, truths, max_rank)
    mean_ap, _ = map_score(ranked, truths)
    return curve, mean_ap, excluded, ranks


def evaluate(probes: list[FeatureRecord], gallery: list[FeatureRecord], metric: str = L2,
             query: str = SQ, shot: str = MS, trials: int = 10, seed: int = 0,
             cross_camera_filter: bool = True, max_rank: int | None = None) -> EvalReport:
    """Score probes against the gallery; single-shot averages over ``trials`` gallery draws."""
    if query not in (SQ, MQ) or shot not in (SS, MS) or metric not in (L1, L2):
        raise ValueError(f"bad protocol/metric {query}/{shot}/{metric}")
    if not probes or not gallery:
        raise EmptyGalleryError("need at least one probe and one gallery record")
    if query == MQ:
        probes = pool_queries(probes)
    if max_rank is None:
        max_rank = len(gallery) if shot == MS else len({g.id for g in gallery})
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(trials if shot == SS else 1):
        gal = single_shot_protocol(gallery, rng) if shot == SS else gallery
        runs.append(_score_once(probes, gal, metric, cross_camera_filter, max_rank))
    curve = np.mean([r[0] for r in runs], axis=0)
    return EvalReport(
        cmc=[float(v) for v in curve],
        map=float(np.mean([r[1] for r in runs])),
        protocol=f"{query.upper()}-{shot.upper()}",
        metric=metric.upper(),
        num_probes=len(probes),
        excluded_probes=int(runs[0][2]),
        trials=len(runs),
        best_match_ranks=runs[0][3],
    )


# ---------------------------------------------------------------------------
# feature files

FEATURE_MAGIC = b"JLMF"
FEATURE_VERSION = 1


class FeatureFormatError(ValueError):
    pass


def feature_bytes(matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimensionError("feature matrix must be 2-D")
    n, d = matrix.shape
    return (FEATURE_MAGIC + struct.pack("<HII", FEATURE_VERSION, n, d)
            + np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def parse_feature_bytes(raw: bytes) -> np.ndarray:
    if raw[:4] != FEATURE_MAGIC:
        raise FeatureFormatError("bad magic; not a JLML feature file")
    if len(raw) < 14:
        raise FeatureFormatError("truncated header")
    version, n, d = struct.unpack("<HII", raw[4:14])
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported feature file version {version}")
    body = raw[14:]
    if len(body) != 4 * n * d:
        raise FeatureFormatError(f"expected {4 * n * d} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float32)


def write_features(path, records: list[FeatureRecord], sources: list[str] | None = None,
                   config: dict[str, str] | None = None) -> None:
    """Write the binary matrix plus a ``<path>.csv`` manifest (and ``<path>.cfg`` if given)."""
    path = Path(path)
    mat = np.stack([r.feature for r in records]) if records else np.zeros((0, 0))
    path.write_bytes(feature_bytes(mat))
    sources = sources or [""] * len(records)
    with open(manifest_path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "id", "camera", "source_path"])
        for i, (r, s) in enumerate(zip(records, sources)):
            w.writerow([i, r.id, r.camera, s])
    if config is not None:
        kv = dict(config)
        kv.setdefault("features.split_at", str(records[0].split_at if records else 0))
        Path(str(path) + ".cfg").write_text("".join(f"{k}={v}\n" for k, v in kv.items()), encoding="utf-8")


def manifest_path(path) -> Path:
    return Path(str(path) + ".csv")


def read_features(path) -> list[FeatureRecord]:
    path = Path(path)
    mat = parse_feature_bytes(path.read_bytes())
    with open(manifest_path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(mat):
        raise FeatureFormatError(f"manifest has {len(rows)} rows for {len(mat)} features")
    split_at = mat.shape[1] // 2
    cfg = Path(str(path) + ".cfg")
    if cfg.exists():
        for line in cfg.read_text(encoding="utf-8").splitlines():
            k, _, v = line.partition("=")
            if k == "features.split_at":
                split_at = int(v)
    return [FeatureRecord(int(r["id"]), int(r["camera"]), mat[i].astype(np.float64), split_at)
            for i, r in enumerate(rows)]

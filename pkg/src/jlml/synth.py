"""Deterministic synthetic multi-camera identity datasets.

Each identity owns a global palette (background and body colour) and four
horizontal band motifs (oriented sinusoidal textures with their own tint).
Images add a per-camera colour transform, pixel noise, and optionally a
vertical shift and an occluding rectangle. Everything is derived from
``SynthConfig.seed``; per-image streams are keyed by image index.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace, fields
from pathlib import Path

import numpy as np

from .tensor import ConfigError

N_BANDS = 4
TRAIN, PROBE, GALLERY = "train", "test-probe", "test-gallery"
_ID_STREAM, _CAM_STREAM, _IMG_STREAM = 1, 2, 3


@dataclass(frozen=True)
class SynthConfig:
    n_id: int = 32
    cameras: int = 2
    images_per_id_per_cam: int = 4
    image_size: tuple[int, int] = (64, 64)
    global_cue_strength: float = 1.0
    local_cue_strength: float = 1.0
    misalign_max_shift: int = 0
    occlusion_prob: float = 0.0
    occlusion_max_frac: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if self.n_id < 1 or self.cameras < 1 or self.images_per_id_per_cam < 1:
            raise ConfigError("n_id, cameras and images_per_id_per_cam must be positive")
        if h < N_BANDS or w < 1:
            raise ConfigError(f"image size {self.image_size} too small")
        for name in ("global_cue_strength", "local_cue_strength", "occlusion_prob", "occlusion_max_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.misalign_max_shift < 0 or self.misalign_max_shift >= h / 4:
            raise ConfigError(f"misalign_max_shift must be in [0, H/4), got {self.misalign_max_shift}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    def replace(self, **changes) -> "SynthConfig":
        return replace(self, **changes)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = f"{v[0]}x{v[1]}" if f.name == "image_size" else repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "SynthConfig":
        known = {f.name: f for f in fields(cls)}
        parsed = {}
        for k, text in kv.items():
            if k not in known:
                raise ConfigError(f"unknown synth config key {k!r}")
            if k == "image_size":
                h, _, w = text.lower().partition("x")
                parsed[k] = (int(h), int(w or h))
            elif isinstance(getattr(cls, k, None), float) or k.endswith(("strength", "prob", "frac", "sigma")):
                parsed[k] = float(text)
            else:
                parsed[k] = int(text)
        return cls(**parsed)


@dataclass
class IdentityDataset:
    """Images N x 3 x H x W (float32 in [0, 1]) with 1-based identity and camera labels."""

    images: np.ndarray
    ids: np.ndarray
    cameras: np.ndarray
    splits: np.ndarray
    occluders: list = field(default_factory=list)
    shifts: np.ndarray | None = None
    config: SynthConfig | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, mask_or_idx, split: str | None = None) -> "IdentityDataset":
        idx = np.flatnonzero(mask_or_idx) if np.asarray(mask_or_idx).dtype == bool else np.asarray(mask_or_idx)
        splits = self.splits[idx].copy()
        if split is not None:
            splits[:] = split
        return IdentityDataset(
            images=self.images[idx], ids=self.ids[idx], cameras=self.cameras[idx], splits=splits,
            occluders=[self.occluders[i] for i in idx] if self.occluders else [],
            shifts=None if self.shifts is None else self.shifts[idx], config=self.config,
        )

    def class_labels(self) -> tuple[np.ndarray, np.ndarray]:
        """0-based contiguous class indices for the ids present, and the id of each class."""
        uniq = np.unique(self.ids)
        return np.searchsorted(uniq, self.ids), uniq


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def _identity_traits(cfg: SynthConfig, pid: int):
    rng = _rng(cfg.seed, _ID_STREAM, pid)
    bg = rng.uniform(0.0, 1.0, 3)
    body = rng.uniform(0.0, 1.0, 3)
    motifs = []
    for _ in range(N_BANDS):
        motifs.append(dict(
            freq=rng.uniform(1.5, 5.0),
            theta=rng.uniform(0, np.pi),
            phase=rng.uniform(0, 2 * np.pi),
            tint=rng.uniform(-1.0, 1.0, 3),
        ))
    return bg, body, motifs


def _camera_transform(cfg: SynthConfig, cam: int):
    rng = _rng(cfg.seed, _CAM_STREAM, cam)
    return rng.uniform(0.9, 1.1, 3), rng.uniform(-0.05, 0.05, 3)


def _render_identity(cfg: SynthConfig, pid: int) -> np.ndarray:
    h, w = cfg.image_size
    bg, body, motifs = _identity_traits(cfg, pid)
    gray = np.full(3, 0.5)
    g = cfg.global_cue_strength
    bg = gray + g * (bg - gray)
    body = gray + g * (body - gray)

    img = np.empty((3, h, w))
    img[:] = bg[:, None, None]
    c0, c1 = w // 4, w - w // 4
    img[:, :, c0:c1] = body[:, None, None]

    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None] * N_BANDS
    bounds = np.linspace(0, h, N_BANDS + 1).round().astype(int)
    for j, mo in enumerate(motifs):
        r0, r1 = bounds[j], bounds[j + 1]
        u = xx[r0:r1, c0:c1] * np.cos(mo["theta"]) + yy[r0:r1, c0:c1] * np.sin(mo["theta"])
        pattern = np.sin(2 * np.pi * mo["freq"] * u + mo["phase"])
        img[:, r0:r1, c0:c1] += 0.3 * cfg.local_cue_strength * mo["tint"][:, None, None] * pattern
    return img


def _shift_rows(img: np.ndarray, s: int) -> np.ndarray:
    if s == 0:
        return img
    out = np.empty_like(img)
    if s > 0:
        out[:, s:] = img[:, :-s]
        out[:, :s] = img[:, :1]
    else:
        out[:, :s] = img[:, -s:]
        out[:, s:] = img[:, -1:]
    return out


def _occluder(rng: np.random.Generator, h: int, w: int, max_frac: float):
    area = rng.uniform(0.25, 1.0) * max_frac * h * w
    aspect = rng.uniform(0.5, 2.0)
    oh = int(min(h, max(1, round(np.sqrt(area * aspect)))))
    ow = int(min(w, max(1, int(area // oh))))
    top = int(rng.integers(0, h - oh + 1))
    left = int(rng.integers(0, w - ow + 1))
    return top, left, oh, ow


def generate(cfg: SynthConfig) -> IdentityDataset:
    h, w = cfg.image_size
    n = cfg.n_id * cfg.cameras * cfg.images_per_id_per_cam
    images = np.empty((n, 3, h, w), dtype=np.float32)
    ids = np.empty(n, dtype=np.int64)
    cams = np.empty(n, dtype=np.int64)
    shifts = np.zeros(n, dtype=np.int64)
    occluders = []
    cam_tf = {c: _camera_transform(cfg, c) for c in range(1, cfg.cameras + 1)}
    idx = 0
    for pid in range(1, cfg.n_id + 1):
        base = _render_identity(cfg, pid)
        for cam in range(1, cfg.cameras + 1):
            gain, offset = cam_tf[cam]
            for _ in range(cfg.images_per_id_per_cam):
                rng = _rng(cfg.seed, _IMG_STREAM, idx)
                img = base * gain[:, None, None] + offset[:, None, None]
                if cfg.misalign_max_shift:
                    shifts[idx] = rng.integers(-cfg.misalign_max_shift, cfg.misalign_max_shift + 1)
                    img = _shift_rows(img, int(shifts[idx]))
                box = None
                if cfg.occlusion_prob > 0 and rng.random() < cfg.occlusion_prob:
                    box = _occluder(rng, h, w, cfg.occlusion_max_frac)
                    t, l, oh, ow = box
                    img[:, t:t + oh, l:l + ow] = rng.uniform(0, 1, 3)[:, None, None]
                if cfg.noise_sigma:
                    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
                images[idx] = np.clip(img, 0.0, 1.0)
                ids[idx], cams[idx] = pid, cam
                occluders.append(box)
                idx += 1
    return IdentityDataset(images, ids, cams, np.full(n, "", dtype=object), occluders, shifts, cfg)


def split_tags(dataset: IdentityDataset, train_frac: float, seed: int, trial: int = 0) -> np.ndarray:
    """Per-image split tag for an identity-disjoint train / probe / gallery split.

    Each test identity gets one probe camera, drawn at random among its
    cameras; its images from that camera are probes and the rest are gallery.
    Trial ``t`` uses seed ``seed + t``.
    """
    if not 0.0 <= train_frac <= 1.0:
        raise ConfigError("train_frac must lie in [0, 1]")
    rng = np.random.default_rng(seed + trial)
    uniq = np.unique(dataset.ids)
    n_train = int(round(train_frac * len(uniq)))
    if n_train >= len(uniq):
        raise ConfigError("split leaves no test identities")
    perm = rng.permutation(uniq)
    tags = np.full(len(dataset), TRAIN, dtype=object)
    for pid in np.sort(perm[n_train:]):
        mine = dataset.ids == pid
        cams = np.unique(dataset.cameras[mine])
        if len(cams) < 2:
            raise ConfigError(f"test identity {pid} is seen by fewer than two cameras")
        probe_cam = rng.choice(cams)
        tags[mine & (dataset.cameras == probe_cam)] = PROBE
        tags[mine & (dataset.cameras != probe_cam)] = GALLERY
    return tags


def split(dataset: IdentityDataset, train_frac: float, seed: int, trial: int = 0):
    """Return ``(train, probe, gallery)`` subsets; see :func:`split_tags`."""
    tags = split_tags(dataset, train_frac, seed, trial)
    return tuple(dataset.subset(tags == t, t) for t in (TRAIN, PROBE, GALLERY))


# ---------------------------------------------------------------------------
# on-disk layout

IMAGE_MAGIC = b"JLMI"


def write_jlmi(path, img: np.ndarray) -> None:
    c, h, w = img.shape
    Path(path).write_bytes(IMAGE_MAGIC + struct.pack("<3I", c, h, w) + np.asarray(img, dtype="<f4").tobytes())


def read_jlmi(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: bad magic")
    c, h, w = struct.unpack("<3I", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * c * h * w:
        raise ValueError(f"{path}: truncated image data")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_ppm(path, img: np.ndarray) -> None:
    c, h, w = img.shape
    if c != 3:
        raise ValueError("PPM needs three channels")
    pixels = np.clip(np.round(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pixels = np.frombuffer(raw[pos:pos + 3 * w * h], dtype=np.uint8)
    if pixels.size != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def read_image(path) -> np.ndarray:
    path = Path(path)
    return read_ppm(path) if path.suffix.lower() == ".ppm" else read_jlmi(path)


def write_dataset(dataset: IdentityDataset, out_dir, image_format: str = "jlmi",
                  extra_config: dict[str, str] | None = None) -> Path:
    """Write ``manifest.csv``, one image file per row and ``config.txt`` (key=value)."""
    if image_format not in ("jlmi", "ppm"):
        raise ConfigError(f"unknown image format {image_format!r}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        rel = f"images/{i:06d}.{image_format}"
        (write_ppm if image_format == "ppm" else write_jlmi)(out / rel, dataset.images[i])
        rows.append((i, int(dataset.ids[i]), int(dataset.cameras[i]), dataset.splits[i] or "", rel))
    with open(out / "manifest.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "id", "camera", "split", "path"])
        wr.writerows(rows)
    kv = dict(dataset.config.to_kv()) if dataset.config else {}
    kv.update(extra_config or {})
    (out / "config.txt").write_text("".join(f"{k}={v}\n" for k, v in kv.items()), encoding="utf-8")
    return out


def read_dataset(root, split_name: str | None = None) -> IdentityDataset:
    root = Path(root)
    with open(root / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if split_name is not None:
        rows = [r for r in rows if r["split"] == split_name]
    if not rows:
        raise ValueError(f"no images in {root} for split {split_name!r}")
    images = np.stack([read_image(root / r["path"]) for r in rows])
    cfg = None
    if (root / "config.txt").exists():
        kv = {}
        for line in (root / "config.txt").read_text(encoding="utf-8").splitlines():
            k, _, v = line.partition("=")
            if k in {f.name for f in fields(SynthConfig)}:
                kv[k] = v
        cfg = SynthConfig.from_kv(kv) if kv else None
    return IdentityDataset(
        images=images,
        ids=np.array([int(r["id"]) for r in rows]),
        cameras=np.array([int(r["camera"]) for r in rows]),
        splits=np.array([r["split"] for r in rows], dtype=object),
        config=cfg,
    )

"""Command-line entry point: ``jlml <command> ...``.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import ablation as A
from . import checkpoint as C
from . import evaluation as E
from . import gradchecks as GC
from . import model as M
from . import synth as S
from .tensor import ConfigError
from .trainer import TrainConfig, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

MODEL_KEYS = {f.name for f in dataclasses.fields(M.ModelConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
RUN_KEYS = {"preset"}


def parse_kv_text(text: str, origin: str = "config") -> dict[str, str]:
    kv = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
        kv[key.strip()] = value.strip()
    return kv


def resolve_run_config(kv: dict[str, str]):
    """Split merged settings into (preset, model kv, train kv).

    Keys may carry a ``model.`` or ``train.`` prefix; bare ``lambda_*`` keys
    belong to the model.
    """
    preset, model_kv, train_kv = "toy", {}, {}
    for key, value in kv.items():
        section, _, name = key.rpartition(".")
        if key in RUN_KEYS:
            preset = value
        elif section == "model" or (not section and name in MODEL_KEYS):
            if name not in MODEL_KEYS:
                raise ConfigError(f"unknown model key {key!r}")
            model_kv[name] = value
        elif section == "train" or (not section and name in TRAIN_KEYS):
            if name not in TRAIN_KEYS:
                raise ConfigError(f"unknown train key {key!r}")
            train_kv[name] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if preset not in ("paper", "toy"):
        raise ConfigError(f"preset must be paper or toy, got {preset!r}")
    return preset, model_kv, train_kv


def _model_config(preset: str, model_kv: dict[str, str]) -> M.ModelConfig:
    base = (M.paper_config() if preset == "paper" else M.toy_config()).to_kv()
    base.update(model_kv)
    return M.ModelConfig.from_kv(base)


def _write_kv(path: Path, kv: dict[str, str]) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in kv.items()), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    size = args.size if len(args.size) == 2 else args.size * 2
    cfg = S.SynthConfig(
        n_id=args.ids, cameras=args.cams, images_per_id_per_cam=args.per_cam, image_size=tuple(size),
        occlusion_prob=args.occlusion, misalign_max_shift=args.misalign, noise_sigma=args.noise,
        global_cue_strength=args.global_cue, local_cue_strength=args.local_cue, seed=args.seed,
    )
    ds = S.generate(cfg)
    ds.splits = S.split_tags(ds, args.train_frac, args.seed)
    out = S.write_dataset(ds, args.out, args.format,
                          extra_config={"gen.train_frac": repr(args.train_frac), "gen.format": args.format})
    counts = {t: int((ds.splits == t).sum()) for t in (S.TRAIN, S.PROBE, S.GALLERY)}
    print(f"wrote {len(ds)} images to {out} ({', '.join(f'{k}={v}' for k, v in counts.items())})")
    return EXIT_OK


def cmd_train(args) -> int:
    kv = {}
    if args.config:
        kv.update(parse_kv_text(Path(args.config).read_text(encoding="utf-8"), args.config))
    for item in args.set or []:
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        kv[k.strip()] = v.strip()
    if args.loss_mode:
        kv["loss_mode"] = args.loss_mode
    if args.no_sfl:
        kv["sfl_enabled"] = "false"
    if args.iterations is not None:
        kv["iterations"] = str(args.iterations)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    preset, model_kv, train_kv = resolve_run_config(kv)

    data = S.read_dataset(args.data, S.TRAIN)
    classes, class_ids = data.class_labels()
    model_kv.setdefault("n_id", str(len(class_ids)))
    model_kv.setdefault("input_size", f"{data.images.shape[2]}x{data.images.shape[3]}")
    mcfg = _model_config(preset, model_kv)
    tcfg = TrainConfig.from_kv(train_kv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = M.build(mcfg, seed=tcfg.seed)
    start = time.perf_counter()
    train(model, data, tcfg, log_path=out / "train_log.csv")
    elapsed = time.perf_counter() - start
    meta = {f"train.{k}": v for k, v in tcfg.to_kv().items()}
    meta["run.preset"] = preset
    meta["run.data"] = str(args.data)
    meta["run.class_ids"] = ",".join(str(int(i)) for i in class_ids)
    C.save_checkpoint(model, out / "model.jlmc", meta)
    _write_kv(out / "config.txt", {**mcfg.to_kv(), **meta})
    print(f"trained {tcfg.iterations} iterations in {elapsed:.1f}s; checkpoint {out / 'model.jlmc'}")
    return EXIT_OK


def cmd_extract(args) -> int:
    model = C.load_checkpoint(args.ckpt)
    split_name = None if args.split == "all" else args.split
    data = S.read_dataset(args.data, split_name)
    root = Path(args.data)
    with open(root / "manifest.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if split_name is None or r["split"] == split_name]
    ex = E.extract(model, data.images, data.ids, data.cameras)
    config = {**model.config.to_kv(), **model.meta, "extract.split": args.split, "extract.data": str(args.data)}
    E.write_features(args.out, ex.records, [r["path"] for r in rows], config=config)
    dim = ex.records[0].feature.size if ex.records else 0
    print(f"extracted {len(ex.records)} x {dim} features to {args.out}; "
          f"{ex.images_per_second:.1f} images/s ({ex.ms_per_image:.2f} ms/image)")
    return EXIT_OK


def cmd_eval(args) -> int:
    probes = E.read_features(args.probe_features)
    gallery = E.read_features(args.gallery_features)
    report = E.evaluate(probes, gallery, metric=args.metric, query=args.protocol, shot=args.shot,
                        trials=args.trials, seed=args.seed, cross_camera_filter=not args.no_camera_filter)
    report.config = {
        "eval.probe_features": str(args.probe_features), "eval.gallery_features": str(args.gallery_features),
        "eval.protocol": args.protocol, "eval.shot": args.shot, "eval.metric": args.metric,
        "eval.trials": str(args.trials), "eval.seed": str(args.seed),
        "eval.cross_camera_filter": str(not args.no_camera_filter).lower(),
    }
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    ranks = ", ".join(f"R{k}={report.cmc[k - 1]:.3f}" for k in (1, 5, 10, 20) if k <= len(report.cmc))
    print(f"{report.protocol} {report.metric}: {ranks} mAP={report.map:.3f} "
          f"probes={report.num_probes} excluded={report.excluded_probes}")
    return EXIT_OK


def inspect_table(cfg: M.ModelConfig) -> dict:
    rows = [{"layer": r.layer, "global": list(r.global_size), "local": list(r.local_size)}
            for r in M.stage_output_sizes(cfg)]
    return {
        "depth": M.depth(cfg),
        "streams": M.stream_count(cfg),
        "params": M.count_params(cfg),
        "head_params": M.count_head_params(cfg),
        "flops": M.count_flops(cfg),
        "stages": rows,
        "config": cfg.to_kv(),
    }


def cmd_inspect(args) -> int:
    overrides = {}
    if args.m is not None:
        overrides["m"] = args.m
    if args.ids is not None:
        overrides["n_id"] = args.ids
    cfg = (M.paper_config if args.preset == "paper" else M.toy_config)(**overrides)
    info = inspect_table(cfg)
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return EXIT_OK
    fmt = lambda hw: f"{hw[0]}x{hw[1]}"  # noqa: E731
    print(f"{'layer':<10}{'global':>10}{'local':>10}")
    for r in info["stages"]:
        print(f"{r['layer']:<10}{fmt(r['global']):>10}{fmt(r['local']):>10}")
    print(f"depth        {info['depth']}")
    print(f"streams      {info['streams']}")
    print(f"params       {info['params']} ({info['params'] / 1e6:.2f}M, excluding heads)")
    print(f"head params  {info['head_params']} (n_id={cfg.n_id})")
    print(f"FLOPs        {info['flops']} ({info['flops'] / 1e9:.2f}G)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    settings = A.AblationSettings()
    if args.iterations is not None:
        settings = dataclasses.replace(settings, train=settings.train.replace(iterations=args.iterations))
    if args.ids is not None:
        settings = dataclasses.replace(settings, synth=settings.synth.replace(n_id=args.ids))
    seeds = list(range(args.seeds))
    runner = A.AblationRunner(settings, log=lambda msg: print(msg, file=sys.stderr))
    suites = list(A.SUITES) if args.suite == "all" else [args.suite]
    reports = [runner.run_suite(s, seeds) for s in suites]
    text = A.to_json(reports[0] if len(reports) == 1 else {"suites": reports})
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    for rep in reports:
        summary = ", ".join(f"{k}={v['mean_rank1']:.3f}" for k, v in rep["summary"].items())
        print(f"{rep['suite']}: mean Rank-1 {summary}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.only.split(",") if args.only else None
    if names:
        unknown = set(names) - set(GC.CHECKS)
        if unknown:
            raise ConfigError(f"unknown checks: {sorted(unknown)}")
    results = GC.run_checks(seeds=range(args.seeds), names=names)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  {r.detail}" if r.detail else ""
        print(f"{status}  {r.name:<26} max rel err {r.max_error:.2e} (tol {r.tol:.0e}){extra}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jlml", description="Two-branch re-id network toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic identity dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--ids", type=int, default=32)
    g.add_argument("--cams", type=int, default=2)
    g.add_argument("--per-cam", type=int, default=4)
    g.add_argument("--size", type=int, nargs="+", default=[64], metavar="N", help="H [W]")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--occlusion", type=float, default=0.0, help="occlusion probability")
    g.add_argument("--misalign", type=int, default=0, help="max vertical shift in pixels")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--global-cue", type=float, default=1.0)
    g.add_argument("--local-cue", type=float, default=1.0)
    g.add_argument("--train-frac", type=float, default=0.5)
    g.add_argument("--format", choices=("jlmi", "ppm"), default="jlmi")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model on the train split of a dataset")
    t.add_argument("--config", help="key=value file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--loss-mode", choices=(M.MULTILOSS, M.UNILOSS))
    t.add_argument("--no-sfl", action="store_true", help="disable the sparsity penalties")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    x = sub.add_parser("extract", help="write normalised features for one split")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default=S.GALLERY, choices=(S.TRAIN, S.PROBE, S.GALLERY, "all"))
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_extract)

    e = sub.add_parser("eval", help="rank a gallery for each probe and report CMC / mAP")
    e.add_argument("--probe-features", required=True)
    e.add_argument("--gallery-features", required=True)
    e.add_argument("--protocol", choices=(E.SQ, E.MQ), default=E.SQ)
    e.add_argument("--shot", choices=(E.SS, E.MS), default=E.MS)
    e.add_argument("--metric", choices=(E.L1, E.L2), default=E.L2)
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-camera-filter", action="store_true")
    e.add_argument("--report")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="layer table, parameter and FLOP counts")
    i.add_argument("--preset", choices=("paper", "toy"), default="paper")
    i.add_argument("--m", type=int)
    i.add_argument("--ids", type=int)
    i.add_argument("--json", action="store_true")
    i.set_defaults(fn=cmd_inspect)

    a = sub.add_parser("ablate", help="train variants on synthetic data and compare Rank-1")
    a.add_argument("--suite", choices=A.SUITES + ("all",), required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--iterations", type=int)
    a.add_argument("--ids", type=int)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--only", help="comma-separated check names")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

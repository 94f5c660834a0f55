"""Desk-scale ablation suites on synthetic data.

Each suite trains toy-preset variants on an identity-disjoint split and
reports test Rank-1 / mAP per variant and seed. Runs are cached by their
full configuration, so suites that share a baseline train it once.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import evaluation as E
from .model import build, stem_output_size, toy_config
from .synth import SynthConfig, generate, split
from .tensor import ConfigError
from .trainer import TrainConfig, train

SUITES = ("uniloss", "noshare", "nosfl", "parts", "branches", "robustness")
PARTS_M = (1, 2, 4, 8)


@dataclass(frozen=True)
class AblationSettings:
    synth: SynthConfig = SynthConfig(n_id=32, cameras=2, images_per_id_per_cam=4, image_size=(64, 64))
    train: TrainConfig = TrainConfig(iterations=300, batch_size=16)
    train_frac: float = 0.5
    metric: str = E.L2

    def to_kv(self) -> dict[str, str]:
        kv = {f"synth.{k}": v for k, v in self.synth.to_kv().items() if k != "seed"}
        kv.update({f"train.{k}": v for k, v in self.train.to_kv().items() if k != "seed"})
        kv["ablation.train_frac"] = repr(self.train_frac)
        kv["ablation.metric"] = self.metric
        return kv


@dataclass(frozen=True)
class Variant:
    name: str
    model: tuple = ()
    synth: tuple = ()
    branch: str = "joint"

    @classmethod
    def make(cls, name, branch="joint", synth=None, **model):
        return cls(name, tuple(sorted(model.items())), tuple(sorted((synth or {}).items())), branch)


def suite_variants(suite: str, settings: AblationSettings) -> list[Variant]:
    base = Variant.make
    if suite == "uniloss":
        return [base("multiloss"), base("uniloss", loss_mode="uniloss")]
    if suite == "noshare":
        return [base("shared"), base("unshared", share_stem=False)]
    if suite == "nosfl":
        return [base("sfl-on"), base("sfl-off", sfl_enabled=False)]
    if suite == "branches":
        return [base("global", "global"), base("local", "local"), base("joint", "joint")]
    if suite == "parts":
        h = stem_output_size(toy_config(input_size=settings.synth.image_size))[0]
        return [base(f"m={m}", m=m) for m in PARTS_M if h % m == 0 and h // m >= 2]
    if suite == "robustness":
        h = settings.synth.image_size[0]
        hard = dict(occlusion_prob=0.5, misalign_max_shift=h // 8)
        return [base("global", "global", hard), base("local", "local", hard)]
    raise ConfigError(f"unknown ablation suite {suite!r}; choose from {', '.join(SUITES)}")


@dataclass
class AblationRunner:
    settings: AblationSettings = field(default_factory=AblationSettings)
    # (model overrides, synth overrides, seed) -> extracted probe / gallery records
    cache: dict = field(default_factory=dict)
    log: Callable[[str], None] | None = None

    def features(self, variant: Variant, seed: int):
        key = (variant.model, variant.synth, seed)
        if key not in self.cache:
            scfg = self.settings.synth.replace(seed=seed, **dict(variant.synth))
            train_set, probe, gallery = split(generate(scfg), self.settings.train_frac, seed)
            n_train = len(np.unique(train_set.ids))
            mcfg = toy_config(input_size=scfg.image_size, n_id=n_train, **dict(variant.model))
            model = build(mcfg, seed=seed)
            train(model, train_set, self.settings.train.replace(seed=seed))
            p = E.extract(model, probe.images, probe.ids, probe.cameras).records
            g = E.extract(model, gallery.images, gallery.ids, gallery.cameras).records
            self.cache[key] = (p, g, mcfg)
            if self.log:
                self.log(f"trained {dict(variant.model) or 'baseline'} {dict(variant.synth) or ''} seed={seed}")
        return self.cache[key]

    def score(self, variant: Variant, seed: int, metric: str | None = None) -> E.EvalReport:
        p, g, _ = self.features(variant, seed)
        return E.evaluate(E.select_branch(p, variant.branch), E.select_branch(g, variant.branch),
                          metric=metric or self.settings.metric, shot=E.MS)

    def run_suite(self, suite: str, seeds) -> dict:
        seeds = [int(s) for s in seeds]
        rows = []
        for variant in suite_variants(suite, self.settings):
            for seed in seeds:
                rep = self.score(variant, seed)
                _, _, mcfg = self.features(variant, seed)
                rows.append({"variant": variant.name, "seed": seed, "branch": variant.branch,
                             "rank1": rep.rank1, "map": rep.map,
                             "config": {**mcfg.to_kv(), **{f"synth.{k}": str(v) for k, v in variant.synth}}})
        names = list(dict.fromkeys(r["variant"] for r in rows))
        summary = {n: {"mean_rank1": float(np.mean([r["rank1"] for r in rows if r["variant"] == n])),
                       "mean_map": float(np.mean([r["map"] for r in rows if r["variant"] == n]))}
                   for n in names}
        return {"suite": suite, "seeds": seeds, "config": self.settings.to_kv(), "rows": rows, "summary": summary}


def compare(report: dict, better: str, worse: str) -> dict:
    """Per-seed Rank-1 margins of ``better`` over ``worse``."""
    by = {(r["variant"], r["seed"]): r["rank1"] for r in report["rows"]}
    margins = [by[(better, s)] - by[(worse, s)] for s in report["seeds"]]
    wins = sum(m >= 0 for m in margins)
    return {"better": better, "worse": worse, "margins": margins, "wins": wins,
            "holds": wins >= (2 * len(margins) + 2) // 3}


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"

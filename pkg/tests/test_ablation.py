import json

import pytest

from jlml import ablation as A
from jlml.synth import SynthConfig
from jlml.tensor import ConfigError
from jlml.trainer import TrainConfig

FAST = A.AblationSettings(
    synth=SynthConfig(n_id=6, cameras=2, images_per_id_per_cam=2, image_size=(32, 32)),
    train=TrainConfig(iterations=2, batch_size=4),
)


def test_suite_variants():
    names = lambda s: [v.name for v in A.suite_variants(s, A.AblationSettings())]  # noqa: E731
    assert names("parts") == ["m=1", "m=2", "m=4", "m=8"]
    assert names("branches") == ["global", "local", "joint"]
    assert names("uniloss") == ["multiloss", "uniloss"]
    robust = A.suite_variants("robustness", A.AblationSettings())
    assert dict(robust[0].synth) == {"occlusion_prob": 0.5, "misalign_max_shift": 8}
    with pytest.raises(ConfigError):
        A.suite_variants("dropout", FAST)


def test_parts_skips_infeasible_stripes():
    tiny = A.AblationSettings(synth=SynthConfig(image_size=(16, 16)))
    assert [v.name for v in A.suite_variants("parts", tiny)] == ["m=1", "m=2", "m=4"]


def test_runner_shares_baseline_and_embeds_config():
    runner = A.AblationRunner(FAST)
    rep = runner.run_suite("branches", seeds=[0, 1])
    assert len(runner.cache) == 2
    runner.run_suite("nosfl", seeds=[0])
    assert len(runner.cache) == 3
    assert rep["seeds"] == [0, 1] and rep["config"]["train.iterations"] == "2"
    assert {r["variant"] for r in rep["rows"]} == {"global", "local", "joint"}
    assert all("stage_widths_global" in r["config"] for r in rep["rows"])
    json.loads(A.to_json(rep))


def test_runner_is_deterministic():
    a = A.AblationRunner(FAST).run_suite("uniloss", seeds=[3])
    b = A.AblationRunner(FAST).run_suite("uniloss", seeds=[3])
    assert A.to_json(a) == A.to_json(b)


def test_compare_majority_rule():
    rep = {"seeds": [0, 1, 2], "rows": [
        {"variant": "a", "seed": s, "rank1": r} for s, r in zip(range(3), (0.6, 0.4, 0.9))] + [
        {"variant": "b", "seed": s, "rank1": r} for s, r in zip(range(3), (0.5, 0.6, 0.8))]}
    res = A.compare(rep, "a", "b")
    assert res["wins"] == 2 and res["holds"]
    assert not A.compare(rep, "b", "a")["holds"]

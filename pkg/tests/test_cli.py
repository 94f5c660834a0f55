import json

import jsonschema
import numpy as np
import pytest

from jlml import checkpoint as C
from jlml import cli
from jlml import evaluation as E
from jlml import tensor as T


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--out", root / "data", "--ids", 6, "--cams", 2, "--per-cam", 2, "--size", 32, "--seed", 7) == 0
    cfg = root / "run.cfg"
    cfg.write_text("# small run\npreset=toy\nbatch_size=4\nm=2\nstem_channels=4\n")
    assert run("train", "--config", cfg, "--data", root / "data", "--out", root / "run", "--iterations", 3) == 0
    return root


def test_gen_counts_and_determinism(tmp_path):
    assert run("gen", "--out", tmp_path / "a", "--ids", 32, "--cams", 2, "--per-cam", 4, "--size", 64, "--seed", 7) == 0
    rows = (tmp_path / "a" / "manifest.csv").read_text().splitlines()
    assert len(rows) == 1 + 256
    assert run("gen", "--out", tmp_path / "b", "--ids", 32, "--cams", 2, "--per-cam", 4, "--size", 64, "--seed", 7) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("gen", "--ids", 3) == 2
    assert run("frobnicate") == 2
    assert run("gen", "--out", tmp_path / "x", "--occlusion", 2.0) == 2
    assert run("inspect", "--preset", "paper", "--m", 3) == 2


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    log = (run_dir / "train_log.csv").read_text().splitlines()
    assert log[0] == "iter,lr,ce_global,ce_local,reg_global,reg_local" and len(log) == 4
    model = C.load_checkpoint(run_dir / "model.jlmc")
    assert model.config.m == 2 and model.config.n_id == 3 and model.config.input_size == (32, 32)
    assert model.meta["train.iterations"] == "3" and model.meta["train.batch_size"] == "4"


def test_train_rejects_unknown_key(workspace, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    assert run("train", "--config", cfg, "--data", workspace / "data", "--out", tmp_path / "o") == 2


@pytest.mark.parametrize("flags,check", [
    (["--loss-mode", "uniloss"], lambda m: "head.fused.w" in m.params and "head.global.w" not in m.params),
    (["--no-sfl"], lambda m: m.config.effective_lambdas == (0.0, 0.0)),
])
def test_train_flag_passthrough(workspace, tmp_path, flags, check):
    args = ["train", "--data", workspace / "data", "--out", tmp_path / "o", "--iterations", 1,
            "--set", "batch_size=2", "--set", "stem_channels=4", "--set", "m=2"] + flags
    assert run(*args) == 0
    assert check(C.load_checkpoint(tmp_path / "o" / "model.jlmc"))


def test_extract_and_eval(workspace, tmp_path, capsys):
    ck = workspace / "run" / "model.jlmc"
    for split in ("test-probe", "test-gallery"):
        assert run("extract", "--ckpt", ck, "--data", workspace / "data", "--split", split,
                   "--out", tmp_path / f"{split}.jlmf") == 0
    assert "images/s" in capsys.readouterr().out
    recs = E.read_features(tmp_path / "test-probe.jlmf")
    cfg = C.load_checkpoint(ck).config
    assert recs[0].feature.size == cfg.feat_dim_global + cfg.feat_dim_local
    # re-extraction is bit-identical
    assert run("extract", "--ckpt", ck, "--data", workspace / "data", "--split", "test-probe",
               "--out", tmp_path / "again.jlmf") == 0
    assert (tmp_path / "again.jlmf").read_bytes() == (tmp_path / "test-probe.jlmf").read_bytes()

    for metric in ("l1", "l2"):
        report = tmp_path / f"{metric}.json"
        assert run("eval", "--probe-features", tmp_path / "test-probe.jlmf",
                   "--gallery-features", tmp_path / "test-gallery.jlmf",
                   "--metric", metric, "--protocol", "mq", "--shot", "ss", "--trials", 3, "--report", report) == 0
        doc = json.loads(report.read_text())
        jsonschema.validate(doc, E.REPORT_SCHEMA)
        assert doc["metric"] == metric.upper() and doc["config"]["eval.trials"] == "3"


def test_eval_perfect_fixture(tmp_path):
    a = E.normalise_segments(np.array([1.0, 0, 1, 0]), 2)
    b = E.normalise_segments(np.array([0.0, 1, 0, 1]), 2)
    probes = [E.FeatureRecord(1, 1, a, 2), E.FeatureRecord(2, 1, b, 2)]
    gallery = [E.FeatureRecord(1, 2, a, 2), E.FeatureRecord(2, 2, b, 2)]
    E.write_features(tmp_path / "p.jlmf", probes)
    E.write_features(tmp_path / "g.jlmf", gallery)
    assert run("eval", "--probe-features", tmp_path / "p.jlmf", "--gallery-features", tmp_path / "g.jlmf",
               "--report", tmp_path / "r.json") == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["cmc"][0] == 1.0 and doc["map"] == 1.0


def test_inspect_paper(capsys):
    assert run("inspect", "--preset", "paper") == 0
    out = capsys.readouterr().out
    assert "depth        39" in out and "streams      5" in out and "28x56" in out
    assert run("inspect", "--preset", "toy", "--json") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["streams"] == 5 and info["config"]["n_id"] == "16"


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--seeds", 2, "--only", "relu,conv2d,linear") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_gradcheck_reports_injected_fault(monkeypatch, capsys):
    def flipped_relu(x):
        mask = x.data > 0
        return T.record("relu", x.data * mask, (x,), lambda g: (-g * mask,))

    monkeypatch.setattr(T, "relu", flipped_relu)
    assert run("gradcheck", "--seeds", 1, "--only", "relu,matmul") == 1
    out = capsys.readouterr().out
    assert "FAIL  relu" in out and "PASS  matmul" in out


def test_gradcheck_unknown_name():
    assert run("gradcheck", "--only", "nope") == 2


def test_config_helpers():
    assert cli.parse_kv_text("# c\n\na = 1\nb=x=y\n") == {"a": "1", "b": "x=y"}
    preset, model_kv, train_kv = cli.resolve_run_config(
        {"preset": "paper", "m": "2", "train.iterations": "4", "lambda_global": "0.1", "train.lambda_local": "0.2"})
    assert preset == "paper" and model_kv == {"m": "2", "lambda_global": "0.1"}
    assert train_kv == {"iterations": "4", "lambda_local": "0.2"}
    with pytest.raises(T.ConfigError):
        cli.resolve_run_config({"model.iterations": "3"})

import numpy as np
import pytest

from jlml import synth as S
from jlml.synth import SynthConfig, generate, split
from jlml.tensor import ConfigError

SMALL = SynthConfig(n_id=6, cameras=3, images_per_id_per_cam=2, image_size=(32, 16), seed=3)


def test_generate_is_deterministic():
    a, b = generate(SMALL), generate(SMALL)
    assert a.images.tobytes() == b.images.tobytes()
    assert generate(SMALL.replace(seed=4)).images.tobytes() != a.images.tobytes()


def test_shapes_and_labels():
    ds = generate(SMALL)
    assert ds.images.shape == (36, 3, 32, 16) and ds.images.dtype == np.float32
    assert set(ds.ids) == set(range(1, 7)) and set(ds.cameras) == {1, 2, 3}
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_zero_local_cue_leaves_only_palette():
    ds = generate(SMALL.replace(local_cue_strength=0.0, noise_sigma=0.0))
    body = ds.images[:, :, :, 4:12]
    # each channel is constant over the body region
    assert np.ptp(body, axis=(2, 3)).max() < 1e-6


def test_zero_global_cue_removes_palette():
    ds = generate(SMALL.replace(global_cue_strength=0.0, local_cue_strength=0.0, noise_sigma=0.0))
    same_cam = ds.images[ds.cameras == 1]
    assert np.ptp(same_cam, axis=0).max() < 1e-6


def test_occlusion_every_image_bounded():
    cfg = SMALL.replace(occlusion_prob=1.0, occlusion_max_frac=0.5)
    ds = generate(cfg)
    h, w = cfg.image_size
    assert all(box is not None for box in ds.occluders)
    for _, _, oh, ow in ds.occluders:
        assert oh * ow <= 0.5 * h * w


def test_misalignment_bounded():
    ds = generate(SMALL.replace(misalign_max_shift=3))
    assert np.abs(ds.shifts).max() <= 3 and np.abs(ds.shifts).max() > 0


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(occlusion_prob=1.5)
    with pytest.raises(ConfigError):
        SynthConfig(image_size=(32, 32), misalign_max_shift=8)
    with pytest.raises(ConfigError):
        SynthConfig(n_id=0)


def test_config_kv_roundtrip():
    cfg = SMALL.replace(occlusion_prob=0.25, misalign_max_shift=2)
    assert SynthConfig.from_kv(cfg.to_kv()) == cfg
    with pytest.raises(ConfigError):
        SynthConfig.from_kv({"colour": "red"})


def test_split_is_identity_disjoint_and_deterministic():
    ds = generate(SMALL)
    tr, pr, ga = split(ds, 0.5, seed=1)
    assert not set(tr.ids) & set(pr.ids) and set(pr.ids) == set(ga.ids)
    assert len(set(tr.ids)) == 3 and len(tr) + len(pr) + len(ga) == len(ds)
    for pid in set(pr.ids):
        assert not set(pr.cameras[pr.ids == pid]) & set(ga.cameras[ga.ids == pid])
    again = split(ds, 0.5, seed=1)
    assert all((x.ids == y.ids).all() and (x.cameras == y.cameras).all() for x, y in zip((tr, pr, ga), again))
    assert set(tr.splits) == {"train"} and set(pr.splits) == {"test-probe"}


def test_split_trial_offsets_seed():
    ds = generate(SMALL)
    a = split(ds, 0.5, seed=1, trial=2)
    b = split(ds, 0.5, seed=3)
    assert (a[0].ids == b[0].ids).all()


def test_split_paper_population():
    ds = S.IdentityDataset(np.zeros((1264, 1, 1, 1), np.float32), np.repeat(np.arange(1, 633), 2),
                           np.tile([1, 2], 632), np.full(1264, "", dtype=object))
    tr, pr, ga = split(ds, 0.5, seed=0)
    assert len(set(tr.ids)) == 316 and len(set(pr.ids)) == 316


def test_split_errors():
    ds = generate(SMALL)
    with pytest.raises(ConfigError):
        split(ds, 1.0, seed=0)
    with pytest.raises(ConfigError):
        split(generate(SMALL.replace(cameras=1)), 0.5, seed=0)


def test_linear_probe_separates_identities():
    cfg = SynthConfig(n_id=20, cameras=2, images_per_id_per_cam=4, noise_sigma=0.0, seed=0)
    ds = generate(cfg)
    # mean colour of each of a 4x4 grid of cells
    n, c, h, w = ds.images.shape
    feats = ds.images.reshape(n, c, 4, h // 4, 4, w // 4).mean(axis=(3, 5)).reshape(n, -1)
    X = np.hstack([feats, np.ones((n, 1))])
    Y = np.eye(cfg.n_id)[ds.ids - 1]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    acc = ((X @ W).argmax(1) == ds.ids - 1).mean()
    assert acc > 0.8


def test_dataset_directory_roundtrip(tmp_path):
    ds = generate(SMALL)
    tr, pr, ga = split(ds, 0.5, seed=0)
    for fmt in ("jlmi", "ppm"):
        out = tmp_path / fmt
        S.write_dataset(ds, out, fmt)
        back = S.read_dataset(out)
        assert (back.ids == ds.ids).all() and (back.cameras == ds.cameras).all()
        tol = 0 if fmt == "jlmi" else 0.5 / 255 + 1e-7
        assert np.abs(back.images - ds.images).max() <= tol
        assert back.config == SMALL
    header = (tmp_path / "jlmi" / "manifest.csv").read_text().splitlines()[0]
    assert header == "index,id,camera,split,path"


def test_dataset_directory_byte_identical(tmp_path):
    for name in ("a", "b"):
        S.write_dataset(generate(SMALL), tmp_path / name)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_image_readers_reject_garbage(tmp_path):
    (tmp_path / "x.jlmi").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        S.read_jlmi(tmp_path / "x.jlmi")
    img = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
    S.write_jlmi(tmp_path / "y.jlmi", img)
    (tmp_path / "z.jlmi").write_bytes((tmp_path / "y.jlmi").read_bytes()[:-4])
    with pytest.raises(ValueError):
        S.read_jlmi(tmp_path / "z.jlmi")
    np.testing.assert_array_equal(S.read_jlmi(tmp_path / "y.jlmi"), img)

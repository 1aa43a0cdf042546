import csv
import hashlib
import struct

import numpy as np
import pytest

from dsd.data import (
    MAGIC,
    DatasetSplit,
    HiddenLabels,
    SyntheticConfig,
    export_manifest,
    generate,
    load,
    save,
)
from dsd.encoder import EncoderConfig, encode_arrays, init_params
from dsd.numerics import normalize_rows

ZERO_SHIFT = dict(color_gain_shift=0.0, color_bias_shift=0.0, noise_std=0.0, jitter=0)


def digest(split: DatasetSplit) -> str:
    h = hashlib.sha256()
    for a in (split.source_x, split.source_y, split.target_x, split.target_labels.reveal()):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def assert_same(a: DatasetSplit, b: DatasetSplit):
    assert a.source_x.tobytes() == b.source_x.tobytes()
    assert a.target_x.tobytes() == b.target_x.tobytes()
    assert np.array_equal(a.source_y, b.source_y)
    assert np.array_equal(a.target_labels.reveal(), b.target_labels.reveal())
    assert a.n_known == b.n_known and a.config == b.config


@pytest.fixture(scope="module")
def default_split():
    return generate(SyntheticConfig())


def test_counts(default_split):
    s = default_split
    assert (s.n_source, s.n_target) == (200, 350)
    assert s.source_x.shape == (200, 3, 16, 16)
    assert np.bincount(s.source_y).tolist() == [50] * 4
    assert np.bincount(s.target_labels.reveal()).tolist() == [50] * 7


def test_known_unknown_disjoint(default_split):
    s = default_split
    assert set(s.source_y.tolist()) == {0, 1, 2, 3}
    assert set(s.target_labels.reveal().tolist()) - set(s.source_y.tolist()) == {4, 5, 6}


@pytest.mark.parametrize("mode", ["novel", "hybrid", "random"])
def test_templates_distinct(mode):
    s = generate(SyntheticConfig(unknown_templates=mode, per_class=1))
    t = [tuple(x) for x in s.config["class_templates"]]
    assert len(set(t)) == len(t) == 7


def test_same_seed_bitwise():
    cfg = SyntheticConfig(per_class=5, seed=3)
    assert_same(generate(cfg), generate(cfg))
    assert digest(generate(cfg)) != digest(generate(SyntheticConfig(per_class=5, seed=4)))


def test_zero_shift_copies_known_classes():
    s = generate(SyntheticConfig(per_class=10, **ZERO_SHIFT))
    y = s.target_labels.reveal()
    assert np.array_equal(s.target_x[y < 4], s.source_x)

    enc = EncoderConfig()
    p = init_params(enc, np.random.default_rng(0))
    fs, _ = encode_arrays(s.source_x, enc, p)
    ft, _ = encode_arrays(s.target_x[y < 4], enc, p)
    for k in range(4):
        gap = np.linalg.norm(fs[s.source_y == k].mean(axis=0) - ft[s.source_y == k].mean(axis=0))
        assert gap < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_shift_noise_moves_prototypes_apart(seed):
    enc = EncoderConfig()
    p = init_params(enc, np.random.default_rng(0))
    dists = []
    for noise in (0.05, 0.2, 0.5):
        s = generate(SyntheticConfig(seed=seed, noise_std=noise))
        y = s.target_labels.reveal()
        fs, _ = encode_arrays(s.source_x, enc, p)
        ft, _ = encode_arrays(s.target_x, enc, p)
        row = []
        for k in range(4):
            cs = normalize_rows(fs[s.source_y == k].mean(axis=0, keepdims=True))[0]
            ct = normalize_rows(ft[y == k].mean(axis=0, keepdims=True))[0]
            row.append(1.0 - cs @ ct)
        dists.append(row)
    assert np.all(np.diff(np.array(dists), axis=0) > 0)


def test_config_errors():
    with pytest.raises(ValueError, match="divisible"):
        SyntheticConfig(image_size=10)
    with pytest.raises(ValueError, match="noise_std"):
        SyntheticConfig(noise_std=float("nan"))
    with pytest.raises(ValueError, match="unknown_templates"):
        SyntheticConfig(unknown_templates="other")
    with pytest.raises(ValueError, match="collide"):
        generate(SyntheticConfig(n_known=1, n_unknown=1, templates=(("hbar0", "vbar0"), ("vbar0", "hbar0"))))
    with pytest.raises(ValueError, match="primitive"):
        generate(SyntheticConfig(n_known=1, n_unknown=1, templates=(("hbar0",), ("nope",))))
    with pytest.raises(ValueError, match="primitives"):
        generate(SyntheticConfig(n_known=10, n_unknown=10))


def test_roundtrip_generated(tmp_path, default_split):
    path = save(default_split, tmp_path / "d.bin")
    back = load(path)
    assert_same(default_split, back)
    assert digest(back) == digest(default_split)


def test_roundtrip_empty_target(tmp_path):
    s = DatasetSplit(np.ones((2, 1, 4, 4)), np.array([0, 1]), np.zeros((0, 1, 4, 4)), HiddenLabels([]), 2)
    back = load(save(s, tmp_path / "d.bin"))
    assert_same(s, back)
    assert back.target_x.shape == (0, 1, 4, 4)


def test_roundtrip_single_sample(tmp_path):
    x = np.random.default_rng(1).normal(size=(1, 2, 4, 4))
    x[0, 0, 0, 0] = -0.0
    s = DatasetSplit(np.zeros((0, 2, 4, 4)), np.zeros(0, np.int64), x, HiddenLabels([5]), 3, {"note": "x"})
    back = load(save(s, tmp_path / "d.bin"))
    assert_same(s, back)
    assert np.signbit(back.target_x[0, 0, 0, 0])


def test_load_errors(tmp_path, default_split):
    path = save(DatasetSplit(np.ones((1, 1, 4, 4)), np.array([0]), np.ones((1, 1, 4, 4)), HiddenLabels([1]), 1), tmp_path / "d.bin")
    raw = path.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTDSD\x00\x00" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        load(bad)
    bad.write_bytes(MAGIC + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(ValueError, match="version"):
        load(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        load(bad)
    bad.write_bytes(raw + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        load(bad)


def test_manifest(tmp_path):
    s = generate(SyntheticConfig(per_class=2))
    rows = list(csv.reader(export_manifest(s, tmp_path / "m.csv").open()))
    assert rows[0] == ["index", "domain", "visible_label"]
    assert len(rows) == 1 + 8 + 14
    assert rows[1] == ["0", "source", "0"]
    assert rows[9] == ["8", "target", ""]
    assert all(r[2] == "" for r in rows[9:])


def test_hidden_labels_repr_hides_values():
    assert repr(HiddenLabels([4, 5])) == "HiddenLabels(n=2)"

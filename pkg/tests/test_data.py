import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uasa.data import (
    InvalidConfig,
    ParseError,
    RecyclingStream,
    SynthConfig,
    generate_synthetic_ccod,
    geometric_profile,
    load_features,
    minibatch_iterator,
    read_binary,
    read_checkpoint,
    read_csv,
    save_features,
    write_binary,
    write_checkpoint,
    write_csv,
)


def test_geometric_profile_examples():
    np.testing.assert_array_equal(geometric_profile(100, 4, 3), [100, 50, 25])
    np.testing.assert_array_equal(geometric_profile(100, 1, 4), [100] * 4)


def test_profile_undefined_for_single_class():
    with pytest.raises(InvalidConfig):
        geometric_profile(100, 4, 1)
    with pytest.raises(InvalidConfig):
        generate_synthetic_ccod(SynthConfig(n_id_classes=1, mu=4))


@pytest.mark.parametrize("kw", [dict(mu=0.5), dict(n_max=0), dict(raw_dim=1), dict(n_target=0),
                                dict(n_max=10, mu=100)])
def test_invalid_synth_config(kw):
    with pytest.raises(InvalidConfig):
        SynthConfig(**kw).validate()


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(20, 400), st.floats(1.0, 20.0))
def test_profile_ratio_matches_mu(k, n_max, mu):
    sizes = geometric_profile(n_max, mu, k)
    assert sizes[0] == n_max
    assert np.all(np.diff(sizes) <= 0)
    n_min_exact = n_max / mu
    assert abs(sizes[-1] - n_min_exact) <= 0.5 + 1e-9


def test_generated_sets_match_config():
    cfg = SynthConfig(n_id_classes=3, n_ood_classes=2, n_max=100, mu=4, n_target=500, raw_dim=6)
    source, target = generate_synthetic_ccod(cfg)
    np.testing.assert_array_equal(source.class_counts(), [100, 50, 25])
    assert source.features.dtype == np.float32 and source.dim == 6
    assert len(target) == 500
    assert set(np.unique(target.labels)) <= set(range(5))
    # OOD ground-truth classes never appear in the source set
    assert not set(np.unique(target.labels[target.labels >= 3])) & set(source.labels.tolist())


def test_generator_is_seeded():
    a = generate_synthetic_ccod(SynthConfig(seed=3, n_target=200))
    b = generate_synthetic_ccod(SynthConfig(seed=3, n_target=200))
    c = generate_synthetic_ccod(SynthConfig(seed=4, n_target=200))
    assert a[0].features.tobytes() == b[0].features.tobytes()
    assert a[1].features.tobytes() == b[1].features.tobytes()
    assert a[1].features.tobytes() != c[1].features.tobytes()


def test_zero_shift_gives_same_class_distributions():
    cfg = SynthConfig(n_id_classes=2, n_ood_classes=0, n_max=4000, mu=1, n_target=8000,
                      rotation_deg=0, translation=0, noise_sigma=0)
    source, target = generate_synthetic_ccod(cfg)
    for c in range(2):
        xs = source.features[source.labels == c]
        xt = target.features[target.labels == c]
        np.testing.assert_allclose(xs.mean(0), xt.mean(0), atol=0.1)
        np.testing.assert_allclose(xs.std(0), xt.std(0), atol=0.1)


def test_csv_single_labeled_row(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("label,f0,f1\n1,0.5,0.5\n")
    ds = load_features(path, role="source", n_id_classes=2)
    assert len(ds) == 1 and ds.labels[0] == 1
    np.testing.assert_array_equal(ds.features, [[0.5, 0.5]])


def test_binary_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    write_binary(path, np.zeros((0, 4)))
    feats, labels = read_binary(path)
    assert feats.shape == (0, 4) and len(labels) == 0
    assert len(load_features(path)) == 0


@pytest.mark.parametrize("fmt", ["csv", "bin"])
def test_round_trip_bit_identical(tmp_path, fmt):
    source, target = generate_synthetic_ccod(SynthConfig(n_target=300, seed=7))
    for name, ds in (("s", source), ("t", target)):
        path = tmp_path / f"{name}.{fmt}"
        save_features(path, ds.features, ds.labels)
        feats, labels = (read_csv if fmt == "csv" else read_binary)(path)
        assert feats.tobytes() == ds.features.tobytes()
        np.testing.assert_array_equal(labels, ds.labels)


def test_unlabeled_rows_default_to_minus_one(tmp_path):
    write_csv(tmp_path / "u.csv", np.ones((3, 2)))
    _, labels = read_csv(tmp_path / "u.csv")
    np.testing.assert_array_equal(labels, [-1, -1, -1])
    with pytest.raises(ParseError, match="row 1, column 0"):
        load_features(tmp_path / "u.csv", role="source")


@pytest.mark.parametrize("body, where", [
    ("label,f0,f1\n0,0.5,abc\n", "row 1, column 2"),
    ("label,f0,f1\n0,0.5,0.1\n1,nan,0.2\n", "row 2, column 1"),
    ("label,f0,f1\nx,0.5,0.1\n", "row 1, column 0"),
])
def test_csv_parse_errors_name_row_and_column(tmp_path, body, where):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(ParseError, match=where):
        read_csv(path)


def test_csv_dimension_mismatch(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,f0,f1\n0,0.5\n")
    with pytest.raises(ParseError, match="row 1"):
        read_csv(path)
    path.write_text("label,f0,f1\n0,0.5,0.5\n")
    with pytest.raises(ParseError, match="dimension"):
        load_features(path, expect_dim=3)


def test_binary_bad_magic_and_nonfinite(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(struct.pack("<4sIQIB", b"NOPE", 1, 0, 2, 0))
    with pytest.raises(ParseError, match="magic"):
        read_binary(path)
    write_binary(path, np.array([[1.0, 2.0], [3.0, np.inf]]))
    with pytest.raises(ParseError, match="row 2, column 2"):
        read_binary(path)


def test_binary_layout(tmp_path):
    path = tmp_path / "x.bin"
    write_binary(path, np.array([[1.0, 2.0]]), np.array([3]))
    raw = path.read_bytes()
    assert raw[:4] == b"CCOD"
    assert struct.unpack_from("<IQIB", raw, 4) == (1, 1, 2, 1)
    body = raw[struct.calcsize("<4sIQIB"):]
    assert struct.unpack("<2fi", body) == (1.0, 2.0, 3)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float64).reshape(2, 3) / 7,
               "b": np.array([1, -2], dtype=np.int32),
               "c": np.float32([0.25])}
    write_checkpoint(tmp_path / "m.ckpt", tensors, {"k": [1, 2]})
    out, meta = read_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"k": [1, 2]}
    for k, v in tensors.items():
        assert out[k].dtype == v.dtype and out[k].tobytes() == v.tobytes()
    assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"CKPT"


def test_minibatch_examples():
    batches = minibatch_iterator(4, 2, seed=0, epoch=0)
    assert [len(b) for b in batches] == [2, 2]
    assert sorted(np.concatenate(batches)) == [0, 1, 2, 3]
    assert [len(b) for b in minibatch_iterator(5, 2, 0, 0)] == [2, 2, 1]
    a = minibatch_iterator(50, 8, 3, 2)
    b = minibatch_iterator(50, 8, 3, 2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = minibatch_iterator(50, 8, 3, 3)
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


@given(st.integers(1, 200), st.integers(1, 64), st.integers(0, 10**6), st.integers(0, 100))
def test_iterator_covers_each_index_once(n, batch, seed, epoch):
    batches = minibatch_iterator(n, batch, seed, epoch)
    np.testing.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(n))
    assert all(len(b) == batch for b in batches[:-1])


def test_recycling_stream_reshuffles_each_cycle():
    stream = RecyclingStream(5, 2, seed=1)
    seen = [stream.next() for _ in range(6)]
    assert stream.cycle == 2
    np.testing.assert_array_equal(np.sort(np.concatenate(seen[:3])), np.arange(5))
    np.testing.assert_array_equal(np.sort(np.concatenate(seen[3:])), np.arange(5))

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from uasa.atg import OOD
from uasa.plotting import LOSS_SERIES, export_plots, pca_2d, plot_feature_scatter

SVG = "{http://www.w3.org/2000/svg}"


def one_epoch_log():
    return [{"epoch": 1, "loss_lpb": 0.5, "loss_pda": 0.1, "loss_atg": -0.2, "loss_uc": 0.05,
             "loss_total": 0.4, "os_star": 0.6, "unk": 0.4, "hos": 0.48}]


def _series_points(path, gid):
    root = ET.parse(path).getroot()
    for g in root.iter(f"{SVG}g"):
        if g.get("id") == gid:
            return g
    raise AssertionError(f"series {gid} not found in {path}")


def test_one_epoch_log_exports(tmp_path):
    paths = export_plots(one_epoch_log(), tmp_path)
    assert [p.split("/")[-1] for p in paths] == ["losses.svg", "scores.svg"]
    for key in LOSS_SERIES:
        group = _series_points(paths[0], key)
        # one marker per data point
        assert len(list(group.iter(f"{SVG}use"))) == 1


def test_scatter_counts_every_point(tmp_path):
    rng = np.random.default_rng(0)
    fs, ft = rng.normal(size=(7, 4)), rng.normal(size=(11, 4))
    labels = np.array([0, 1, OOD, 2, OOD, 0, 1, 1, OOD, 2, 0])
    path, n = plot_feature_scatter(fs, ft, labels, tmp_path / "f.svg")
    assert n == 18
    drawn = sum(len(list(_series_points(path, gid).iter(f"{SVG}use")))
                for gid in ("source", "target-id", "target-ood"))
    assert drawn == 18


def test_pca_identical_features_collapse():
    out = pca_2d(np.tile([1.0, 2.0, 3.0], (5, 1)))
    np.testing.assert_array_equal(out, np.zeros((5, 2)))


def test_pca_matches_svd_projection():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 5)) * [5, 3, 1, 0.5, 0.1]
    out = pca_2d(X)
    c = X - X.mean(0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    ref = c @ vt[:2].T
    np.testing.assert_allclose(np.abs(out), np.abs(ref), atol=1e-9)


def test_exports_are_reproducible(tmp_path):
    a = export_plots(one_epoch_log(), tmp_path / "a")
    b = export_plots(one_epoch_log(), tmp_path / "b")
    for x, y in zip(a, b):
        assert open(x, "rb").read() == open(y, "rb").read()


def test_write_failure_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="losses.svg"):
        from uasa.plotting import plot_losses

        plot_losses(one_epoch_log(), str(blocker / "losses.svg"))


def test_empty_log_rejected(tmp_path):
    with pytest.raises(ValueError):
        export_plots([], tmp_path)

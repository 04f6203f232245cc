import math

import numpy as np
import pytest

from gmmreg.geometry import MotionParams, cartesian_to_polar, polar_arrays_to_cartesian
from gmmreg.scenario import (KINDS, ONED_LAYOUT, ScenarioSpec, add_clusters, add_outliers, derive_seed, generate,
                             positional_sigma)


def _apply(theta, xy):
    tx, ty, phi = theta.as_pose()
    c, s = math.cos(phi), math.sin(phi)
    return xy @ np.array([[c, -s], [s, c]]).T + np.array([tx, ty])


@pytest.mark.parametrize("kind", KINDS)
def test_generation_is_deterministic(kind):
    a = generate(ScenarioSpec.defaults(kind, seed=17))
    b = generate(ScenarioSpec.defaults(kind, seed=17))
    c = generate(ScenarioSpec.defaults(kind, seed=18))
    np.testing.assert_array_equal(a.F.mu, b.F.mu)
    np.testing.assert_array_equal(a.M.cov, b.M.cov)
    assert a.correspondence == b.correspondence and a.outliers_curr == b.outliers_curr
    if kind != "oned_basic":
        assert not np.array_equal(a.F.mu, c.F.mu)


def test_derive_seed_distinct():
    seeds = {derive_seed(0, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(5, "a") == derive_seed(5, "a") != derive_seed(5, "b")


@pytest.mark.parametrize("kind", ["overlapped2d", "outlier2d", "clustered2d", "combined2d"])
def test_truth_maps_current_onto_previous(kind):
    inst = generate(ScenarioSpec.defaults(kind, seed=3))
    for i, j in inst.correspondence:
        np.testing.assert_allclose(_apply(inst.theta_g, inst.M_true[j:j + 1]), inst.F_true[i:i + 1], atol=1e-12)


def test_oned_layout():
    inst = generate(ScenarioSpec.defaults("oned_basic"))
    np.testing.assert_allclose(inst.F.mu[:, 0], [ONED_LAYOUT["A"], ONED_LAYOUT["B"], ONED_LAYOUT["C"]])
    np.testing.assert_allclose(inst.M.mu[:, 0] + 2.0, inst.F.mu[:, 0])
    assert inst.F_polar is None and inst.M.dim == 1


def test_outliers_have_no_correspondence():
    inst = generate(ScenarioSpec.defaults("combined2d", seed=9))
    used_F = {i for i, _ in inst.correspondence}
    used_M = {j for _, j in inst.correspondence}
    assert len(inst.outliers_prev) == 2 and len(inst.outliers_curr) == 2
    assert used_F.isdisjoint(inst.outliers_prev) and used_M.isdisjoint(inst.outliers_curr)
    assert len(used_F) + len(inst.outliers_prev) == len(inst.F)
    assert len(used_M) + len(inst.outliers_curr) == len(inst.M)


def test_zero_additions_leave_instance_unchanged():
    inst = generate(ScenarioSpec.defaults("overlapped2d", seed=4))
    assert add_clusters(inst, 0, "tight", 1) is inst
    same = add_outliers(inst, 0, 0, 1)
    np.testing.assert_array_equal(same.F.mu, inst.F.mu)
    np.testing.assert_array_equal(same.M.mu, inst.M.mu)
    assert same.correspondence == inst.correspondence


def test_far_outliers_are_outside_inflated_box():
    inst = generate(ScenarioSpec.defaults("overlapped2d", seed=4))
    out = add_outliers(inst, 3, 3, 8, placement="far")
    lo, hi = inst.F_true.min(axis=0), inst.F_true.max(axis=0)
    c, h = 0.5 * (lo + hi), 0.75 * (hi - lo)
    for k in out.outliers_prev:
        assert np.any(np.abs(out.F_true[k] - c) > h)


def test_invalid_arguments():
    inst = generate(ScenarioSpec.defaults("overlapped2d"))
    with pytest.raises(ValueError):
        add_outliers(inst, -1, 0, 0)
    with pytest.raises(ValueError):
        add_outliers(inst, 1, 0, 0, placement="nowhere")
    with pytest.raises(ValueError):
        add_clusters(inst, 2, "medium", 0)
    with pytest.raises(ValueError):
        ScenarioSpec(kind="threed")


def test_default_counts():
    assert ScenarioSpec.defaults("oned_basic").theta_g.as_pose()[0] == 2.0
    for kind, (op, oc, cl) in {"overlapped2d": (0, 0, 0), "outlier2d": (2, 2, 0), "clustered2d": (0, 0, 6),
                               "combined2d": (2, 2, 6)}.items():
        s = ScenarioSpec.defaults(kind)
        assert (s.n_outliers_prev, s.n_outliers_curr, s.n_cluster_points) == (op, oc, cl)
        inst = generate(s)
        assert len(inst.correspondence) == 8 + cl
        assert len(inst.F) == 8 + cl + op and len(inst.M) == 8 + cl + oc


@pytest.mark.parametrize("spread,lo,hi", [("tight", 0.0, 0.5), ("loose", 2.0, 4.0)])
def test_cluster_offsets(spread, lo, hi):
    inst = generate(ScenarioSpec.defaults("overlapped2d", seed=2))
    out = add_clusters(inst, 30, spread, 5)
    parents = inst.F_true
    sig = positional_sigma(inst.spec, parents)
    for k in range(8, 38):
        d = np.linalg.norm(parents - out.F_true[k], axis=1) / sig
        assert np.any((d >= lo - 1e-9) & (d <= hi + 1e-9))


def test_polar_noise_statistics():
    spec = ScenarioSpec.defaults("overlapped2d")
    dr, dphi = [], []
    for s in range(10_000):
        inst = generate(ScenarioSpec.defaults("overlapped2d", seed=s))
        r, phi = cartesian_to_polar(inst.F_true)
        dr.append(inst.F_polar[:, 0] - r)
        dphi.append(np.angle(np.exp(1j * (inst.F_polar[:, 1] - phi))))
    dr, dphi = np.concatenate(dr), np.concatenate(dphi)
    assert abs(dr.std() / spec.sigma_r - 1) < 0.02
    assert abs(dphi.std() / spec.sigma_phi - 1) < 0.02


def test_covariance_metadata_matches_polar_rows():
    inst = generate(ScenarioSpec.defaults("combined2d", seed=21))
    for ps, polar in ((inst.F, inst.F_polar), (inst.M, inst.M_polar)):
        mu, cov = polar_arrays_to_cartesian(polar[:, 0], polar[:, 1], polar[:, 2], polar[:, 3])
        np.testing.assert_allclose(ps.mu, mu, atol=1e-12)
        np.testing.assert_allclose(ps.cov, cov, atol=1e-12)


def test_custom_truth_is_used():
    th = MotionParams.pose(-1.0, 2.0, 0.3)
    inst = generate(ScenarioSpec.defaults("overlapped2d", theta_g=th))
    np.testing.assert_allclose(_apply(th, inst.M_true), inst.F_true, atol=1e-12)

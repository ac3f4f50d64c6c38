import numpy as np
import pytest

from panosplat import gaussian_core as gc
from panosplat import gaussian_opt as go
from panosplat.nn_kernels import pipeline_weights
from panosplat.pano_geometry import ErpGrid


def make_set(n=12, k=4, f=8, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    cat = rng.uniform(0.1, 1.0, size=(n, k))
    cat /= cat.sum(axis=1, keepdims=True)
    gs = gc.GaussianSet(
        centers=rng.normal(scale=spread, size=(n, 3)),
        radii=rng.uniform(0.05, 0.4, size=(n, 3)),
        euler=rng.uniform(-np.pi, np.pi, size=(n, 3)),
        opacity=rng.uniform(0.1, 0.9, size=n),
        category=cat,
        features=rng.normal(size=(n, f)),
        grid=ErpGrid(16, 32),
        stride=4,
        r_max=0.5,
    )
    gs.validate()
    return gs


def make_weights(init="zero", seed=0):
    return pipeline_weights(
        feature_dim=8, num_categories=4, num_submodules=2, init=init, seed=seed
    )


def test_voxelize_shared_voxel_averages_features():
    gs = make_set(n=2)
    gs.centers[0] = [0.01, 0.01, 0.01]
    gs.centers[1] = [0.04, 0.04, 0.04]  # same 0.05 voxel
    vm = go.voxelize_gaussians(gs, voxel_size=0.05)
    assert len(vm.grid) == 1
    np.testing.assert_allclose(
        vm.grid.features[0], (gs.features[0] + gs.features[1]) / 2, atol=1e-12
    )
    assert list(vm.gaussian_to_voxel) == [0, 0]


def test_voxelize_negative_coords_floor():
    gs = make_set(n=2)
    gs.centers[0] = [-0.01, 0.0, 0.0]  # floors to ix=-1
    gs.centers[1] = [0.01, 0.0, 0.0]
    vm = go.voxelize_gaussians(gs, voxel_size=0.05)
    assert len(vm.grid) == 2
    ix = vm.grid.coords[:, 0]
    assert set(ix.tolist()) == {-1, 0}


def test_voxelize_members_partition():
    gs = make_set(n=40, seed=3, spread=0.12)
    vm = go.voxelize_gaussians(gs, voxel_size=0.05)
    members = vm.members()
    assert len(members) == len(vm.grid)
    got = np.sort(np.concatenate(members))
    np.testing.assert_array_equal(got, np.arange(40))
    for v, idx in enumerate(members):
        assert np.all(vm.gaussian_to_voxel[idx] == v)


def test_voxelize_coords_match_floor():
    gs = make_set(n=30, seed=4)
    vm = go.voxelize_gaussians(gs, voxel_size=0.05)
    expect = np.floor(gs.centers / 0.05).astype(np.int64)
    np.testing.assert_array_equal(vm.grid.coords[vm.gaussian_to_voxel], expect)


def test_voxelize_rejects_empty():
    gs = make_set().select(np.zeros(12, dtype=bool))
    with pytest.raises(ValueError):
        go.voxelize_gaussians(gs, voxel_size=0.05)


def test_refine_category_uniform_fixed_point():
    old = np.full((6, 4), 0.25)
    new = go.refine_category(np.zeros((6, 4)), old)
    assert np.max(np.abs(new - 0.25)) < 1e-12


def test_refine_category_blends_half():
    old = np.zeros((1, 4))
    old[0, 0] = 1.0
    logits = np.zeros((1, 4))
    new = go.refine_category(logits, old)
    np.testing.assert_allclose(new[0], [0.625, 0.125, 0.125, 0.125], atol=1e-12)
    assert abs(new.sum() - 1.0) < 1e-12


def test_refine_category_keeps_onehot_mass():
    rng = np.random.default_rng(5)
    old = np.zeros((8, 4))
    old[np.arange(8), rng.integers(0, 4, 8)] = 1.0
    new = go.refine_category(rng.normal(size=(8, 4)), old)
    assert np.all(new[old == 1.0] >= 0.5)


def test_center_refine_zero_weights_is_identity():
    gs = make_set()
    out = go.center_refine(gs, make_weights(), 0.2, prefix="opt0")
    np.testing.assert_array_equal(out.centers, gs.centers)


def test_center_refine_step_bound():
    gs = make_set(seed=7)
    out = go.center_refine(gs, make_weights(init="random", seed=2), 0.2, prefix="opt0")
    step = np.abs(out.centers - gs.centers)
    assert np.all(step < 0.1)  # strict: sigmoid never reaches 0 or 1
    assert np.any(step > 0)


def test_wrap_angle():
    np.testing.assert_allclose(go.wrap_angle(np.pi), -np.pi, atol=1e-15)
    np.testing.assert_allclose(go.wrap_angle(-np.pi), -np.pi, atol=1e-15)
    np.testing.assert_allclose(go.wrap_angle(3 * np.pi / 2), -np.pi / 2, atol=1e-12)
    np.testing.assert_allclose(go.wrap_angle(0.3), 0.3, atol=1e-15)


def test_covariance_refine_zero_weights_halves_radii():
    gs = make_set(seed=8)
    out = go.covariance_refine(gs, make_weights(), 0.4, np.pi / 4, prefix="opt0")
    # sc = 0 so new radii = (r + 0)/2 exactly; same halving for euler
    np.testing.assert_array_equal(out.radii, gs.radii / 2)
    np.testing.assert_array_equal(out.euler, go.wrap_angle(gs.euler / 2))


def test_covariance_refine_bounds():
    gs = make_set(seed=9)
    out = go.covariance_refine(
        gs, make_weights(init="random", seed=3), 0.4, np.pi / 4, prefix="opt0"
    )
    assert np.all(out.radii >= gc.RADII_FLOOR)
    assert np.all(out.radii <= out.r_max)
    assert np.all(out.euler >= -np.pi) and np.all(out.euler < np.pi)


def test_covariance_refine_clamps_floor():
    gs = make_set(seed=10)
    gs.radii[:] = 2e-4  # halving alone would drop below the 1e-4 floor
    out = go.covariance_refine(gs, make_weights(), 0.4, np.pi / 4, prefix="opt0")
    np.testing.assert_array_equal(out.radii, np.full_like(out.radii, gc.RADII_FLOOR))


def test_semantic_refine_zero_weights():
    gs = make_set(seed=11)
    out = go.semantic_refine(gs, make_weights(), 0.05, prefix="opt0")
    # zero conv weights zero the features; zero head logits blend uniform
    # into the category distribution
    np.testing.assert_array_equal(out.features, 0.0)
    np.testing.assert_allclose(out.category, (0.25 + gs.category) / 2, atol=1e-12)


def test_semantic_refine_shares_voxel_output():
    gs = make_set(n=2, seed=12)
    gs.centers[0] = [0.01, 0.01, 0.01]
    gs.centers[1] = [0.03, 0.03, 0.03]
    gs.category[0] = [1.0, 0.0, 0.0, 0.0]
    gs.category[1] = [0.0, 1.0, 0.0, 0.0]
    out = go.semantic_refine(gs, make_weights(init="random", seed=4), 0.05, prefix="opt0")
    # both gaussians share one voxel so they receive the same feature row and
    # the same softmax blend partner
    np.testing.assert_array_equal(out.features[0], out.features[1])
    diff = out.category[0] - out.category[1]
    np.testing.assert_allclose(diff, [0.5, -0.5, 0.0, 0.0], atol=1e-12)


def test_optimize_runs_both_submodules():
    gs = make_set(seed=13)
    out = go.optimize(gs, make_weights(), go.OptimizeParams())
    # two zero-weight covariance refinements quarter the radii
    np.testing.assert_array_equal(out.radii, gs.radii / 4)
    out.validate()


def test_optimize_random_weights_stays_valid():
    gs = make_set(n=25, seed=14)
    out = go.optimize(gs, make_weights(init="random", seed=5), go.OptimizeParams())
    out.validate()
    assert len(out) == 25


def test_optimize_preserves_input():
    gs = make_set(seed=15)
    before = gs.radii.copy()
    go.optimize(gs, make_weights(), go.OptimizeParams())
    np.testing.assert_array_equal(gs.radii, before)


def test_params_validation():
    with pytest.raises(ValueError):
        go.OptimizeParams(voxel_size=0.0)
    with pytest.raises(ValueError):
        go.OptimizeParams(num_submodules=0)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atlasctx.atlas import (
    AffineTransform,
    Atlas,
    AtlasConfig,
    AtlasRegistration,
    DegenerateConfigurationError,
    InsufficientLandmarksError,
    apply_affine,
    atlas_coordinate_channels,
    build_atlas,
    direct_atlas_correction,
    invert_affine,
    iterative_refine_fit,
    mapped_atlas_positions,
    weighted_affine_fit,
)
from atlasctx.heatmap import HeatmapSpec, HeatmapStack, gaussian_target
from atlasctx.volume import ABSENT, Landmark, LandmarkSet, Volume3D

from conftest import random_affine


def cloud(rng, n, scale=60.0):
    return rng.uniform(-scale, scale, (n, 3))


def lmset(names, pts, cert=None):
    cert = [1.0] * len(names) if cert is None else cert
    return LandmarkSet(tuple(Landmark(n, tuple(p), c) for n, p, c in zip(names, pts, cert)))


def objective(t, src, dst, w):
    return float(np.sum(w * np.sum((apply_affine(t, src) - dst) ** 2, axis=1)))


# --- weighted_affine_fit ---------------------------------------------------------


def test_identity_fit():
    src = cloud(np.random.default_rng(0), 6)
    t = weighted_affine_fit(src, src)
    assert np.allclose(t.linear, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, 0, atol=1e-10)


def test_scale_and_shift_exact():
    src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], float) * 20
    t = weighted_affine_fit(src, 2 * src + [5, 0, 0])
    assert np.allclose(t.linear, 2 * np.eye(3), atol=1e-9)
    assert np.allclose(t.translation, [5, 0, 0], atol=1e-9)


def test_zero_weight_point_ignored():
    rng = np.random.default_rng(1)
    src, dst = cloud(rng, 6), cloud(rng, 6)
    dst5 = dst.copy()
    dst5[5] += [300, -200, 50]
    w = np.array([1, 2, 0.5, 1, 3, 0.0])
    a = weighted_affine_fit(src, dst5, w)
    b = weighted_affine_fit(src[:5], dst[:5], w[:5])
    assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_noisy_fit_matches_lstsq_oracle():
    rng = np.random.default_rng(2)
    src = cloud(rng, 8)
    dst = apply_affine(AffineTransform(*random_affine(rng)), src) + rng.normal(0, 3, (8, 3))
    w = rng.uniform(0.1, 1.0, 8)
    t = weighted_affine_fit(src, dst, w)
    # oracle: homogeneous weighted least squares through the pseudo-inverse
    h = np.hstack([src, np.ones((8, 1))]) * np.sqrt(w)[:, None]
    m = np.linalg.pinv(h) @ (dst * np.sqrt(w)[:, None])
    oracle = AffineTransform(m[:3].T, m[3])
    f, g = objective(t, src, dst, w), objective(oracle, src, dst, w)
    assert abs(f - g) <= 1e-9 * g
    # local optimality: any small perturbation increases the objective
    for _ in range(20):
        p = AffineTransform(t.linear + rng.normal(0, 1e-4, (3, 3)), t.translation + rng.normal(0, 1e-3, 3))
        assert objective(p, src, dst, w) >= f


def test_fit_errors():
    src = cloud(np.random.default_rng(3), 5)
    with pytest.raises(DegenerateConfigurationError):
        weighted_affine_fit(src[:3], src[:3])
    with pytest.raises(DegenerateConfigurationError):
        weighted_affine_fit(src, src, [1, 1, 1, 0, 0])
    planar = src.copy()
    planar[:, 2] = 0
    with pytest.raises(DegenerateConfigurationError):
        weighted_affine_fit(planar, planar)
    with pytest.raises(ValueError):
        weighted_affine_fit(src, src, [1, 1, 1, 1, -1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 25))
def test_exact_recovery_property(seed, n):
    rng = np.random.default_rng(seed)
    src = cloud(rng, n)
    truth = AffineTransform(*random_affine(rng))
    t = weighted_affine_fit(src, apply_affine(truth, src), rng.uniform(0.1, 1.0, n))
    assert np.max(np.abs(t.matrix() - truth.matrix())) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composition_equivariance(seed):
    rng = np.random.default_rng(seed)
    src, dst = cloud(rng, 9), cloud(rng, 9)
    w = rng.uniform(0.1, 1, 9)
    g = AffineTransform(*random_affine(rng))
    old = weighted_affine_fit(src, dst, w)
    new = weighted_affine_fit(apply_affine(g, src), dst, w)
    assert np.max(np.abs(new.matrix() - old.compose(invert_affine(g)).matrix())) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_weight_scaling_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    src, dst = cloud(rng, 7), cloud(rng, 7)
    w = rng.uniform(0.1, 1, 7)
    a = weighted_affine_fit(src, dst, w)
    b = weighted_affine_fit(src, dst, lam * w)
    assert np.max(np.abs(a.matrix() - b.matrix())) < 1e-10


# --- apply / invert ----------------------------------------------------------------


def test_identity_and_scale_inverse():
    p = cloud(np.random.default_rng(4), 5)
    assert np.array_equal(apply_affine(AffineTransform.identity(), p), p)
    inv = invert_affine(AffineTransform(2 * np.eye(3)))
    assert np.allclose(inv.linear, 0.5 * np.eye(3))


def test_round_trip_random_points():
    rng = np.random.default_rng(5)
    for _ in range(10):
        t = AffineTransform(*random_affine(rng))
        p = cloud(rng, 100, 100)
        assert np.max(np.linalg.norm(apply_affine(invert_affine(t), apply_affine(t, p)) - p, axis=1)) < 1e-9


def test_singular_inverse():
    with pytest.raises(DegenerateConfigurationError):
        invert_affine(AffineTransform(np.diag([1.0, 1.0, 0.0])))


# --- iterative_refine_fit ---------------------------------------------------------------


def _fixture(rng, n):
    names = [f"l{i}" for i in range(n)]
    atlas = Atlas(names, cloud(rng, n))
    truth = AffineTransform(*random_affine(rng))
    det = apply_affine(invert_affine(truth), atlas.positions)  # truth maps detections -> atlas
    return names, atlas, truth, det


def test_no_drops_when_exact():
    names, atlas, truth, det = _fixture(np.random.default_rng(6), 10)
    r = iterative_refine_fit(lmset(names, det), atlas)
    assert r.dropped == [] and r.valid
    assert np.allclose(r.transform.matrix(), truth.matrix(), atol=1e-9)


def test_single_outlier_dropped_first():
    rng = np.random.default_rng(7)
    names, atlas, truth, det = _fixture(rng, 9)
    det[4] += [100.0, 0.0, 0.0]
    r = iterative_refine_fit(lmset(names, det), atlas, AtlasConfig(d_atlas=5))
    assert r.dropped == ["l4"]
    assert np.allclose(r.transform.matrix(), truth.matrix(), atol=1e-8)


def test_four_of_22_outliers():
    rng = np.random.default_rng(8)
    names, atlas, truth, det = _fixture(rng, 22)
    bad = rng.choice(22, 4, replace=False)
    for i in bad:
        d = rng.normal(size=3)
        det[i] += 50 * d / np.linalg.norm(d)
    r = iterative_refine_fit(lmset(names, det), atlas, AtlasConfig(d_atlas=5))
    assert set(r.dropped) == {names[i] for i in bad}
    assert np.max(np.abs(r.transform.matrix() - truth.matrix())) < 1e-6


def test_low_confidence_when_all_scattered():
    rng = np.random.default_rng(9)
    names = [f"l{i}" for i in range(8)]
    atlas = Atlas(names, cloud(rng, 8))
    # four points always admit an exact affine, so use a larger floor
    r = iterative_refine_fit(lmset(names, cloud(rng, 8, 200)), atlas, AtlasConfig(d_atlas=1, min_inliers=5))
    assert r.low_confidence and len(r.inliers) == 5
    assert len(r.dropped) == 3


def test_low_confidence_when_inliers_collinear():
    rng = np.random.default_rng(9)
    names = [f"l{i}" for i in range(6)]
    atlas = Atlas(names, cloud(rng, 6))
    det = np.outer(np.arange(6), [1.0, 2.0, 3.0]) + rng.normal(0, 3e-3, (6, 3))
    r = iterative_refine_fit(lmset(names, det), atlas, AtlasConfig(d_atlas=1e3))
    assert r.low_confidence


def test_low_confidence_when_transform_singular():
    rng = np.random.default_rng(3)
    names = [f"l{i}" for i in range(6)]
    pts = cloud(rng, 6)
    flat = pts.copy()
    flat[:, 2] = 0.0
    # spread detections onto a planar atlas: the fit exists but has no inverse
    r = iterative_refine_fit(lmset(names, pts), Atlas(names, flat), AtlasConfig(d_atlas=1e3))
    assert r.low_confidence and not r.valid
    with pytest.raises(DegenerateConfigurationError):
        mapped_atlas_positions(r, Atlas(names, flat))


def test_insufficient_detections():
    rng = np.random.default_rng(10)
    names, atlas, _, det = _fixture(rng, 6)
    lm = lmset(names, det)
    lm = LandmarkSet(tuple(e if i < 3 else Landmark(e.name, e.position, 1.0, ABSENT) for i, e in enumerate(lm)))
    with pytest.raises(InsufficientLandmarksError):
        iterative_refine_fit(lm, atlas)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 14), st.floats(2.0, 20.0))
def test_refine_invariants(seed, n, d_atlas):
    rng = np.random.default_rng(seed)
    names, atlas, _, det = _fixture(rng, n)
    det = det + rng.normal(0, 4, det.shape)
    det[rng.uniform(size=n) < 0.3] += rng.normal(0, 40, 3)
    r = iterative_refine_fit(lmset(names, det, rng.uniform(0.2, 1, n)), atlas, AtlasConfig(d_atlas=d_atlas))
    assert len(r.dropped) <= n - 4
    assert len(r.inliers) >= 4
    assert set(r.inliers) | set(r.dropped) == set(names)
    if r.valid:
        assert all(r.residuals[k] <= d_atlas for k in r.inliers)


def test_fit_report_text():
    names, atlas, _, det = _fixture(np.random.default_rng(11), 6)
    text = iterative_refine_fit(lmset(names, det), atlas).report()
    assert "inliers: l0 l1" in text and "low_confidence: False" in text


# --- correction -------------------------------------------------------------------------


def _stack_with(data, spacing=2.0, origin=(0.0, 0.0, 0.0), k=1e3, names=None):
    names = names or [f"l{i}" for i in range(len(data))]
    return HeatmapStack(names, np.asarray(data, float), (spacing,) * 3, origin, HeatmapSpec(1, k))


def _identity_setup(n=5, dims=(60, 60, 60)):
    # atlas in the volume frame, identity fit
    rng = np.random.default_rng(12)
    names = [f"l{i}" for i in range(n)]
    pos = rng.uniform(30, 90, (n, 3))
    pos = np.rint(pos / 2) * 2
    atlas = Atlas(names, pos)
    fit = iterative_refine_fit(lmset(names, pos), atlas)
    g = Volume3D(np.broadcast_to(np.float32(0), dims), (2.0,) * 3, (0.0, 0.0, 0.0))
    return names, atlas, fit, g


def test_correction_idempotent_at_max():
    names, atlas, fit, g = _identity_setup()
    stack = gaussian_target(g, atlas.as_landmarks(), HeatmapSpec(1, 1e3))
    out = direct_atlas_correction(atlas.as_landmarks(), stack, atlas, fit)
    for n in names:
        assert out[n].position == tuple(atlas.position(n))
        assert out[n].certainty == 1.0


def test_correction_prefers_peak_inside_roi():
    names, atlas, fit, g = _identity_setup()
    data = np.zeros((len(names),) + g.dims)
    m = atlas.position("l0")
    far = g.nearest_voxel(m + [40, 0, 0])
    near = g.nearest_voxel(m + [10, 0, 0])
    data[0][tuple(far)] = 1000.0
    data[0][tuple(near)] = 400.0
    stack = _stack_with(data)
    det = lmset(names, [g.voxel_to_world(far)] + list(atlas.positions[1:]))
    out = direct_atlas_correction(det, stack, atlas, fit, AtlasConfig(d_volume=28))
    assert out["l0"].position == tuple(g.voxel_to_world(near))
    assert out["l0"].certainty == pytest.approx(0.4)


def test_correction_zero_channel_lowest_index():
    names, atlas, fit, g = _identity_setup()
    stack = _stack_with(np.zeros((len(names),) + g.dims))
    out = direct_atlas_correction(atlas.as_landmarks(), stack, atlas, fit, AtlasConfig(d_volume=5))
    m = atlas.position("l0")
    # F-order lowest index inside a 5mm sphere: smallest z, then y, then x
    cand = [np.array(m) + d for d in np.array(np.meshgrid(*[np.arange(-6, 7, 2)] * 3, indexing="ij")).reshape(3, -1).T]
    cand = [c for c in cand if np.linalg.norm(c - m) <= 5]
    first = min(cand, key=lambda c: (c[2], c[1], c[0]))
    assert out["l0"].position == tuple(first)
    assert out["l0"].certainty == 0.0


def test_correction_outside_is_absent_and_all_outside_raises():
    names, atlas, fit, g = _identity_setup(dims=(40, 40, 40))
    # shift atlas so l0 maps far outside the 80mm cube
    far = Atlas(names, atlas.positions.copy())
    far.positions[0] = [500, 500, 500]
    stack = _stack_with(np.ones((len(names), 40, 40, 40)))
    out = direct_atlas_correction(atlas.as_landmarks(), stack, far, fit)
    assert out["l0"].status == ABSENT
    far.positions[:] = 1000
    with pytest.raises(ValueError):
        direct_atlas_correction(atlas.as_landmarks(), stack, far, fit)


def test_correction_rejects_low_confidence():
    names, atlas, fit, g = _identity_setup()
    fit.low_confidence = True
    with pytest.raises(ValueError):
        direct_atlas_correction(atlas.as_landmarks(), _stack_with(np.zeros((5, 3, 3, 3))), atlas, fit)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(4.0, 30.0))
def test_correction_within_roi_and_maximal(seed, d_volume):
    rng = np.random.default_rng(seed)
    names = [f"l{i}" for i in range(4)]
    dims = (24, 22, 20)
    g = Volume3D(np.broadcast_to(np.float32(0), dims), (2.0, 2.5, 3.0), (5.0, -3.0, 1.0))
    pos = rng.uniform([5, -3, 1], [51, 54, 58], (4, 3))
    atlas = Atlas(names, pos + rng.normal(0, 1, (4, 3)))
    truth = AffineTransform(np.eye(3) + rng.normal(0, 0.02, (3, 3)), rng.normal(0, 2, 3))
    fit = iterative_refine_fit(lmset(names, apply_affine(invert_affine(truth), atlas.positions)), atlas, AtlasConfig(d_atlas=50))
    data = rng.normal(size=(4,) + dims)
    stack = HeatmapStack(names, data, g.spacing, g.origin, HeatmapSpec(1, 1.0))
    cfg = AtlasConfig(d_volume=d_volume)
    try:
        out = direct_atlas_correction(lmset(names, pos), stack, atlas, fit, cfg)
    except ValueError:
        return
    mapped = mapped_atlas_positions(fit, atlas)
    world = np.stack(np.meshgrid(*g.world_grid(), indexing="ij"), -1)
    for i, n in enumerate(names):
        if out[n].status == ABSENT:
            continue
        p = np.array(out[n].position)
        assert np.linalg.norm(p - mapped[i]) <= d_volume + 1e-9
        inside = np.linalg.norm(world - mapped[i], axis=-1) <= d_volume
        v = tuple(g.nearest_voxel(p))
        assert data[i][v] >= data[i][inside].max()


# --- coordinate channels --------------------------------------------------------------


def _box_atlas():
    corners = np.array([[x, y, z] for x in (0, 40) for y in (0, 20) for z in (0, 80)], float)
    return Atlas([f"c{i}" for i in range(8)], corners)


def test_channels_identity_and_corners():
    atlas = _box_atlas()
    fit = iterative_refine_fit(atlas.as_landmarks(), atlas)
    g = Volume3D(np.zeros((11, 6, 21), np.float32), (4.0,) * 3, (0.0, 0.0, 0.0))
    ch = atlas_coordinate_channels(g, fit, atlas)
    assert [c.data.shape for c in ch] == [g.dims] * 3
    assert ch[0].data[0, 0, 0] == pytest.approx(-1) and ch[0].data[10, 0, 0] == pytest.approx(1)
    assert ch[1].data[0, 5, 0] == pytest.approx(1) and ch[2].data[0, 0, 20] == pytest.approx(1)
    assert ch[0].data[5, 3, 10] == pytest.approx(0, abs=1e-6)


def test_channels_translation():
    atlas = _box_atlas()
    fit = iterative_refine_fit(atlas.as_landmarks(), atlas)
    g = Volume3D(np.zeros((5, 5, 5), np.float32), (4.0,) * 3, (0.0, 0.0, 0.0))
    base = atlas_coordinate_channels(g, fit, atlas)
    fit.transform = AffineTransform(np.eye(3), [10, 0, 0])
    moved = atlas_coordinate_channels(g, fit, atlas)
    assert np.allclose(moved[0].data - base[0].data, 10 / 20)
    assert np.array_equal(moved[1].data, base[1].data) and np.array_equal(moved[2].data, base[2].data)


# --- atlas construction -----------------------------------------------------------------


def test_build_single_set():
    rng = np.random.default_rng(13)
    names = [f"l{i}" for i in range(6)]
    pts = cloud(rng, 6)
    a = build_atlas([lmset(names, pts)])
    assert a.names == names and np.allclose(a.positions, pts)


def test_build_exact_affine_pair():
    rng = np.random.default_rng(14)
    names = [f"l{i}" for i in range(7)]
    pts = cloud(rng, 7)
    other = apply_affine(AffineTransform(*random_affine(rng)), pts)
    a = build_atlas([lmset(names, pts), lmset(names, other)])
    assert np.max(np.abs(a.positions - pts)) < 1e-6


def test_build_monte_carlo_noise():
    rng = np.random.default_rng(15)
    names = [f"l{i}" for i in range(10)]
    base = cloud(rng, 10)
    sigma, n = 2.0, 200
    sets = [lmset(names, base + rng.normal(0, sigma, base.shape)) for _ in range(n)]
    a = build_atlas(sets)
    # the atlas frame is only defined up to an affine; compare after alignment
    t = weighted_affine_fit(a.positions, base)
    err = np.linalg.norm(apply_affine(t, a.positions) - base, axis=1)
    assert np.all(err < 3 * sigma * np.sqrt(3) / np.sqrt(n))


def test_build_degenerate_reference():
    planar = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [2, 3, 0]], float)
    with pytest.raises(DegenerateConfigurationError):
        build_atlas([lmset([f"l{i}" for i in range(5)], planar)])


def test_atlas_file_round_trip(tmp_path):
    a = _box_atlas()
    a.save(tmp_path / "a.lmk")
    b = Atlas.load(tmp_path / "a.lmk")
    assert b.names == a.names and np.allclose(b.positions, a.positions)


def test_registration_estimator():
    names, atlas, truth, det = _fixture(np.random.default_rng(16), 8)
    reg = AtlasRegistration(atlas=atlas).fit(lmset(names, det))
    assert np.allclose(reg.transform(det), atlas.positions, atol=1e-8)
    assert np.allclose(reg.inverse_transform(atlas.positions), det, atol=1e-8)
    assert reg.get_params()["d_atlas"] == 10.0


def test_exactly_collinear_detections_raise():
    names = [f"l{i}" for i in range(6)]
    atlas = Atlas(names, cloud(np.random.default_rng(9), 6))
    with pytest.raises(DegenerateConfigurationError):
        iterative_refine_fit(lmset(names, np.outer(np.arange(6), [1.0, 2.0, 3.0])), atlas)

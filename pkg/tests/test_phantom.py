import numpy as np
import pytest
from scipy.integrate import dblquad

from fodf_kit import csd, phantom, sh, sphere
from fodf_kit.errors import InvalidVolume, MissingNoiselessSource, ShapeTooSmall
from fodf_kit.phantom import Compartment, ScanProfile, VoxelModel
from fodf_kit.volume_io import GradientScheme

X, Y, Z = np.eye(3)


def dense_dirs(n=20000, seed=0):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_b0_only_signal_is_s0():
    s = GradientScheme(np.zeros(5), np.zeros((5, 3)))
    m = VoxelModel((Compartment(0.6, tuple(X)), Compartment(0.4, tuple(Y))), s0=3.2)
    np.testing.assert_allclose(phantom.simulate_signal(m, s), 3.2, rtol=0, atol=1e-15)


def test_isotropic_closed_form(scheme96):
    m = VoxelModel((Compartment(1.0, tuple(Z), 0.9e-3, 0.9e-3),), s0=2.0)
    np.testing.assert_allclose(phantom.simulate_signal(m, scheme96),
                               2.0 * np.exp(-scheme96.bvals * 0.9e-3), rtol=1e-13)


def test_crossing_minima_along_axes():
    d = dense_dirs()
    dense = GradientScheme(np.full(len(d), 2000.0), d)
    m = VoxelModel((Compartment(0.5, tuple(X)), Compartment(0.5, tuple(Y))))
    s = phantom.simulate_signal(m, dense)
    # brute force: explicit tensors, quadratic form, exponential
    ref = np.zeros(len(d))
    for f, ax in ((0.5, X), (0.5, Y)):
        D = 0.2e-3 * np.eye(3) + (1.7e-3 - 0.2e-3) * np.outer(ax, ax)
        ref += f * np.exp(-2000.0 * np.einsum("ni,ij,nj->n", d, D, d))
    np.testing.assert_allclose(s, ref, rtol=1e-12)
    # each compartment alone is darkest along its own axis
    for ax in (X, Y):
        alone = phantom.simulate_signal(VoxelModel((Compartment(1.0, tuple(ax)),)), dense)
        assert abs(d[np.argmin(alone)] @ ax) > np.cos(np.deg2rad(3))
    # the mixture is darkest in the fiber plane, on the bisectors between the axes
    low = d[np.argmin(s)]
    assert abs(low[2]) < np.sin(np.deg2rad(3))
    assert abs(abs(low[0]) - abs(low[1])) < 0.05


def test_voxel_model_validation():
    with pytest.raises(InvalidVolume):
        VoxelModel((Compartment(0.5, tuple(X)),))
    with pytest.raises(InvalidVolume):
        VoxelModel((Compartment(1.0, (1.0, 1.0, 0.0)),))
    with pytest.raises(InvalidVolume):
        VoxelModel((Compartment(1.0, tuple(X), 0.1e-3, 0.5e-3),))


def test_single_fiber_z_is_zonal():
    c = phantom.ground_truth_fodf(VoxelModel((Compartment(1.0, tuple(Z)),)))
    _, ms = sh.sh_indices(8)
    assert np.max(np.abs(c[ms != 0])) < 1e-10
    assert np.all(c[ms == 0] > 0)


def test_fraction_degeneracy():
    one = phantom.ground_truth_fodf(VoxelModel((Compartment(1.0, (0.6, 0.0, 0.8)),)))
    two = phantom.ground_truth_fodf(
        VoxelModel((Compartment(0.5, (0.6, 0.0, 0.8)), Compartment(0.5, (0.6, 0.0, 0.8)))))
    np.testing.assert_allclose(one, two, atol=1e-15)


def test_crossing_gt_maxima_at_axes():
    c = phantom.ground_truth_fodf(VoxelModel((Compartment(0.5, tuple(X)), Compartment(0.5, tuple(Y)))))
    d = dense_dirs(40000, 1)
    amp = sh.eval_sh(c, d)
    top = d[np.argsort(-amp)[:30]]
    close = np.abs(top @ np.stack([X, Y]).T).max(axis=1)
    assert np.all(close > np.cos(np.deg2rad(5)))


def test_isotropic_compartment_adds_nothing():
    a = phantom.ground_truth_fodf(VoxelModel((Compartment(0.7, tuple(X)),
                                              Compartment(0.3, tuple(Z), 0.8e-3, 0.8e-3))))
    b = phantom.ground_truth_fodf(VoxelModel((Compartment(1.0, tuple(X)),)))
    np.testing.assert_allclose(a, 0.7 * b, atol=1e-15)


def test_kernel_against_adaptive_quadrature():
    # project the Watson kernel onto Y_k^0 with scipy's adaptive integrator
    kappa = phantom.fiber_kernel_concentration(8)
    norm, _ = dblquad(lambda t, p: np.exp(kappa * (np.cos(t) ** 2 - 1)) * np.sin(t),
                      0, 2 * np.pi, 0, np.pi)
    c = phantom.ground_truth_fodf(VoxelModel((Compartment(1.0, tuple(Z)),)))
    ks, ms = sh.sh_indices(8)
    from scipy.special import eval_legendre
    for k in (0, 2, 4, 8):
        val, _ = dblquad(lambda t, p: np.sqrt((2 * k + 1) / (4 * np.pi)) * eval_legendre(k, np.cos(t))
                         * np.exp(kappa * (np.cos(t) ** 2 - 1)) * np.sin(t), 0, 2 * np.pi, 0, np.pi)
        j = np.flatnonzero((ks == k) & (ms == 0))[0]
        assert c[j] == pytest.approx(val / norm, abs=1e-9)


def test_kernel_is_sharpest_admissible():
    kappa = phantom.fiber_kernel_concentration(8)
    grid = sphere.constraint_grid(724)

    def ratio(k):
        c = phantom._watson_coeffs((0.0, 0.0, 1.0), k, 8)
        v = sh.eval_sh(c, dense_dirs(20000, 3))
        return v.min() / v.max()

    assert ratio(kappa) >= -phantom.KERNEL_NEGATIVITY - 1e-5
    assert ratio(kappa * 1.05) < -phantom.KERNEL_NEGATIVITY
    assert grid.shape == (724, 3)


def test_scale_rotates_with_fiber(rng):
    # Funk-Hecke: projection around any axis is scale * Y(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    direct = phantom._watson_coeffs(d, phantom.fiber_kernel_concentration(8), 8)
    np.testing.assert_allclose(phantom.ground_truth_fodf(VoxelModel((Compartment(1.0, tuple(d)),))),
                               direct, atol=1e-12)


# ---------------------------------------------------------------- volumes

def test_noiseless_phantom_matches_simulate(scheme96):
    prof = ScanProfile(snr=phantom.NOISELESS_SNR)
    dwi, mask, gt = phantom.generate_phantom((5, 5, 5), "mixed", scheme96, prof, geometry_seed=4)
    src = dwi.source
    for v in [(1, 1, 1), (2, 3, 1), (3, 3, 3), (0, 0, 0)]:
        m = src.voxel_model(*v)
        np.testing.assert_array_equal(dwi.data[v], phantom.simulate_signal(m, scheme96).astype(np.float32))
        if mask.bool_mask()[v]:
            np.testing.assert_allclose(gt.data[v], phantom.ground_truth_fodf(m), atol=1e-6)


def test_phantom_layout_and_mask(scheme96):
    prof = ScanProfile(snr=20)
    dwi, mask, gt = phantom.generate_phantom((6, 6, 6), "crossing_slab", scheme96, prof)
    m = mask.bool_mask()
    assert m.sum() == 64 and not m[0].any()
    assert np.all(dwi.source.labels[m] == 2)
    assert gt.sh_order == 8 and np.all(gt.data[~m] == 0)


def test_phantom_deterministic(scheme96):
    prof = ScanProfile(snr=20, seed=9)
    a = phantom.generate_phantom((5, 5, 5), "mixed", scheme96, prof, geometry_seed=1)
    b = phantom.generate_phantom((5, 5, 5), "mixed", scheme96, prof, geometry_seed=1)
    for u, v in zip(a, b):
        assert u.data.tobytes() == v.data.tobytes()


def test_crossing_ratio_16(scheme96):
    prof = ScanProfile(snr=phantom.NOISELESS_SNR)
    for ratio in (0.3, 0.5):
        dwi, mask, _ = phantom.generate_phantom((16, 16, 16), "mixed", scheme96, prof,
                                                geometry_seed=0, crossing_ratio=ratio)
        labels = dwi.source.labels[mask.bool_mask()]
        assert abs(np.mean(labels == 2) - ratio) <= 0.05


def test_shape_too_small(scheme96):
    with pytest.raises(ShapeTooSmall):
        phantom.generate_phantom((2, 5, 5), "mixed", scheme96, ScanProfile())


def test_rician_noise_level(scheme96):
    prof = ScanProfile(snr=20, seed=1)
    dwi, mask, _ = phantom.generate_phantom((8, 8, 8), "single_fiber_slab", scheme96, prof)
    b0 = dwi.data[..., scheme96.b0_mask].astype(np.float64)
    # s0 = 1, sigma = 0.05: at this SNR the Rician spread is close to Gaussian
    assert np.std(b0 - 1.0) == pytest.approx(0.05, rel=0.05)
    assert np.all(dwi.data >= 0)


def test_rescan_identity_and_gain(scheme96):
    prof = ScanProfile(snr=20, seed=3)
    dwi, mask, _ = phantom.generate_phantom((5, 5, 5), "mixed", scheme96, prof)
    same = phantom.make_rescan(dwi, scheme96, prof)
    assert same.data.tobytes() == dwi.data.tobytes()
    gained = phantom.make_rescan(dwi, scheme96, ScanProfile(snr=20, seed=3, gain=1.1))
    np.testing.assert_allclose(gained.data, 1.1 * dwi.data, rtol=1e-6)


def test_rescan_needs_source(scheme96, noiseless_slab):
    from fodf_kit.volume_io import Volume4D
    bare = Volume4D(noiseless_slab[0].data)
    with pytest.raises(MissingNoiselessSource):
        phantom.make_rescan(bare, scheme96, ScanProfile())


def test_jitter_changes_signal(scheme96):
    prof = ScanProfile(snr=phantom.NOISELESS_SNR)
    dwi, _, _ = phantom.generate_phantom((4, 4, 4), "single_fiber_slab", scheme96, prof)
    j = phantom.make_rescan(dwi, scheme96, ScanProfile(snr=phantom.NOISELESS_SNR, direction_jitter_deg=2))
    diff = np.abs(j.data - dwi.data)[..., scheme96.dw_mask]
    assert diff.max() > 1e-3
    assert np.all(j.data[..., scheme96.b0_mask] == dwi.data[..., scheme96.b0_mask])


def test_rescan_csd_decorrelates_and_gain_invariant(scheme96, noisy_mixed, mixed_csd):
    dwi, mask, _ = noisy_mixed
    rf, fod, _ = mixed_csd
    params = csd.CsdParams(max_iter=50)
    re = phantom.make_rescan(dwi, scheme96, ScanProfile(snr=20, seed=77))
    fod_re = csd.fit_volume(re, scheme96, mask, rf, params)[0]
    m = mask.bool_mask()
    vals, valid = sh.acc_many(fod.data[m], fod_re.data[m])
    assert 0.5 < vals[valid].mean() < 1.0
    # gain only: same noise, every signal x1.1 -> normalised SH identical, fODF shape identical
    g = phantom.make_rescan(dwi, scheme96, ScanProfile(snr=20, seed=5, gain=1.1))
    fod_g = csd.fit_volume(g, scheme96, mask, rf, params)[0]
    vals, valid = sh.acc_many(fod.data[m], fod_g.data[m])
    assert vals[valid].mean() > 1 - 1e-4

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from physkin.elasticity import (
    BlendedEnergy, EnergyModel, Material, cofactor, fd_hessian, ldlt_screen,
    psd_factors, psd_project,
)


def random_F(rng, n=8, spread=0.3):
    # perturbations of the identity, occasionally strongly sheared
    return np.eye(3) + spread * rng.standard_normal((n, 3, 3))


def test_lame_parameters():
    m = Material(youngs_modulus=1e4, poisson=0.45)
    assert m.mu == pytest.approx(1e4 / 2.9)
    assert m.lam == pytest.approx(1e4 * 0.45 / (1.45 * 0.1))


def test_rest_state_energy_and_stress_vanish():
    I = np.eye(3)[None]
    for kind in EnergyModel.KINDS:
        model = EnergyModel(kind)
        assert model.psi(I)[0] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(model.pk1(I)[0], 0.0, atol=1e-9)


def test_neo_hookean_hand_value_double_identity():
    # mu = lam = 1: psi(2I) = 0.5*(12-3) - 7 + 0.5*49 = 22
    m = Material(youngs_modulus=2.5, poisson=0.25)  # mu = 1
    assert m.mu == pytest.approx(1.0)
    # build lam = 1 by picking E, nu accordingly: lam = E nu/((1+nu)(1-2nu))
    # with nu = 0.25: lam = E*0.25/(1.25*0.5) = 0.4 E -> E = 2.5 gives lam = 1
    assert m.lam == pytest.approx(1.0)
    model = EnergyModel("stable-neo-hookean", m)
    psi = model.psi((2.0 * np.eye(3))[None])[0]
    assert psi == pytest.approx(22.0, abs=1e-12)


def test_cofactor_matches_det_times_inverse_transpose():
    rng = np.random.default_rng(0)
    F = random_F(rng, 16)
    ref = np.linalg.det(F)[:, None, None] * np.transpose(np.linalg.inv(F), (0, 2, 1))
    np.testing.assert_allclose(cofactor(F), ref, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kind", EnergyModel.KINDS)
def test_pk1_is_gradient_of_psi(kind):
    model = EnergyModel(kind)
    rng = np.random.default_rng(5)
    F = random_F(rng, 6)
    P = model.pk1(F)
    step = 1e-6
    for a in range(3):
        for b in range(3):
            Fp = F.copy(); Fp[:, a, b] += step
            Fm = F.copy(); Fm[:, a, b] -= step
            fd = (model.psi(Fp) - model.psi(Fm)) / (2 * step)
            scale = np.maximum(np.abs(fd), 1e-3 * np.abs(P).max())
            assert np.max(np.abs(P[:, a, b] - fd) / scale) < 1e-6


def test_neo_hookean_rotation_invariance():
    model = EnergyModel("stable-neo-hookean")
    rng = np.random.default_rng(2)
    F = random_F(rng, 10)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    np.testing.assert_allclose(model.psi(Q[None] @ F), model.psi(F), rtol=1e-10)


def test_neo_hookean_finite_under_inversion():
    # the model must stay usable for degenerate and inverted elements
    model = EnergyModel("stable-neo-hookean")
    F = np.stack([np.zeros((3, 3)), -np.eye(3), np.diag([1.0, 1.0, -1.0])])
    psi = model.psi(F)
    assert np.all(np.isfinite(psi))
    assert np.all(np.isfinite(model.pk1(F)))


@pytest.mark.parametrize("kind", EnergyModel.KINDS)
def test_hessian_is_symmetric_psd(kind):
    model = EnergyModel(kind)
    rng = np.random.default_rng(7)
    F = random_F(rng, 12, spread=0.6)
    H = model.hessian_psi(F)
    np.testing.assert_allclose(H, np.transpose(H, (0, 2, 1)), atol=1e-8)
    w = np.linalg.eigvalsh(H)
    assert w.min() >= -1e-6 * np.abs(w).max()


def test_hessian_matches_unprojected_fd_when_already_psd():
    # near the rest state the linear model Hessian is PSD, so projection
    # must be the identity on it
    model = EnergyModel("linear")
    rng = np.random.default_rng(9)
    F = np.eye(3) + 0.01 * rng.standard_normal((4, 3, 3))
    raw = fd_hessian(model.pk1, F)
    np.testing.assert_allclose(model.hessian_psi(F), raw, rtol=1e-9, atol=1e-9)


def test_linear_hessian_is_constant_and_analytic():
    # d^2 psi_L: H[(ab),(cd)] = mu (delta_ac delta_bd + delta_ad delta_bc)
    #            + lam delta_ab delta_cd
    m = Material()
    model = EnergyModel("linear", m)
    rng = np.random.default_rng(11)
    H = model.hessian_psi(random_F(rng, 3, spread=1.0))
    ref = np.zeros((9, 9))
    for a in range(3):
        for b in range(3):
            for c in range(3):
                for d in range(3):
                    v = 0.0
                    if a == c and b == d:
                        v += m.mu
                    if a == d and b == c:
                        v += m.mu
                    if a == b and c == d:
                        v += m.lam
                    ref[3 * a + b, 3 * c + d] = v
    for i in range(H.shape[0]):
        np.testing.assert_allclose(H[i], ref, rtol=1e-5, atol=1e-4)


def test_psd_factors_reconstruct_projection():
    model = EnergyModel("stable-neo-hookean")
    rng = np.random.default_rng(13)
    F = random_F(rng, 10, spread=0.8)
    H = fd_hessian(model.pk1, F)
    R = psd_factors(H)
    Hplus = psd_project(H)
    np.testing.assert_allclose(np.transpose(R, (0, 2, 1)) @ R, Hplus,
                               rtol=1e-8, atol=1e-6 * np.abs(H).max())


def test_ldlt_screen_detects_definiteness():
    rng = np.random.default_rng(17)
    A = rng.standard_normal((6, 9, 9))
    spd = np.transpose(A, (0, 2, 1)) @ A + 1e-3 * np.eye(9)
    indef = spd.copy()
    indef[:, 0, 0] -= 1e3  # force a negative eigenvalue
    ok_spd, L, d = ldlt_screen(spd)
    ok_ind, _, _ = ldlt_screen(indef)
    assert ok_spd.all()
    assert not ok_ind.any()
    # factor reconstructs the input where ok
    rec = L @ (d[:, :, None] * np.transpose(L, (0, 2, 1)))
    np.testing.assert_allclose(rec, spd, rtol=1e-9, atol=1e-9)


def test_blend_endpoints_and_midpoint():
    m = Material()
    rng = np.random.default_rng(3)
    F = random_F(rng, 5)
    lin, nh = EnergyModel("linear", m), EnergyModel("stable-neo-hookean", m)
    np.testing.assert_allclose(BlendedEnergy(m, 0.0).psi(F), lin.psi(F))
    np.testing.assert_allclose(BlendedEnergy(m, 1.0).psi(F), nh.psi(F))
    np.testing.assert_allclose(BlendedEnergy(m, 0.5).psi(F),
                               0.5 * lin.psi(F) + 0.5 * nh.psi(F), rtol=1e-12)
    np.testing.assert_allclose(BlendedEnergy(m, 0.5).pk1(F),
                               0.5 * lin.pk1(F) + 0.5 * nh.pk1(F), rtol=1e-12)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError, match="kind"):
        EnergyModel("mooney-rivlin")
    with pytest.raises(ValueError):
        Material(poisson=0.5)
    with pytest.raises(ValueError, match="3,3"):
        EnergyModel().psi(np.eye(3))
    with pytest.raises(FloatingPointError):
        EnergyModel().psi(np.full((1, 3, 3), np.nan))
    with pytest.raises(ValueError):
        BlendedEnergy(Material(), 1.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 1.0))
def test_blend_energy_between_endpoints_pointwise(seed, t):
    # convex combination: psi_t lies in the interval spanned by the parts
    m = Material()
    F = random_F(np.random.default_rng(seed), 4)
    lo = np.minimum(EnergyModel("linear", m).psi(F),
                    EnergyModel("stable-neo-hookean", m).psi(F))
    hi = np.maximum(EnergyModel("linear", m).psi(F),
                    EnergyModel("stable-neo-hookean", m).psi(F))
    mid = BlendedEnergy(m, t).psi(F)
    assert np.all(mid >= lo - 1e-9) and np.all(mid <= hi + 1e-9)

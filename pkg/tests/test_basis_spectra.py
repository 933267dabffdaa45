import json

import numpy as np
import pytest

from kamred.basis_spectra import (
    EigenBasis,
    GridSpec,
    PotentialSpec,
    SobolevFrame,
    action_area,
    auto_grid,
    check_asymptotics,
    fit_exponent,
    harmonic_ladder,
    half_integer_relabel,
    solve_h0,
    weighted_operator_norm,
)
from kamred.errors import GridTooSmallError, ValidationError

QUARTIC_GROUND = 1.0603620904841829  # reference value for -u'' + x^4 u


def test_potential_validation():
    with pytest.raises(ValidationError):
        PotentialSpec(l=1, coeffs=(0.0, -1.0))  # negative leading
    with pytest.raises(ValidationError):
        PotentialSpec(l=2, coeffs=(0.0, 1.0))  # wrong length
    with pytest.raises(ValidationError):
        PotentialSpec(l=2, coeffs=(0.0, -3.0, 0.0, 1.0))  # double well: V' flips


def test_harmonic_eigenvalues_exact():
    basis = solve_h0(PotentialSpec.harmonic(), 10, refine=4)
    j = np.arange(1, 11)
    assert np.max(np.abs(basis.lambda_v - (2 * j - 1))) < 2e-8
    # half-integer relabeling used by the degree-1 reduction machinery
    assert np.max(np.abs(half_integer_relabel(basis) - (j + 0.5))) < 1e-8


def test_harmonic_ground_state_shape():
    basis = solve_h0(PotentialSpec.harmonic(), 4, refine=1)
    v0 = basis.vectors[:, 0]
    x = basis.grid.points()
    # symmetric single-signed Gaussian profile
    sign = np.sign(v0[np.argmax(np.abs(v0))])
    assert np.all(sign * v0 > -1e-8)
    assert np.max(np.abs(v0 - v0[::-1])) < 1e-8
    gauss = np.exp(-x**2 / 2) / np.pi**0.25
    assert np.max(np.abs(sign * v0 - gauss)) < 5e-4


def test_quartic_ground_state_against_fine_grid_oracle():
    basis = solve_h0(PotentialSpec.quartic(), 64, refine=3)
    # independent oracle: plain solve at double resolution, no extrapolation
    g = auto_grid(PotentialSpec.quartic(), 64)
    fine = solve_h0(PotentialSpec.quartic(), 64, grid=GridSpec(g.L, 2 * g.M - 1), refine=3)
    assert abs(basis.lambda_v[0] - fine.lambda_v[0]) / fine.lambda_v[0] < 1e-6
    assert abs(basis.lambda_v[0] - QUARTIC_GROUND) < 1e-7


def test_orthonormality_and_residual_invariants():
    basis = solve_h0(PotentialSpec.quartic(), 48, refine=1)
    g = basis.grid
    gram = g.h * (basis.vectors.T @ basis.vectors)
    off = gram - np.eye(48)
    assert np.max(np.abs(off)) < 1e-10
    assert np.all(np.diff(basis.lambda_v) > 0)


@pytest.mark.parametrize("l,max_dev", [(2, 0.02), (3, 0.03)])
def test_asymptotic_exponent(l, max_dev):
    basis = solve_h0(PotentialSpec.pure_power(l), 128, refine=2)
    d = 2.0 * l / (l + 1.0)
    c_fit, rel_dev = check_asymptotics(basis, l, (20, 60))
    assert c_fit > 0
    assert rel_dev < max_dev
    d_free = fit_exponent(basis, (20, 60))
    assert abs(d_free - d) / d < 0.02


def test_harmonic_asymptotics_affine():
    basis = solve_h0(PotentialSpec.harmonic(), 128, refine=1)
    _c, dev_lo = check_asymptotics(basis, 1, (10, 30))
    _c, dev_hi = check_asymptotics(basis, 1, (40, 70))
    assert dev_hi < dev_lo  # deviation shrinks as j grows


def test_check_asymptotics_validation():
    basis = solve_h0(PotentialSpec.harmonic(), 32, refine=1)
    with pytest.raises(ValidationError):
        check_asymptotics(basis, 1, (10, 5))
    with pytest.raises(ValidationError):
        check_asymptotics(basis, 1, (10, 12))


def test_grid_too_small_error():
    pot = PotentialSpec.harmonic()
    with pytest.raises(GridTooSmallError):
        solve_h0(pot, 24, grid=GridSpec(L=4.0, M=8 * 24 + 1), refine=1)


def test_weighted_norm_contracts():
    frame = SobolevFrame(1.0, 0.0)
    assert weighted_operator_norm(np.diag([3.0, -1.0, 2.0]), frame) == pytest.approx(3.0)
    assert weighted_operator_norm(np.eye(5), SobolevFrame(2.0, 0.0)) == pytest.approx(1.0)
    # s = 0, kappa = 0 equals the plain spectral norm
    rng = np.random.default_rng(0)
    F = rng.standard_normal((8, 8))
    assert weighted_operator_norm(F, SobolevFrame(0.0, 0.0)) == pytest.approx(
        np.linalg.norm(F, 2), abs=1e-10
    )
    # weighted case against the explicit SVD of the weighted matrix
    fr = SobolevFrame(2.0, 1.0)
    j = np.arange(1.0, 9.0)
    explicit = np.linalg.svd(np.diag(j**2) @ F @ np.diag(j**-1.0), compute_uv=False)[0]
    assert weighted_operator_norm(F, fr) == pytest.approx(explicit, rel=1e-12)


def test_action_area_harmonic():
    assert action_area(PotentialSpec.harmonic(), 2.0) == pytest.approx(2 * np.pi, abs=1e-12)


def test_eigenbasis_json_roundtrip(tmp_path):
    basis = solve_h0(PotentialSpec.harmonic(), 8, refine=1)
    path = tmp_path / "basis.json"
    basis.to_json(path)
    loaded = EigenBasis.from_json(path)
    assert loaded.N == basis.N
    assert np.allclose(loaded.lambda_v, basis.lambda_v)
    assert np.allclose(loaded.vectors, basis.vectors)
    # plain JSON, no binary payloads
    raw = json.loads(path.read_text())
    assert set(raw) == {"N", "L", "M", "lambda_v", "lambda_grid", "vectors"}


def test_harmonic_ladder_values():
    lam = harmonic_ladder(5)
    assert np.allclose(lam, [1.5, 2.5, 3.5, 4.5, 5.5])

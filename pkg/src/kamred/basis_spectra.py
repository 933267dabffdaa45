"""Unperturbed spectral frame: eigenpairs of H0 = -d2/dx2 + V(x) and weighted norms.

The spatial discretization is second-order central finite differences on a
uniform grid with Dirichlet ends; eigenvalues come from LAPACK bisection on
the tridiagonal matrix and eigenvectors from inverse iteration.  Reported
eigenvalues are Richardson-extrapolated over nested grid halvings, which is
what pushes the harmonic ladder to 1e-8 absolute accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq

from .errors import EigensolveError, GridTooSmallError, ValidationError

#: fraction of computed eigenpairs that are certified (rest flagged untrusted)
CERTIFIED_FRACTION = 0.6


@dataclass(frozen=True)
class PotentialSpec:
    """Polynomial well V(x) = sum_i coeffs[i-1] * x^i of degree 2l with V(0) = 0.

    ``coeffs`` lists the coefficients of x^1 .. x^(2l).  The leading
    coefficient must be positive and V' may not vanish away from the origin
    (checked by a sign scan of V' on both half-lines).
    """

    l: int
    coeffs: tuple[float, ...]

    def __post_init__(self):
        if self.l < 1 or int(self.l) != self.l:
            raise ValidationError("degree parameter l must be a positive integer")
        if len(self.coeffs) != 2 * self.l:
            raise ValidationError(
                f"need exactly {2 * self.l} coefficients (powers x^1..x^{2 * self.l})"
            )
        if self.coeffs[-1] <= 0:
            raise ValidationError("leading coefficient of V must be positive")
        self._scan_derivative()

    def _scan_derivative(self, width: float = 10.0, points: int = 4001):
        x = np.linspace(-width, width, points)
        x = x[np.abs(x) > 1e-9]
        dv = self.derivative(x)
        if np.any(dv[x > 0] <= 0) or np.any(dv[x < 0] >= 0):
            raise ValidationError("V'(x) vanishes or changes sign away from x = 0")

    def value(self, x):
        v = np.zeros_like(np.asarray(x, dtype=float))
        for i in range(len(self.coeffs), 0, -1):
            v = (v + self.coeffs[i - 1]) * np.asarray(x, dtype=float)
        return v

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        dv = np.zeros_like(x)
        for i in range(len(self.coeffs), 0, -1):
            dv = dv * x + i * self.coeffs[i - 1]
        return dv

    def turning_point(self, energy: float) -> float:
        """Positive solution of V(x) = energy."""
        hi = 1.0
        while self.value(hi) < energy:
            hi *= 2.0
            if hi > 1e12:
                raise ValidationError("no turning point found")
        return brentq(lambda x: self.value(x) - energy, 0.0, hi, xtol=1e-14)

    @classmethod
    def harmonic(cls) -> "PotentialSpec":
        return cls(l=1, coeffs=(0.0, 1.0))

    @classmethod
    def pure_power(cls, l: int) -> "PotentialSpec":
        c = [0.0] * (2 * l)
        c[-1] = 1.0
        return cls(l=l, coeffs=tuple(c))

    @classmethod
    def quartic(cls) -> "PotentialSpec":
        return cls.pure_power(2)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on [-L, L] with M points."""

    L: float
    M: int

    def __post_init__(self):
        if self.L <= 0 or self.M < 16:
            raise ValidationError("grid needs L > 0 and M >= 16")

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.M - 1)

    def points(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.M)

    def refined(self) -> "GridSpec":
        # halves h exactly while keeping the endpoints
        return GridSpec(self.L, 2 * self.M - 1)


@dataclass(frozen=True)
class SobolevFrame:
    """Weighted sequence-space frame: target weight j^s, source weight j^(s-kappa)."""

    s: float
    kappa: float = 0.0

    def __post_init__(self):
        if self.s < 0 or self.kappa < 0:
            raise ValidationError("need s >= 0 and kappa >= 0")

    def target_weights(self, N: int) -> np.ndarray:
        return np.arange(1, N + 1, dtype=float) ** self.s

    def source_weights(self, N: int) -> np.ndarray:
        return np.arange(1, N + 1, dtype=float) ** (self.s - self.kappa)


@dataclass
class EigenBasis:
    """Truncated eigenpairs of H0 on a grid.

    ``lambda_v`` are the Richardson-extrapolated eigenvalues (ascending);
    ``lambda_grid`` are the raw eigenvalues of the finest discrete operator,
    which pair exactly with ``vectors`` for residual checks.  Only the lower
    ``certified_count`` eigenpairs are certified.
    """

    N: int
    lambda_v: np.ndarray
    lambda_grid: np.ndarray
    vectors: np.ndarray  # shape (M, N), orthonormal in the h-weighted inner product
    grid: GridSpec
    certified_count: int = field(default=0)

    def __post_init__(self):
        if self.certified_count == 0:
            self.certified_count = int(CERTIFIED_FRACTION * self.N)

    def inner(self, u, v):
        return self.grid.h * np.vdot(u, v)

    def to_json_dict(self) -> dict:
        return {
            "N": self.N,
            "L": self.grid.L,
            "M": self.grid.M,
            "lambda_v": self.lambda_v.tolist(),
            "lambda_grid": self.lambda_grid.tolist(),
            "vectors": self.vectors.T.tolist(),
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f)

    @classmethod
    def from_json_dict(cls, d: dict) -> "EigenBasis":
        return cls(
            N=int(d["N"]),
            lambda_v=np.asarray(d["lambda_v"], dtype=float),
            lambda_grid=np.asarray(d["lambda_grid"], dtype=float),
            vectors=np.asarray(d["vectors"], dtype=float).T,
            grid=GridSpec(float(d["L"]), int(d["M"])),
        )

    @classmethod
    def from_json(cls, path) -> "EigenBasis":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


def action_area(potential: PotentialSpec, energy: float, nodes: int = 160) -> float:
    """Phase-space area of {xi^2 + V(x) <= E} by Gauss-Legendre quadrature.

    The sqrt turning-point singularity is removed by the substitution
    x = c + w sin(theta), valid because the turning points are simple.
    """
    if energy <= 0:
        raise ValidationError("energy must be positive")
    xp = potential.turning_point(energy)
    xm = -brentq(lambda x: potential.value(-x) - energy, 0.0, 2 * xp + 1.0, xtol=1e-14)
    c, w = 0.5 * (xp + xm), 0.5 * (xp - xm)
    theta, wts = np.polynomial.legendre.leggauss(nodes)
    theta = 0.5 * np.pi * theta
    wts = 0.5 * np.pi * wts
    x = c + w * np.sin(theta)
    integrand = np.sqrt(np.maximum(energy - potential.value(x), 0.0)) * w * np.cos(theta)
    return 2.0 * float(np.dot(wts, integrand))


def _estimate_top_eigenvalue(potential: PotentialSpec, N: int) -> float:
    # invert the semiclassical state count A(E) ~ 2 pi (N + 1/2)
    target = 2.0 * np.pi * (N + 0.5)
    lo, hi = 1.0, 2.0
    while action_area(potential, hi) < target:
        hi *= 2.0
        if hi > 1e14:
            raise ValidationError("could not bracket the top eigenvalue")
    return brentq(lambda e: action_area(potential, e) - target, lo if action_area(potential, lo) < target else 1e-6, hi)


def auto_grid(potential: PotentialSpec, N: int) -> GridSpec:
    """Grid with half-width L = (3 lambda_N)^(1/2l) and oscillation-resolving M."""
    e_top = _estimate_top_eigenvalue(potential, N)
    L = (3.0 * e_top) ** (1.0 / (2 * potential.l))
    # make sure the box really contains the 3*E classically allowed region
    L = max(L, 1.05 * potential.turning_point(3.0 * e_top))
    M = int(max(8 * N, np.ceil(8.0 * L * np.sqrt(e_top))))
    return GridSpec(L=float(L), M=M + (1 - M % 2))  # odd M keeps x = 0 on the grid


def _solve_grid(potential: PotentialSpec, N: int, grid: GridSpec):
    x = grid.points()
    h = grid.h
    diag = 2.0 / h**2 + potential.value(x)
    off = np.full(grid.M - 1, -1.0 / h**2)
    try:
        lam, vec = eigh_tridiagonal(diag, off, select="i", select_range=(0, N - 1))
    except Exception as exc:  # pragma: no cover
        raise EigensolveError(f"tridiagonal eigensolve failed: {exc}") from exc
    vec = vec / np.sqrt(h)
    return lam, vec


def solve_h0(
    potential: PotentialSpec,
    N: int,
    grid: GridSpec | None = None,
    refine: int = 3,
) -> EigenBasis:
    """Lowest N eigenpairs of H0 = -d2/dx2 + V(x).

    Parameters
    ----------
    grid : GridSpec, optional
        Base grid; derived automatically when omitted.
    refine : int
        Number of nested grid levels used for Richardson extrapolation of the
        eigenvalues (1 = plain finite differences).  Eigenvectors always come
        from the finest level.

    Raises
    ------
    GridTooSmallError
        If the classically allowed region at E = lambda_N is not resolved.
    EigensolveError
        If a certified eigenpair misses its residual tolerance.
    """
    if N < 1:
        raise ValidationError("N must be >= 1")
    if grid is None:
        grid = auto_grid(potential, N)
    if grid.M < 8 * N:
        raise ValidationError(f"grid too coarse: M = {grid.M} < 8 N = {8 * N}")

    levels = [grid]
    for _ in range(max(0, refine - 1)):
        levels.append(levels[-1].refined())
    lams = [_solve_grid(potential, N, g)[0] for g in levels[:-1]]
    lam_fine, vec = _solve_grid(potential, N, levels[-1])
    lams.append(lam_fine)

    # Richardson on the h^2, h^4, ... error expansion
    table = [np.asarray(lam) for lam in lams]
    k = 1
    while len(table) > 1:
        table = [
            (4.0**k * table[i + 1] - table[i]) / (4.0**k - 1.0)
            for i in range(len(table) - 1)
        ]
        k += 1
    lam_extrap = table[0]

    basis = EigenBasis(
        N=N,
        lambda_v=lam_extrap,
        lambda_grid=lam_fine,
        vectors=vec,
        grid=levels[-1],
    )
    _validate_basis(potential, basis)
    if grid.L ** (2 * potential.l) < 2.0 * lam_extrap[-1]:
        raise GridTooSmallError(
            f"turning point outside domain: L^(2l) = {grid.L ** (2 * potential.l):.3e} "
            f"< 2 lambda_N = {2 * lam_extrap[-1]:.3e}"
        )
    return basis


def _validate_basis(potential: PotentialSpec, basis: EigenBasis):
    lam, vec, g = basis.lambda_grid, basis.vectors, basis.grid
    if np.any(np.diff(basis.lambda_v) <= 0):
        raise EigensolveError("eigenvalues not strictly increasing")
    gram = g.h * (vec.T @ vec)
    ortho = np.max(np.abs(gram - np.eye(basis.N)))
    if ortho > 1e-10:
        raise EigensolveError(f"orthonormality defect {ortho:.2e} > 1e-10")
    x = g.points()
    h = g.h
    v = potential.value(x)
    nc = basis.certified_count
    hv = np.empty_like(vec[:, :nc])
    hv[1:-1] = (-vec[:-2, :nc] + 2.0 * vec[1:-1, :nc] - vec[2:, :nc]) / h**2
    hv[0] = (2.0 * vec[0, :nc] - vec[1, :nc]) / h**2
    hv[-1] = (2.0 * vec[-1, :nc] - vec[-2, :nc]) / h**2
    hv += v[:, None] * vec[:, :nc]
    res = np.sqrt(h * np.sum((hv - lam[None, :nc] * vec[:, :nc]) ** 2, axis=0))
    bad = res > 1e-8 * lam[:nc]
    if np.any(bad):
        j = int(np.argmax(bad))
        raise EigensolveError(
            f"residual {res[j]:.2e} exceeds 1e-8 * lambda_{j + 1} for a certified pair"
        )


def half_integer_relabel(basis: EigenBasis) -> np.ndarray:
    """Half-integer relabeling (lambda + 2) / 2 of the harmonic spectrum.

    The operator -d2/dx2 + x^2 has eigenvalues 2j - 1; the degree-1 ladder
    used by the reducibility machinery is j + 1/2, reached from the raw
    spectrum by the exact affine map above.  Only meaningful for l = 1 with
    V = x^2.
    """
    return (basis.lambda_v + 2.0) / 2.0


def harmonic_ladder(N: int) -> np.ndarray:
    """Model degree-1 ladder lambda_j = j + 1/2, j = 1..N."""
    return np.arange(1, N + 1, dtype=float) + 0.5


def check_asymptotics(basis: EigenBasis, l: int, j_range: tuple[int, int]):
    """Fit lambda_j ~ (1/c) j^d with d = 2l/(l+1) fixed on j in [j_lo, j_hi].

    Returns ``(c_fit, max_rel_dev)``.  Indices are 1-based like the ladder.
    """
    j_lo, j_hi = j_range
    if j_hi < j_lo:
        raise ValidationError("empty j range")
    if j_hi - j_lo + 1 < 5:
        raise ValidationError("fit degenerate: fewer than 5 points")
    if j_hi > basis.N:
        raise ValidationError("range exceeds basis size")
    d = 2.0 * l / (l + 1.0)
    j = np.arange(j_lo, j_hi + 1, dtype=float)
    lam = basis.lambda_v[j_lo - 1 : j_hi]
    log_c = np.mean(d * np.log(j) - np.log(lam))
    c_fit = float(np.exp(log_c))
    model = (1.0 / c_fit) * j**d
    max_rel_dev = float(np.max(np.abs(lam - model) / lam))
    return c_fit, max_rel_dev


def fit_exponent(basis: EigenBasis, j_range: tuple[int, int]) -> float:
    """Free-exponent least-squares fit of log lambda_j against log j."""
    j_lo, j_hi = j_range
    j = np.arange(j_lo, j_hi + 1, dtype=float)
    lam = basis.lambda_v[j_lo - 1 : j_hi]
    slope, _ = np.polyfit(np.log(j), np.log(lam), 1)
    return float(slope)


def weighted_operator_norm(Fmat: np.ndarray, frame: SobolevFrame) -> float:
    """Operator norm of diag(j^s) F diag(j^-(s-kappa)) on the truncation."""
    F = np.asarray(Fmat)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise ValidationError("Fmat must be square")
    N = F.shape[0]
    w_t = frame.target_weights(N)
    w_s = frame.source_weights(N)
    weighted = (w_t[:, None] * F) / w_s[None, :]
    return float(np.linalg.norm(weighted, 2))

"""Classical/semiclassical symbol engine.

Polynomial symbols with torus-Fourier coefficients are kept exactly as
coefficient dictionaries; the general-degree machinery works on grid samples.
Hamiltonian flow of h0 = xi^2 + V(x) is integrated with fixed-step
Stormer-Verlet composed to fourth order (Yoshida coefficients), which keeps
the energy defect along one period near 1e-12 at the default step count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .basis_spectra import PotentialSpec, action_area
from .diophantine import DiophantineParams, is_diophantine_0, is_diophantine_1
from .errors import (
    NonContractionError,
    PeriodDetectionError,
    QuadratureError,
    ResidualError,
    ResonanceError,
    ValidationError,
)

Key = tuple  # (a, b, k) with k a tuple of ints


def weight_lambda(x, xi, l: int):
    """Anisotropic weight (1 + xi^2 + x^(2l))^(1/(2l))."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    out = (1.0 + xi**2 + x ** (2 * l)) ** (1.0 / (2 * l))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# polynomial symbols
# ---------------------------------------------------------------------------


@dataclass
class PhaseSymbol:
    """Polynomial symbol sum_{a,b,k} c_{abk} x^a xi^b e^(i k.phi).

    Coefficients may be complex numbers or exact types (e.g. Fraction) as
    long as they support ring arithmetic; all structural operations preserve
    the coefficient type.  ``order`` is the declared symbol-class order used
    by the normal-form ledger.
    """

    n: int
    terms: dict
    order: float | None = None

    @classmethod
    def zero(cls, n: int) -> "PhaseSymbol":
        return cls(n=n, terms={})

    @classmethod
    def monomial(cls, n: int, a: int, b: int, k=None, coeff=1.0) -> "PhaseSymbol":
        k = (0,) * n if k is None else tuple(int(c) for c in k)
        if len(k) != n:
            raise ValidationError("torus index length must equal n")
        return cls(n=n, terms={(a, b, k): coeff})

    def copy(self) -> "PhaseSymbol":
        return PhaseSymbol(self.n, dict(self.terms), self.order)

    def prune(self, tol: float = 0.0) -> "PhaseSymbol":
        self.terms = {key: c for key, c in self.terms.items() if abs(c) > tol}
        return self

    def __add__(self, other: "PhaseSymbol") -> "PhaseSymbol":
        if self.n != other.n:
            raise ValidationError("mismatched torus dimension")
        out = dict(self.terms)
        for key, c in other.terms.items():
            out[key] = out.get(key, 0) + c
        order = None
        if self.order is not None and other.order is not None:
            order = max(self.order, other.order)
        return PhaseSymbol(self.n, out, order).prune()

    def __sub__(self, other: "PhaseSymbol") -> "PhaseSymbol":
        return self + other.scale(-1)

    def scale(self, factor) -> "PhaseSymbol":
        return PhaseSymbol(
            self.n, {key: factor * c for key, c in self.terms.items()}, self.order
        )

    def mul(self, other: "PhaseSymbol") -> "PhaseSymbol":
        out: dict = {}
        for (a1, b1, k1), c1 in self.terms.items():
            for (a2, b2, k2), c2 in other.terms.items():
                key = (a1 + a2, b1 + b2, tuple(u + v for u, v in zip(k1, k2)))
                out[key] = out.get(key, 0) + c1 * c2
        order = None
        if self.order is not None and other.order is not None:
            order = self.order + other.order
        return PhaseSymbol(self.n, out, order).prune()

    def dx(self) -> "PhaseSymbol":
        out = {}
        for (a, b, k), c in self.terms.items():
            if a > 0:
                key = (a - 1, b, k)
                out[key] = out.get(key, 0) + a * c
        return PhaseSymbol(self.n, out)

    def dxi(self) -> "PhaseSymbol":
        out = {}
        for (a, b, k), c in self.terms.items():
            if b > 0:
                key = (a, b - 1, k)
                out[key] = out.get(key, 0) + b * c
        return PhaseSymbol(self.n, out)

    def dphi_omega(self, omega) -> "PhaseSymbol":
        """Directional angle derivative omega . d/dphi (multiplies by i omega.k)."""
        omega = np.asarray(omega, dtype=float)
        out = {}
        for (a, b, k), c in self.terms.items():
            kw = float(np.dot(omega, k))
            if kw != 0.0:
                out[(a, b, k)] = 1j * kw * c
        return PhaseSymbol(self.n, out, self.order)

    def sup_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def reality_defect(self) -> float:
        worst = 0.0
        for (a, b, k), c in self.terms.items():
            mk = tuple(-u for u in k)
            cc = self.terms.get((a, b, mk), 0)
            worst = max(worst, abs(complex(c).conjugate() - complex(cc)))
        return worst

    def natural_order(self, l: int) -> float:
        """Largest a + l*b over the support (growth against the weight)."""
        return max((a + l * b for (a, b, _k) in self.terms), default=-math.inf)

    def degree(self) -> int:
        return max((a + b for (a, b, _k) in self.terms), default=0)

    def evaluate(self, x, xi, phi=None):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        phi = None if phi is None else np.asarray(phi, dtype=float)
        out = np.zeros(np.broadcast(x, xi).shape, dtype=complex)
        for (a, b, k), c in self.terms.items():
            term = complex(c) * x**a * xi**b
            if phi is not None and any(k):
                term = term * np.exp(1j * float(np.dot(phi, k)))
            out = out + term
        return out

    def mode(self, k) -> "PhaseSymbol":
        k = tuple(int(c) for c in k)
        return PhaseSymbol(
            self.n, {key: c for key, c in self.terms.items() if key[2] == k}
        )

    def mode_set(self):
        return sorted({key[2] for key in self.terms})

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "rep": "polynomial",
            "terms": [
                {
                    "a": a,
                    "b": b,
                    "k": list(k),
                    "re": float(np.real(complex(c))),
                    "im": float(np.imag(complex(c))),
                }
                for (a, b, k), c in sorted(self.terms.items())
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PhaseSymbol":
        if d.get("rep", "polynomial") != "polynomial":
            raise ValidationError("only the polynomial representation is serialized")
        terms = {
            (int(t["a"]), int(t["b"]), tuple(int(c) for c in t["k"])): t["re"] + 1j * t["im"]
            for t in d["terms"]
        }
        return cls(n=int(d["n"]), terms=terms)


def h0_symbol(potential: PotentialSpec, n: int = 0) -> PhaseSymbol:
    terms = {(0, 2, (0,) * n): 1.0}
    for i, c in enumerate(potential.coeffs, start=1):
        if c != 0.0:
            terms[(i, 0, (0,) * n)] = c
    return PhaseSymbol(n=n, terms=terms, order=2.0 * potential.l)


def poisson_bracket(f: PhaseSymbol, g: PhaseSymbol, l: int | None = None) -> PhaseSymbol:
    """Poisson bracket -d_xi f d_x g + d_xi g d_x f, exact on coefficients."""
    out = f.dx().mul(g.dxi()) - f.dxi().mul(g.dx())
    if l is not None and f.order is not None and g.order is not None:
        out.order = f.order + g.order - (l + 1)
    return out


def _sharp_term(f: PhaseSymbol, g: PhaseSymbol, j: int) -> PhaseSymbol:
    """j-th term of the Weyl product expansion of f # g."""
    out = PhaseSymbol.zero(f.n)
    for k1 in range(j + 1):
        k2 = j - k1
        a = f
        for _ in range(k1):
            a = a.dxi()
        for _ in range(k2):
            a = a.dx().scale(-1j)  # D_x = -i d_x
        b = g
        for _ in range(k2):
            b = b.dxi()
        for _ in range(k1):
            b = b.dx().scale(-1j)
        if not a.terms or not b.terms:
            continue
        coeff = (0.5**k1) * ((-0.5) ** k2) / (math.factorial(k1) * math.factorial(k2))
        out = out + a.mul(b).scale(coeff)
    return out


def moyal_correction(f: PhaseSymbol, g: PhaseSymbol, j_max: int) -> list[PhaseSymbol]:
    """Weyl composition terms c_0..c_jmax of f # g (c_0 = f g)."""
    if j_max > 3:
        raise ValidationError("j_max must be <= 3")
    if j_max > f.degree() + g.degree():
        raise ValidationError("j_max too large for the stored degrees")
    return [_sharp_term(f, g, j) for j in range(j_max + 1)]


def sharp_product(f: PhaseSymbol, g: PhaseSymbol) -> PhaseSymbol:
    """Full Weyl product f # g; terminates exactly on polynomials."""
    out = PhaseSymbol.zero(f.n)
    for j in range(min(f.degree(), g.degree()) + 1):
        out = out + _sharp_term(f, g, j)
    return out


def moyal_bracket(f: PhaseSymbol, g: PhaseSymbol, l: int | None = None) -> PhaseSymbol:
    """{f; g}^q = -i (f # g - g # f); equals the Poisson bracket plus lower order."""
    out = (sharp_product(f, g) - sharp_product(g, f)).scale(-1j)
    if l is not None and f.order is not None and g.order is not None:
        out.order = f.order + g.order - (l + 1)
    out.prune(1e-300)
    return out


# ---------------------------------------------------------------------------
# classical flow
# ---------------------------------------------------------------------------

_Y1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_Y0 = 1.0 - 2.0 * _Y1


def _verlet(x, xi, dt, dv):
    # h0 = xi^2 + V(x): dx/dt = 2 xi, dxi/dt = -V'(x)
    xi = xi - 0.5 * dt * dv(x)
    x = x + 2.0 * dt * xi
    xi = xi - 0.5 * dt * dv(x)
    return x, xi


def _flow_step(x, xi, dt, dv):
    for w in (_Y1, _Y0, _Y1):
        x, xi = _verlet(x, xi, w * dt, dv)
    return x, xi


@lru_cache(maxsize=8)
def _gauss_nodes(nodes: int):
    theta, wts = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * np.pi * theta, 0.5 * np.pi * wts


def flow_period(potential: PotentialSpec, energy: float, nodes: int = 160) -> float:
    """Period T(E) = integral dx / sqrt(E - V) by turning-point quadrature."""
    if energy <= 0:
        raise ValidationError("energy must be positive")
    xp = potential.turning_point(energy)
    from scipy.optimize import brentq

    xm = -brentq(lambda x: potential.value(-x) - energy, 0.0, 2 * xp + 1.0, xtol=1e-14)
    c, w = 0.5 * (xp + xm), 0.5 * (xp - xm)
    theta, wts = _gauss_nodes(nodes)
    x = c + w * np.sin(theta)
    de = np.maximum(energy - potential.value(x), 1e-300)
    integrand = w * np.cos(theta) / np.sqrt(de)
    return float(np.dot(wts, integrand))


@lru_cache(maxsize=32)
def _period_spline(potential: PotentialSpec, e_lo: float, e_hi: float):
    from scipy.interpolate import CubicSpline

    es = np.geomspace(0.9 * e_lo, 1.1 * e_hi, 96)
    ts = np.array([flow_period(potential, e) for e in es])
    return CubicSpline(np.log(es), ts)


def periods_for(potential: PotentialSpec, energies: np.ndarray) -> np.ndarray:
    """Vectorized T(E) through a cached log-energy spline."""
    energies = np.asarray(energies, dtype=float)
    spl = _period_spline(potential, float(np.min(energies)), float(np.max(energies)))
    return spl(np.log(energies))


@dataclass
class FlowTrace:
    """One closed orbit of h0 at energy E, sampled uniformly in time."""

    E: float
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    period: float

    def energy_defect(self, potential: PotentialSpec) -> float:
        h = self.xi**2 + potential.value(self.x)
        return float(np.max(np.abs(h - self.E)) / self.E)

    def closure_gap(self) -> float:
        return float(np.hypot(self.x[-1] - self.x[0], self.xi[-1] - self.xi[0]))


def _detect_period(potential: PotentialSpec, energy: float, dt: float) -> float:
    """Return time of second xi = 0 crossing (one full period) from (x_+, 0)."""
    dv = potential.derivative
    x = np.array([potential.turning_point(energy)])
    xi = np.array([0.0])
    crossings = 0
    t = 0.0
    prev = 0.0
    for _ in range(200000):
        x_new, xi_new = _flow_step(x, xi, dt, dv)
        t_new = t + dt
        if xi_new[0] * prev < 0.0 or (prev != 0.0 and xi_new[0] == 0.0):
            crossings += 1
            if crossings == 2:
                # bisection refinement of the crossing time inside the last step
                lo_t, hi_t = t, t_new
                lo_x, lo_xi = x.copy(), xi.copy()
                for _ in range(60):
                    mid = 0.5 * (lo_t + hi_t)
                    mx, mxi = _flow_step(lo_x, lo_xi, mid - lo_t, dv)
                    if mxi[0] * prev < 0.0:
                        hi_t = mid
                    else:
                        lo_t, lo_x, lo_xi = mid, mx, mxi
                return 0.5 * (lo_t + hi_t)
        prev = xi_new[0] if xi_new[0] != 0.0 else prev
        x, xi, t = x_new, xi_new, t_new
    raise PeriodDetectionError(f"no closed orbit found at E = {energy}")


def classical_flow(potential: PotentialSpec, energy: float, steps: int = 4096) -> FlowTrace:
    """Integrate one full period of the h0 flow starting at (x_+(E), 0).

    The period is refined by Poincare-section bisection started from the
    quadrature estimate; the trace is then resampled with a fixed step T/steps.
    """
    if energy <= 0:
        raise ValidationError("energy must be positive")
    t_est = flow_period(potential, energy)
    period = _detect_period(potential, energy, t_est / steps)
    dv = potential.derivative
    dt = period / steps
    xs = np.empty(steps + 1)
    xis = np.empty(steps + 1)
    x = np.array([potential.turning_point(energy)])
    xi = np.array([0.0])
    xs[0], xis[0] = x[0], xi[0]
    for i in range(1, steps + 1):
        x, xi = _flow_step(x, xi, dt, dv)
        xs[i], xis[i] = x[0], xi[0]
    trace = FlowTrace(
        E=energy, t=np.linspace(0.0, period, steps + 1), x=xs, xi=xis, period=period
    )
    gap = trace.closure_gap()
    if gap > 1e-6 * math.sqrt(energy):
        raise PeriodDetectionError(f"closure gap {gap:.2e} too large at E = {energy}")
    return trace


def period_action(potential: PotentialSpec, energy: float) -> tuple[float, float]:
    """(T(E), A(E)): period from flow closure, enclosed area by quadrature.

    Consistency dA/dE = T is enforced to 1e-4 relative by central differences.
    """
    trace = classical_flow(potential, energy)
    area = action_area(potential, energy)
    rel = action_derivative_consistency(potential, energy, trace.period)
    if rel > 1e-4:
        raise QuadratureError(f"dA/dE vs T mismatch: {rel:.2e} relative at E = {energy}")
    return trace.period, area


def action_derivative_consistency(
    potential: PotentialSpec, energy: float, period: float | None = None
) -> float:
    if period is None:
        period = flow_period(potential, energy)
    de = 1e-3 * energy
    da = (action_area(potential, energy + de) - action_area(potential, energy - de)) / (2 * de)
    return abs(da - period) / period


def average_along_flow(p, potential: PotentialSpec, energy: float, phi=None) -> float:
    """Flow average (1/T) int_0^T p(Phi^tau(x0, xi0), phi) dtau over one orbit."""
    if energy < 1.0:
        raise ValidationError("flow averaging is restricted to E >= 1")
    trace = classical_flow(potential, energy)
    if callable(p) and not isinstance(p, PhaseSymbol):
        vals = p(trace.x[:-1], trace.xi[:-1])
    else:
        vals = p.evaluate(trace.x[:-1], trace.xi[:-1], phi)
    return float(np.real(np.mean(vals)))


# ---------------------------------------------------------------------------
# cutoff and grid symbols
# ---------------------------------------------------------------------------


def eta_cutoff(E):
    """C^2 bump: 0 for E < 1, 1 for E > 2, quintic smoothstep between."""
    E = np.asarray(E, dtype=float)
    t = np.clip(E - 1.0, 0.0, 1.0)
    out = t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    return float(out) if out.ndim == 0 else out


@dataclass
class GridSymbol:
    """Symbol sampled on a rectangular (x, xi) lattice, one array per torus mode."""

    n: int
    x: np.ndarray
    xi: np.ndarray
    values: dict  # mode tuple -> 2-D array, shape (len(x), len(xi))
    order: float | None = None

    def sup(self) -> float:
        return max(
            (float(np.max(np.abs(v))) for v in self.values.values()), default=0.0
        )

    def copy(self) -> "GridSymbol":
        return GridSymbol(
            self.n, self.x, self.xi, {k: v.copy() for k, v in self.values.items()}, self.order
        )

    def map_values(self, fn) -> "GridSymbol":
        return GridSymbol(
            self.n, self.x, self.xi, {k: fn(k, v) for k, v in self.values.items()}, self.order
        )


def make_lattice(potential: PotentialSpec, e_max: float, nx: int = 96, nxi: int = 96):
    x_max = 1.02 * potential.turning_point(e_max)
    xi_max = 1.02 * math.sqrt(e_max)
    return np.linspace(-x_max, x_max, nx), np.linspace(-xi_max, xi_max, nxi)


def on_lattice(p: PhaseSymbol, x: np.ndarray, xi: np.ndarray) -> GridSymbol:
    X, XI = np.meshgrid(x, xi, indexing="ij")
    values = {}
    for k in p.mode_set():
        pk = p.mode(k)
        acc = np.zeros_like(X, dtype=complex)
        for (a, b, _k), c in pk.terms.items():
            acc += complex(c) * X**a * XI**b
        values[k] = acc
    return GridSymbol(n=p.n, x=x, xi=xi, values=values, order=p.order)


def cutoff_split(W, potential: PotentialSpec, lattice=None):
    """Split W into W0 = W eta(h0) and Winf = W (1 - eta(h0)) on the lattice."""
    if isinstance(W, PhaseSymbol):
        if lattice is None:
            lattice = make_lattice(potential, e_max=8.0)
        W = on_lattice(W, *lattice)
    X, XI = np.meshgrid(W.x, W.xi, indexing="ij")
    h0 = XI**2 + potential.value(X)
    eta = eta_cutoff(h0)
    w0 = W.map_values(lambda _k, v: v * eta)
    winf = W.map_values(lambda _k, v: v * (1.0 - eta))
    w0.order = W.order
    winf.order = None
    return w0, winf


# ---------------------------------------------------------------------------
# homological equations
# ---------------------------------------------------------------------------


def _orbit_batch(potential: PotentialSpec, x0, xi0, periods, samples: int):
    """Integrate one period for every start point; return sample arrays.

    Shapes: x0, xi0, periods are (P,); output arrays are (P, samples)
    sampled uniformly in time over each point's own period (endpoint excluded).
    """
    dv = potential.derivative
    dt = periods / samples
    P = x0.shape[0]
    xs = np.empty((P, samples))
    xis = np.empty((P, samples))
    x, xi = x0.copy(), xi0.copy()
    for i in range(samples):
        xs[:, i], xis[:, i] = x, xi
        for w in (_Y1, _Y0, _Y1):
            xi = xi - 0.5 * w * dt * dv(x)
            x = x + 2.0 * w * dt * xi
            xi = xi - 0.5 * w * dt * dv(x)
    return xs, xis


def _orbit_solve_multi(potential, pk_evals, x0, xi0, samples: int, chunk: int = 2048):
    """Per-orbit solve of {chi, h0} = p - <p> for several symbols at once.

    A single integration pass feeds every symbol in ``pk_evals``; each is
    inverted in orbit-Fourier space.  Returns lists of (chi, avg) arrays at
    the start points.
    """
    energies = xi0**2 + potential.value(x0)
    periods = periods_for(potential, energies)
    nsym = len(pk_evals)
    chis = [np.empty(x0.shape[0], dtype=complex) for _ in range(nsym)]
    avgs = [np.empty(x0.shape[0], dtype=complex) for _ in range(nsym)]
    m = np.fft.fftfreq(samples, d=1.0) * samples  # integer orbit-mode numbers
    nonzero = m != 0
    for start in range(0, x0.shape[0], chunk):
        sl = slice(start, min(start + chunk, x0.shape[0]))
        xs, xis = _orbit_batch(potential, x0[sl], xi0[sl], periods[sl], samples)
        nu = 2.0 * np.pi * m[None, :] / periods[sl][:, None]
        for i, pk in enumerate(pk_evals):
            coeffs = np.fft.fft(pk(xs, xis), axis=1) / samples
            inv = np.zeros_like(coeffs)
            inv[:, nonzero] = coeffs[:, nonzero] / (1j * nu[:, nonzero])
            chis[i][sl] = np.sum(inv, axis=1)
            avgs[i][sl] = coeffs[:, 0]
    return chis, avgs


@dataclass
class FlowHomResult:
    """Solution of the flow homological equation on lattice points."""

    chi: GridSymbol
    average: GridSymbol
    mask: np.ndarray
    residual_sup: float
    worst_point: tuple[float, float]
    tolerance: float


def solve_hom_flow(
    p: PhaseSymbol,
    potential: PotentialSpec,
    e_window: tuple[float, float] = (1.0, 8.0),
    lattice=None,
    samples: int = 2048,
    probes: int = 96,
    seed: int = 0,
    tol_factor: float = 1e-4,
) -> FlowHomResult:
    """Solve {chi, h0} = p - <p> orbit-wise on a phase-space lattice.

    The residual functional is evaluated independently: chi is recomputed on
    four finite-difference stencil neighbours of randomly chosen probe points
    and the bracket d_x chi * d_xi h0 - d_xi chi * d_x h0 is formed from those
    differences, then compared against p - <p>.
    """
    e_min, e_max = e_window
    if lattice is None:
        lattice = make_lattice(potential, e_max)
    x, xi = lattice
    X, XI = np.meshgrid(x, xi, indexing="ij")
    energy = XI**2 + potential.value(X)
    mask = (energy >= e_min) & (energy <= e_max)
    pts_x, pts_xi = X[mask], XI[mask]

    kset = p.mode_set()
    pks = [p.mode(k) for k in kset]
    evals = [pk.evaluate for pk in pks]
    chi_flat, avg_flat = _orbit_solve_multi(potential, evals, pts_x, pts_xi, samples)
    chi_vals = {}
    avg_vals = {}
    sup_p = 0.0
    for k, pk, cf, af in zip(kset, pks, chi_flat, avg_flat):
        grid_chi = np.zeros(X.shape, dtype=complex)
        grid_avg = np.zeros(X.shape, dtype=complex)
        grid_chi[mask] = cf
        grid_avg[mask] = af
        chi_vals[k] = grid_chi
        avg_vals[k] = grid_avg
        sup_p = max(sup_p, float(np.max(np.abs(pk.evaluate(pts_x, pts_xi)))))

    # independent residual probe: spatial finite differences of a freshly
    # solved chi at stencil neighbours
    rng = np.random.default_rng(seed)
    take = min(probes, pts_x.size)
    idx = rng.choice(pts_x.size, size=take, replace=False)
    px, pxi = pts_x[idx], pts_xi[idx]
    h = 1e-3
    stencil_x = np.concatenate([px + h, px - h, px, px, px])
    stencil_xi = np.concatenate([pxi, pxi, pxi + h, pxi - h, pxi])
    chi_st_all, avg_st_all = _orbit_solve_multi(
        potential, evals, stencil_x, stencil_xi, samples
    )
    worst = 0.0
    worst_pt = (0.0, 0.0)
    for pk, chi_st, avg_st in zip(pks, chi_st_all, avg_st_all):
        cxp, cxm, cxip, cxim, _c0 = np.split(chi_st, 5)
        avg_here = np.split(avg_st, 5)[4]
        dchi_dx = (cxp - cxm) / (2 * h)
        dchi_dxi = (cxip - cxim) / (2 * h)
        bracket = dchi_dx * (2.0 * pxi) - dchi_dxi * potential.derivative(px)
        res = np.abs(bracket - (pk.evaluate(px, pxi) - avg_here))
        j = int(np.argmax(res))
        if res[j] > worst:
            worst = float(res[j])
            worst_pt = (float(px[j]), float(pxi[j]))

    tolerance = tol_factor * max(sup_p, 1e-300)
    if worst > tolerance:
        raise ResidualError(
            f"flow homological residual {worst:.3e} exceeds {tolerance:.3e} "
            f"at (x, xi) = {worst_pt}",
            worst=worst_pt,
        )
    return FlowHomResult(
        chi=GridSymbol(p.n, x, xi, chi_vals),
        average=GridSymbol(p.n, x, xi, avg_vals),
        mask=mask,
        residual_sup=worst,
        worst_point=worst_pt,
        tolerance=tolerance,
    )


def solve_hom_torus(p, omega, params: DiophantineParams):
    """Invert omega . d/dphi on the zero-average part: chi_k = p_k / (i omega.k).

    Works on PhaseSymbol and GridSymbol alike.  Returns (chi, report) where
    the report carries the dropped-tail bound for modes beyond Kmax.
    """
    omega = np.asarray(omega, dtype=float)
    if not is_diophantine_0(omega, params):
        raise ResonanceError(0, 0, (0,) * len(omega), 0.0, params.gamma)
    if isinstance(p, PhaseSymbol):
        out: dict = {}
        tail = 0.0
        for (a, b, k), c in p.terms.items():
            knorm = sum(abs(u) for u in k)
            if knorm == 0:
                continue
            if knorm > params.Kmax:
                tail += abs(c)
                continue
            div = float(np.dot(omega, k))
            bound = params.gamma * knorm ** (-params.tau)
            if abs(div) < bound:
                raise ResonanceError(0, 0, k, div, bound)
            out[(a, b, k)] = c / (1j * div)
        chi = PhaseSymbol(p.n, out, p.order)
        return chi, {"tail_bound": tail}
    values = {}
    tail = 0.0
    for k, arr in p.values.items():
        knorm = sum(abs(u) for u in k)
        if knorm == 0:
            continue
        if knorm > params.Kmax:
            tail += float(np.max(np.abs(arr)))
            continue
        div = float(np.dot(omega, k))
        bound = params.gamma * knorm ** (-params.tau)
        if abs(div) < bound:
            raise ResonanceError(0, 0, k, div, bound)
        values[k] = arr / (1j * div)
    chi = GridSymbol(p.n, p.x, p.xi, values, p.order)
    return chi, {"tail_bound": tail}


def torus_average(p):
    """phi-average: keeps the k = 0 part."""
    if isinstance(p, PhaseSymbol):
        zero = (0,) * p.n
        return PhaseSymbol(p.n, {key: c for key, c in p.terms.items() if key[2] == zero})
    zero = (0,) * p.n
    vals = {zero: p.values[zero].copy()} if zero in p.values else {}
    return GridSymbol(p.n, p.x, p.xi, vals, p.order)


# --- complex-coordinate machinery for the isochronous case -----------------


def to_z_terms(p: PhaseSymbol) -> dict:
    """Rewrite x^a xi^b as polynomials in z = x + i xi, zbar = x - i xi."""
    out: dict = {}
    for (a, b, k), c in p.terms.items():
        # x = (z + zbar)/2, xi = (z - zbar)/(2i)
        for i in range(a + 1):
            ca = math.comb(a, i) * (0.5**a)
            for j in range(b + 1):
                cb = math.comb(b, j) * ((-1) ** (b - j)) * (0.5 / 1j) ** b
                key = (i + j, a - i + b - j, k)
                out[key] = out.get(key, 0) + c * ca * cb
    return {key: c for key, c in out.items() if abs(c) > 0.0}


def from_z_terms(zterms: dict, n: int) -> PhaseSymbol:
    out: dict = {}
    for (az, bz, k), c in zterms.items():
        # z = x + i xi, zbar = x - i xi
        for i in range(az + 1):
            ca = math.comb(az, i)
            for j in range(bz + 1):
                cb = math.comb(bz, j)
                coeff = c * ca * cb * (1j ** (az - i)) * ((-1j) ** (bz - j))
                key = (i + j, az - i + bz - j, k)
                out[key] = out.get(key, 0) + coeff
    return PhaseSymbol(n, {key: c for key, c in out.items() if abs(c) > 1e-300})


def _znormal_split(zterms: dict):
    """Split z-terms into invariant part (a = b, k = 0) and the rest."""
    normal, osc = {}, {}
    for key, c in zterms.items():
        az, bz, k = key
        (normal if az == bz and not any(k) else osc)[key] = c
    return normal, osc


def solve_hom_mixed(
    p: PhaseSymbol,
    omega,
    params: DiophantineParams,
    residual_tol: float = 1e-10,
    check_frequency: bool = True,
):
    """Solve {h0, chi} - omega.d_phi chi + p = avg-part for the isochronous well.

    Valid for l = 1 (V = x^2, period pi).  Monomials z^a zbar^b e^(i k.phi)
    diagonalize the operator with divisor i(omega.k - 2(a - b)); the invariant
    monomials (a = b, k = 0) form the right-hand side.  Returns
    (chi, normal_part, report); the exact-polynomial residual functional must
    come out below ``residual_tol`` times the input size or the solve fails.
    """
    omega = np.asarray(omega, dtype=float)
    if check_frequency and not is_diophantine_1(omega, params):
        raise ResonanceError(0, 0, (0,) * len(omega), 0.0, params.gamma)
    zt = to_z_terms(p)
    normal_z, osc_z = _znormal_split(zt)
    chi_z = {}
    for (az, bz, k), c in osc_z.items():
        div = float(np.dot(omega, k)) - 2.0 * (az - bz)
        knorm = sum(abs(u) for u in k)
        bound = params.gamma / (1.0 + knorm**params.tau)
        if abs(div) < bound:
            raise ResonanceError(az, bz, k, div, bound)
        chi_z[(az, bz, k)] = c / (1j * div)
    chi = from_z_terms(chi_z, p.n)
    chi.order = p.order
    normal = from_z_terms(normal_z, p.n)

    h0 = PhaseSymbol(p.n, {(2, 0, (0,) * p.n): 1.0, (0, 2, (0,) * p.n): 1.0})
    residual = poisson_bracket(h0, chi) - chi.dphi_omega(omega) + p - normal
    sup_in = max(p.sup_coeff(), 1e-300)
    if residual.sup_coeff() > residual_tol * sup_in:
        raise ResidualError(
            f"mixed homological residual {residual.sup_coeff():.3e} "
            f"exceeds {residual_tol * sup_in:.3e}"
        )
    return chi, normal, {"residual_sup": residual.sup_coeff()}


# ---------------------------------------------------------------------------
# symbol-level Lie transforms and the normal form
# ---------------------------------------------------------------------------


def lie_transform_symbol(
    f: PhaseSymbol, chi: PhaseSymbol, tol: float = 1e-18, max_terms: int = 60
):
    """Quantum Lie transform sum_k f_k / k! with f_k = {f_(k-1); chi}^q.

    Returns (result, truncation_report).  Each Moyal bracket is exact on
    polynomials; only the series in the number of nested brackets is
    truncated, with the first dropped term reported.
    """
    acc = f.copy()
    term = f
    scale = max(f.sup_coeff(), 1e-300)
    dropped = 0.0
    for k in range(1, max_terms + 1):
        term = moyal_bracket(term, chi)
        contrib = term.scale(1.0 / math.factorial(k))
        size = contrib.sup_coeff()
        if size <= tol * scale:
            dropped = size
            break
        acc = acc + contrib
    else:
        raise NonContractionError("symbol Lie series did not converge")
    return acc, {"truncation_sup": dropped, "terms_used": k}


def y_correction_symbol(chi: PhaseSymbol, omega, tol: float = 1e-18, max_terms: int = 60):
    """Series for the time-derivative correction of a symbol transform.

    y = sum_m ad^m(chi_dot) / (m+1)! with ad(g) = {g; chi}^q; leading term is
    chi_dot = omega . d_phi chi.
    """
    chidot = chi.dphi_omega(omega)
    acc = chidot.copy()
    term = chidot
    scale = max(chidot.sup_coeff(), 1e-300)
    for m in range(1, max_terms + 1):
        term = moyal_bracket(term, chi)
        contrib = term.scale(1.0 / math.factorial(m + 1))
        if contrib.sup_coeff() <= tol * scale:
            break
        acc = acc + contrib
    return acc


@dataclass
class NormalFormResult:
    z_profile: np.polynomial.Polynomial
    ztilde_profile: np.polynomial.Polynomial
    residual: PhaseSymbol | GridSymbol
    chain: list
    ledger: list = field(default_factory=list)
    achieved_order: float = math.inf


def _profile_from_znormal(normal_z: dict) -> np.polynomial.Polynomial:
    """Invariant z-monomials (a = a, k = 0) as a polynomial in E = h0."""
    deg = max((az for (az, _bz, _k) in normal_z), default=0)
    coeffs = np.zeros(deg + 1)
    for (az, _bz, _k), c in normal_z.items():
        coeffs[az] += float(np.real(complex(c)))
    return np.polynomial.Polynomial(coeffs)


def smoothing_normal_form(
    potential: PotentialSpec,
    W: PhaseSymbol,
    omega,
    eps: float,
    target_kappa: float,
    params: DiophantineParams,
    max_steps: int = 12,
    coeff_tol: float = 1e-14,
) -> NormalFormResult:
    """Iteratively remove the oscillating part of eps*W at symbol level.

    For l = 1 the polynomial route is exact: each step solves the mixed
    homological equation and transforms the full symbol through the Moyal-
    bracket Lie series.  For l > 1 a grid route alternates the flow solver
    and the torus solver, tracking declared orders in the ledger and keeping
    terms through second order in eps with the dropped order reported.
    """
    omega = np.asarray(omega, dtype=float)
    if potential.l == 1:
        return _normal_form_isochronous(
            W, omega, eps, target_kappa, params, max_steps, coeff_tol
        )
    return _normal_form_general(
        potential, W, omega, eps, target_kappa, params, max_steps
    )


def _normal_form_isochronous(W, omega, eps, target_kappa, params, max_steps, coeff_tol):
    n = W.n
    h0 = PhaseSymbol(n, {(2, 0, (0,) * n): 1.0, (0, 2, (0,) * n): 1.0}, order=2.0)
    Q = W.scale(eps)
    if Q.order is None:
        Q.order = Q.natural_order(1)
    beta = Q.order
    # coefficient dust from the coordinate changes is cut well below both the
    # stopping tolerance and the residual tolerances, relative to sup h0 = O(1)
    prune_floor = 1e-18 * max(1.0, Q.sup_coeff())
    z_fixed = None
    chain: list[PhaseSymbol] = []
    ledger: list[dict] = []
    order = beta
    for step in range(1, max_steps + 1):
        zt = to_z_terms(Q)
        normal_z, osc_z = _znormal_split(zt)
        if z_fixed is None:
            z_fixed = _profile_from_znormal(normal_z)
        osc = from_z_terms(osc_z, n)
        sup_osc = osc.sup_coeff()
        ledger.append(
            {
                "step": step,
                "generator_order": order,
                "residual_order": order,
                "sup_coeff": sup_osc,
            }
        )
        if sup_osc <= coeff_tol or order <= -target_kappa:
            break
        osc.order = order
        chi, _normal, _rep = solve_hom_mixed(
            osc, omega, params, check_frequency=(step == 1)
        )
        chi.prune(prune_floor)
        if chi.sup_coeff() > 0.1:
            raise NonContractionError(
                f"generator too large at step {step}: sup {chi.sup_coeff():.3e} > 0.1"
            )
        chain.append(chi)
        total, _rep = lie_transform_symbol(h0 + Q, chi)
        y = y_correction_symbol(chi, omega)
        Q = (total - y - h0).prune(prune_floor)
        # each removed order costs 2 - beta of decay for the isochronous well
        order = order - max(2.0 - beta, 0.5)
        Q.order = order
    zt = to_z_terms(Q)
    normal_z, osc_z = _znormal_split(zt)
    zt_total = _profile_from_znormal(normal_z)
    residual = from_z_terms(osc_z, n)
    residual.order = order
    return NormalFormResult(
        z_profile=z_fixed if z_fixed is not None else np.polynomial.Polynomial([0.0]),
        ztilde_profile=zt_total - (z_fixed if z_fixed is not None else 0.0),
        residual=residual,
        chain=chain,
        ledger=ledger,
        achieved_order=order,
    )


def _grid_poisson_fd(f: np.ndarray, g: np.ndarray, x: np.ndarray, xi: np.ndarray):
    """Finite-difference Poisson bracket of two lattice arrays."""
    dfx, dfxi = np.gradient(f, x, xi, edge_order=2)
    dgx, dgxi = np.gradient(g, x, xi, edge_order=2)
    return dfx * dgxi - dfxi * dgx


def _normal_form_general(potential, W, omega, eps, target_kappa, params, max_steps):
    l = potential.l
    n = W.n
    if W.order is None:
        W.order = W.natural_order(l)
    beta = W.order
    e_max = 8.0
    lattice = make_lattice(potential, e_max, nx=64, nxi=64)
    x, xi = lattice
    X, XI = np.meshgrid(x, xi, indexing="ij")
    h0_grid = XI**2 + potential.value(X)
    w0, _winf = cutoff_split(W.scale(eps), potential, lattice)
    w0.order = beta

    chain = []
    ledger = []
    z_profile = np.polynomial.Polynomial([0.0])
    zt_profile = np.polynomial.Polynomial([0.0])
    rem = w0
    order = beta
    first = True
    for step in range(1, max_steps + 1):
        sup = rem.sup()
        ledger.append(
            {
                "step": step,
                "generator_order": order - l + 1,
                "residual_order": order,
                "sup_coeff": sup,
            }
        )
        if order <= -target_kappa or sup <= 1e-14:
            break
        # flow step: remove the oscillating-along-orbits part of rem
        poly_rem = _grid_to_poly_proxy(rem)
        flow = solve_hom_flow(
            poly_rem,
            potential,
            e_window=(1.0, e_max),
            lattice=lattice,
            samples=1024,
            probes=24,
        )
        chain.append(flow.chi)
        avg = flow.average
        # torus step on the flow-invariant profile
        chi2, _rep = solve_hom_torus(avg, omega, params)
        chain.append(chi2)
        avg_bar = torus_average(avg)
        prof = _energy_profile(avg_bar, h0_grid, flow.mask)
        if first:
            z_profile = prof
            first = False
        else:
            zt_profile = zt_profile + prof
        # second-order remainder: brackets of the removed pieces with chi
        new_vals = {}
        for k, chiv in flow.chi.values.items():
            remv = rem.values.get(k, np.zeros_like(chiv))
            avgv = avg.values.get(k, np.zeros_like(chiv))
            br = _grid_poisson_fd(
                0.5 * np.real(remv + avgv), np.real(chiv), x, xi
            ) + 1j * _grid_poisson_fd(
                0.5 * np.imag(remv + avgv), np.real(chiv), x, xi
            )
            kw = float(np.dot(omega, k))
            new_vals[k] = br - 1j * kw * chiv
        rem = GridSymbol(n, x, xi, new_vals)
        order = max(order - (l - 1), 2 * order - 2 * l)
        rem.order = order
    return NormalFormResult(
        z_profile=z_profile,
        ztilde_profile=zt_profile,
        residual=rem,
        chain=chain,
        ledger=ledger,
        achieved_order=order,
    )


def _grid_to_poly_proxy(g: GridSymbol) -> PhaseSymbol:
    """Least-squares low-degree polynomial fit of a grid symbol, per mode.

    The general-degree pipeline only needs a smooth representative to feed
    the orbit solver; degree-4 fits keep that faithful at desk scale.
    """
    X, XI = np.meshgrid(g.x, g.xi, indexing="ij")
    powers = [(a, b) for a in range(5) for b in range(5) if a + b <= 4]
    cols = [(X**a * XI**b).ravel() for a, b in powers]
    A = np.stack(cols, axis=1)
    terms = {}
    for k, v in g.values.items():
        coef, *_ = np.linalg.lstsq(A, v.ravel(), rcond=None)
        for (a, b), c in zip(powers, coef):
            if abs(c) > 1e-12:
                terms[(a, b, k)] = terms.get((a, b, k), 0) + c
    return PhaseSymbol(g.n, terms, g.order)


def _energy_profile(avg_bar: GridSymbol, h0_grid: np.ndarray, mask: np.ndarray):
    zero = (0,) * avg_bar.n
    if zero not in avg_bar.values:
        return np.polynomial.Polynomial([0.0])
    vals = np.real(avg_bar.values[zero][mask])
    es = h0_grid[mask]
    deg = 3
    coeffs = np.polyfit(es, vals, deg)
    return np.polynomial.Polynomial(coeffs[::-1])

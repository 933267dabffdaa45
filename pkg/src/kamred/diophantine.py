"""Frequency-set machinery: Diophantine predicates, resonance widths, measures.

Multi-index size |k| is the l1 norm throughout.  Monte-Carlo sampling uses
counter-based Philox streams keyed by (seed, chunk), so results do not depend
on execution order or worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ValidationError

_CHUNK = 1 << 17


def worker_count() -> int:
    env = os.environ.get("KAMRED_THREADS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def gap_weight(m) -> float:
    """Clipped gap size max(1, |m|)."""
    return max(1.0, abs(float(m)))


@dataclass(frozen=True)
class FrequencyBox:
    """Frequency cube [1, 2]^n."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("need at least one frequency")

    def contains(self, omega) -> bool:
        omega = np.asarray(omega, dtype=float)
        return omega.shape == (self.n,) and bool(
            np.all(omega >= 1.0) and np.all(omega <= 2.0)
        )

    def center(self) -> np.ndarray:
        return np.full(self.n, 1.5)


@dataclass(frozen=True)
class DiophantineParams:
    gamma: float
    tau: float
    Kmax: int
    n: int = 1

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValidationError("gamma must be positive")
        if self.tau <= self.n - 1:
            raise ValidationError("need tau > n - 1")
        if self.Kmax < 1:
            raise ValidationError("Kmax must be >= 1")


@dataclass(frozen=True)
class ResonanceQuery:
    i: int
    j: int
    k: tuple
    d: float
    alpha: float

    def __post_init__(self):
        if abs(self.i - self.j) + sum(abs(c) for c in self.k) == 0:
            raise ValidationError("query needs |i - j| + |k| != 0")

    @property
    def gap(self) -> float:
        return gap_weight(self.i**self.d - self.j**self.d)


def _k_vectors(n: int, kmax: int, half: bool = True):
    """Integer vectors with 0 < |k|_1 <= kmax; one of each +-k pair if half."""
    out = []
    for k in product(range(-kmax, kmax + 1), repeat=n):
        s = sum(abs(c) for c in k)
        if s == 0 or s > kmax:
            continue
        if half:
            lead = next(c for c in k if c != 0)
            if lead < 0:
                continue
        out.append(k)
    return out


def is_diophantine_0(omega, params: DiophantineParams) -> bool:
    """|k . omega| >= gamma |k|^(-tau) for all 0 < |k|_1 <= Kmax."""
    omega = np.asarray(omega, dtype=float)
    for k in _k_vectors(len(omega), params.Kmax):
        knorm = sum(abs(c) for c in k)
        if abs(float(np.dot(omega, k))) < params.gamma * knorm ** (-params.tau):
            return False
    return True


def is_diophantine_1(omega, params: DiophantineParams) -> bool:
    """|omega . k + k0| >= gamma / (1 + |k|^tau) for integer k0 and 0 < |k|_1 <= Kmax.

    The k = 0 rows are vacuous for gamma <= 1 since nonzero integers have
    modulus >= 1; for each k only the nearest integer k0 = -round(omega . k)
    can violate the bound.
    """
    omega = np.asarray(omega, dtype=float)
    if params.gamma > 1.0:
        return False
    for k in _k_vectors(len(omega), params.Kmax):
        knorm = sum(abs(c) for c in k)
        val = float(np.dot(omega, k))
        dist = abs(val - round(val))
        if dist < params.gamma / (1.0 + knorm**params.tau):
            return False
    return True


def diophantine_margin(omega, params: DiophantineParams, shifted: bool = False) -> float:
    """Smallest slack min_k |divisor| / bound over the checked range (>= 1 iff accepted)."""
    omega = np.asarray(omega, dtype=float)
    worst = math.inf
    for k in _k_vectors(len(omega), params.Kmax):
        knorm = sum(abs(c) for c in k)
        val = float(np.dot(omega, k))
        if shifted:
            num = abs(val - round(val))
            den = params.gamma / (1.0 + knorm**params.tau)
        else:
            num = abs(val)
            den = params.gamma * knorm ** (-params.tau)
        worst = min(worst, num / den)
    return worst


def _margin_omega0(samples: np.ndarray, kvecs, tau: float) -> np.ndarray:
    m = np.full(samples.shape[0], np.inf)
    for k in kvecs:
        knorm = sum(abs(c) for c in k)
        val = np.abs(samples @ np.asarray(k, dtype=float))
        np.minimum(m, val * knorm**tau, out=m)
    return m


def _margin_omega1(samples: np.ndarray, kvecs, tau: float) -> np.ndarray:
    m = np.full(samples.shape[0], np.inf)
    for k in kvecs:
        knorm = sum(abs(c) for c in k)
        val = samples @ np.asarray(k, dtype=float)
        dist = np.abs(val - np.round(val))
        np.minimum(m, dist * (1.0 + knorm**tau), out=m)
    return m


def excluded_measure(
    params: DiophantineParams,
    predicate: str = "omega0",
    samples: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo fraction of [1,2]^n failing the Diophantine predicate.

    Returns (fraction, ci95) with the binomial 95% half-width.  gamma = 0 is
    allowed and gives fraction 0.
    """
    if samples < 1:
        raise ValidationError("need at least one sample")
    if predicate not in ("omega0", "omega1"):
        raise ValidationError("predicate must be 'omega0' or 'omega1'")
    n = params.n
    kvecs = _k_vectors(n, params.Kmax)
    margin_fn = _margin_omega0 if predicate == "omega0" else _margin_omega1

    n_chunks = (samples + _CHUNK - 1) // _CHUNK

    def count_chunk(c: int) -> int:
        size = min(_CHUNK, samples - c * _CHUNK)
        bg = np.random.Philox(key=np.array([seed, c], dtype=np.uint64))
        rng = np.random.Generator(bg)
        pts = 1.0 + rng.random((size, n))
        if params.gamma == 0.0:
            return 0
        return int(np.count_nonzero(margin_fn(pts, kvecs, params.tau) < params.gamma))

    workers = worker_count()
    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = sum(pool.map(count_chunk, range(n_chunks)))
    else:
        hits = sum(count_chunk(c) for c in range(n_chunks))
    frac = hits / samples
    ci95 = 1.96 * math.sqrt(max(frac * (1.0 - frac), 1.0 / samples) / samples)
    return frac, ci95


def excluded_fraction_curve(
    params: DiophantineParams,
    gammas,
    predicate: str = "omega0",
    samples: int = 100_000,
    seed: int = 0,
):
    """Excluded fractions for several gamma on one shared sample set.

    Uses the per-sample margin min_k |divisor| * (weight), so the fractions
    for different gamma are exactly coupled (same driving randomness).
    """
    n = params.n
    kvecs = _k_vectors(n, params.Kmax)
    margin_fn = _margin_omega0 if predicate == "omega0" else _margin_omega1
    gammas = np.asarray(list(gammas), dtype=float)
    hits = np.zeros(gammas.shape[0], dtype=np.int64)
    n_chunks = (samples + _CHUNK - 1) // _CHUNK
    for c in range(n_chunks):
        size = min(_CHUNK, samples - c * _CHUNK)
        bg = np.random.Philox(key=np.array([seed, c], dtype=np.uint64))
        rng = np.random.Generator(bg)
        pts = 1.0 + rng.random((size, n))
        m = margin_fn(pts, kvecs, params.tau)
        for i, g in enumerate(gammas):
            hits[i] += int(np.count_nonzero(m < g))
    fracs = hits / samples
    cis = 1.96 * np.sqrt(np.maximum(fracs * (1 - fracs), 1.0 / samples) / samples)
    return fracs, cis


@dataclass
class WidthReport:
    measured: float
    bound: float
    width_1d: float
    lipschitz_ok: bool
    lipschitz_quotient: float
    crossings: int


def resonance_width(
    lam,
    query: ResonanceQuery,
    box: FrequencyBox,
    k0_lambda: float,
    k1_lambda: float,
    sweep_points: int = 4096,
) -> WidthReport:
    """Measure the resonant set {|lambda_i - lambda_j + omega.k| < alpha * gap}.

    ``lam`` maps omega (shape (n,) or (m, n)) to the eigenvalue sequence.
    The sweep runs through the box center along v with v_i = sign(k_i)
    (+1 on zero components), the direction that maximizes k . v; the 1-D
    measure along the sweep is multiplied by the n^((n-1)/2) cross-section
    factor and compared against the bound 4 alpha / K0.
    """
    n = box.n
    k = np.asarray(query.k, dtype=float)
    if k.shape != (n,):
        raise ValidationError("k length must match the box dimension")
    v = np.where(k >= 0, 1.0, -1.0)
    center = box.center()
    # stay inside the box: each coordinate moves by r*v_i from 1.5
    r_lim = 0.5
    r = np.linspace(-r_lim, r_lim, sweep_points)
    omegas = center[None, :] + r[:, None] * v[None, :]
    lams = np.asarray(lam(omegas), dtype=float)
    s = lams[:, query.i - 1] - lams[:, query.j - 1] + omegas @ k
    thr = query.alpha * query.gap

    inside = np.abs(s) < thr
    # Lipschitz hypothesis on the eigenvalue differences along the sweep
    dl = np.abs(np.diff(lams[:, query.i - 1] - lams[:, query.j - 1]))
    domega = np.abs(np.diff(r)) * math.sqrt(n)
    quot = float(np.max(dl / domega)) if dl.size else 0.0
    gap_ij = abs(query.i**query.d - query.j**query.d)
    lipschitz_ok = (gap_ij == 0) or (quot <= k1_lambda * max(gap_ij, 1e-300) * 1.001)

    # refine each boundary crossing by bisection on |s| - thr
    def s_of(rv: float) -> float:
        om = center + rv * v
        la = np.asarray(lam(om[None, :]), dtype=float)[0]
        return la[query.i - 1] - la[query.j - 1] + float(om @ k)

    width_r = 0.0
    crossings = 0
    i0 = 0
    while i0 < sweep_points:
        if not inside[i0]:
            i0 += 1
            continue
        i1 = i0
        while i1 + 1 < sweep_points and inside[i1 + 1]:
            i1 += 1
        lo = r[i0] if i0 == 0 else _bisect_edge(s_of, r[i0 - 1], r[i0], thr)
        hi = r[i1] if i1 == sweep_points - 1 else _bisect_edge(s_of, r[i1 + 1], r[i1], thr)
        width_r += abs(hi - lo)
        crossings += 1
        i0 = i1 + 1

    cross_section = n ** ((n - 1) / 2.0)
    measured = width_r * cross_section
    bound = (4.0 * query.alpha / k0_lambda) * cross_section
    return WidthReport(
        measured=measured,
        bound=bound,
        width_1d=width_r,
        lipschitz_ok=lipschitz_ok,
        lipschitz_quotient=quot,
        crossings=crossings,
    )


def _bisect_edge(s_of, r_out: float, r_in: float, thr: float) -> float:
    """Root of |s(r)| = thr between an outside and an inside point."""
    f_out = abs(s_of(r_out)) - thr
    f_in = abs(s_of(r_in)) - thr
    if f_out * f_in > 0:
        return r_in
    for _ in range(60):
        mid = 0.5 * (r_out + r_in)
        if (abs(s_of(mid)) - thr) * f_out <= 0:
            r_in = mid
        else:
            r_out = mid
            f_out = abs(s_of(r_out)) - thr
    return 0.5 * (r_out + r_in)


def nonempty_implies_k_large(query: ResonanceQuery, k0_lambda: float) -> bool:
    """Necessary condition |k|_1 >= (K0/4) |i^d - j^d| for a nonempty resonant set."""
    knorm = sum(abs(c) for c in query.k)
    return knorm >= 0.25 * k0_lambda * abs(query.i**query.d - query.j**query.d)

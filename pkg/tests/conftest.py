"""Shared reference configurations for the test suite."""

import numpy as np
import pytest

from kamred.basis_spectra import SobolevFrame, harmonic_ladder
from kamred.kamcore import KamSchedule, QPOperator, resonant_web_family
from kamred.propagator import weyl_matrix_ladder

#: two-frequency vector sitting near the double resonance 2 omega_1 + ... = 4,
#: placed so every divisor in the reachable mode box clears its allowance at
#: gamma = 5e-3 while several channels stay within a small factor of it
REFERENCE_OMEGA2 = np.array([1.9905, 1.00675])
REFERENCE_GAMMA2 = 5e-3

GOLDEN = 1.6180339887498949


@pytest.fixture(scope="session")
def frame():
    return SobolevFrame(1.0, 0.0)


def reference_reduction_inputs(N=64, eps=1e-3, seed=42, wnorm=3.0):
    """Ladder + resonant-web configuration used by the contraction tests."""
    lam = harmonic_ladder(N)
    W = resonant_web_family(N, 2, seed=seed).scale(wnorm)
    schedule = KamSchedule(
        r=1.0,
        theta=0.5,
        gamma0=REFERENCE_GAMMA2,
        tau=2.5,
        d2=2.0,
        kbox=6,
        max_stages=9,
        tol=1e-14,
    )
    return lam, W.scale(eps), REFERENCE_OMEGA2, schedule


def deviation_run_inputs(N=64, eps=1e-3):
    """Ladder + x cos(phi) configuration for the deviation-law tests."""
    lam = harmonic_ladder(N)
    x = weyl_matrix_ladder(N, 1, 0).astype(complex)
    W = QPOperator(1, N, {(1,): 0.5 * x, (-1,): 0.5 * x})
    schedule = KamSchedule(
        r=0.5, theta=0.5, gamma0=0.05, tau=2.5, d2=2.0, kbox=6, max_stages=10, tol=1e-14
    )
    return lam, W, np.array([GOLDEN]), schedule, eps

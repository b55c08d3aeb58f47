"""Shared scenario builders for the test suite."""

import numpy as np

from eecoop.model import ScenarioConfig


def make_config(**over):
    """Small well-formed scenario (M=2, N=2, K=2) used across the tests."""
    base = dict(
        M=2, N=2, K=2, B=1.25e5, alpha0=1e5, T=1.0, p_max=20.0, eta=0.8,
        m=1.0,
        omega_h=np.ones((2, 2)), d_h=np.full((2, 2), 5.0),
        beta_h=np.full((2, 2), 3.0), N0_h=np.full((2, 2), 1e-9),
        omega_g=np.ones(2), d_g=np.full(2, 5.0),
        beta_g=np.full(2, 3.0), N0_g=np.full(2, 1e-9),
        arrivals=np.array([[2.0, 1.0], [1.0, 3.0]]),
        pr_out_0=0.05,
    )
    base.update(over)
    return ScenarioConfig(**base)


def solver_toy(M=2, N=2, K=2, pr_out_0=5e-2, eta=0.8, seed=7, m=1.0,
               arrival_lo=0.5, arrival_hi=6.0, p_max=20.0, Eu_0=None,
               d=5.0):
    """Feasible optimization toy: alpha0 = B gives unit SNR gap, so the
    per-link outage at one watt is roughly d**3 * 1e-4: 0.0125 at the
    default distance, smaller when d shrinks (used by tight-target toys)."""
    rng = np.random.default_rng(seed)
    arrivals = rng.uniform(arrival_lo, arrival_hi, size=(M, K))
    kw = {} if Eu_0 is None else {"Eu_0": np.asarray(Eu_0, dtype=float)}
    return ScenarioConfig(
        M=M, N=N, K=K, B=1e5, alpha0=1e5, T=1.0, p_max=p_max, eta=eta, m=m,
        omega_h=np.ones((M, N)), d_h=np.full((M, N), float(d)),
        beta_h=np.full((M, N), 3.0), N0_h=np.full((M, N), 1e-9),
        omega_g=np.ones(N), d_g=np.full(N, float(d)),
        beta_g=np.full(N, 3.0), N0_g=np.full(N, 1e-9),
        arrivals=arrivals, pr_out_0=pr_out_0, **kw)

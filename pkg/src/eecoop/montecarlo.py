"""Channel-realization simulation for validating the outage analysis.

Squared Nakagami-m envelopes are gamma variates, so each link draw is a
single ``Generator.gamma`` call and a link succeeds when the received
SNR clears the rate threshold:

    B * log2(1 + gain * d**(-beta) * p / (N0 * B)) >= alpha0
    <=>  gain * d**(-beta) * p >= (2**(alpha0 / B) - 1) * N0 * B

The simulator compares in the power domain (right-hand form), never
taking logs per trial.  A relay decodes when every first-hop link of the
period succeeds; the destination recovers all messages when at least M
relays both decoded and got their forward through.

Randomness is counter-based (Philox) and keyed by an explicit
(seed, stream_id) pair, so any draw sequence is reproducible and streams
with distinct ids are independent.  Multi-stream estimates aggregate
integer counts, which makes the split-across-workers result identical to
the sequential one under the same partitioning.
"""

import math
from dataclasses import dataclass

import numpy as np

from .model import ScenarioConfig, Policy, snr_gap, total_energy

_U64 = 2 ** 64
_Z95 = 1.959963984540054


@dataclass(frozen=True)
class RngSpec:
    """Reproducible random source: a 64-bit seed plus a stream id.

    Identical (seed, stream_id) pairs reproduce identical draw
    sequences; distinct stream ids give statistically independent
    streams for the same seed.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise ValueError(f"{name} must be an integer")
            if not 0 <= int(v) < _U64:
                raise ValueError(f"{name} must fit in 64 bits")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, offset: int) -> "RngSpec":
        return RngSpec(self.seed, (self.stream_id + offset) % _U64)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngSpec):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngSpec(int(rng)).generator()
    raise ValueError("rng must be a Generator, RngSpec, or integer seed")


def sample_channel_power_gain(omega, m, rng, size=None):
    """Draw squared channel envelopes for Nakagami-m fading.

    Returns gamma variates with shape m and scale omega / m, so the mean
    gain is omega and the variance omega**2 / m.  omega may be an array;
    it broadcasts against size.  rng may be a numpy Generator, an
    RngSpec, or a plain integer seed.
    """
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0.0):
        raise ValueError("omega must be > 0")
    m = float(m)
    if not m >= 0.5:
        raise ValueError(f"m must be >= 0.5, got {m}")
    gen = _as_generator(rng)
    return gen.gamma(shape=m, scale=omega / m, size=size)


@dataclass(frozen=True)
class TrialOutcome:
    """One simulated period: which relays decoded and which forwarded.

    decoded_set holds the relays that received every user message;
    forwarded_set the subset whose own link to the destination also
    succeeded.  The destination recovers all M messages iff at least M
    relays forwarded, the success flag.
    """

    decoded_set: tuple
    forwarded_set: tuple
    success: bool

    def __post_init__(self):
        if not set(self.forwarded_set) <= set(self.decoded_set):
            raise ValueError("forwarded_set must be a subset of decoded_set")


def _success_margins(config: ScenarioConfig, p_user, p_relay):
    """Per-link gain multipliers: a link succeeds iff gain * margin >= 1.

    margin = d**(-beta) * p / (gap * N0 * B), which keeps zero powers
    well defined (margin 0 never succeeds) without dividing by p.
    """
    p_user = np.asarray(p_user, dtype=float)
    p_relay = np.asarray(p_relay, dtype=float)
    if p_user.shape != (config.M,) or p_relay.shape != (config.N,):
        raise ValueError("expected per-period power vectors (M,) and (N,)")
    need = snr_gap(config) * config.B
    m_h = config.d_h ** (-config.beta_h) * p_user[:, None] / (
        need * config.N0_h)
    m_g = config.d_g ** (-config.beta_g) * p_relay / (need * config.N0_g)
    return m_h, m_g


def simulate_period(config: ScenarioConfig, p_user, p_relay,
                    rng) -> TrialOutcome:
    """Replay one period of the two-hop protocol on fresh channel draws.

    p_user and p_relay are the period's power vectors, shapes (M,) and
    (N,).  Draw order is fixed: all M*N first-hop gains, then all N
    second-hop gains, regardless of decode outcomes, so the stream
    position after a trial does not depend on the channel realization.
    """
    gen = _as_generator(rng)
    margin_h, margin_g = _success_margins(config, p_user, p_relay)
    gains_h = sample_channel_power_gain(config.omega_h, config.m, gen)
    gains_g = sample_channel_power_gain(config.omega_g, config.m, gen)
    decoded = np.all(gains_h * margin_h >= 1.0, axis=0)
    forwarded = decoded & (gains_g * margin_g >= 1.0)
    dec = tuple(int(j) for j in np.flatnonzero(decoded))
    fwd = tuple(int(j) for j in np.flatnonzero(forwarded))
    return TrialOutcome(decoded_set=dec, forwarded_set=fwd,
                        success=len(fwd) >= config.M)


def wilson_interval(count, n, z=_Z95):
    """Wilson score interval for a binomial proportion, vectorized."""
    count = np.asarray(count, dtype=float)
    n = float(n)
    phat = count / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2.0 * n)) / denom
    half = z * np.sqrt(phat * (1.0 - phat) / n
                       + z * z / (4.0 * n * n)) / denom
    # center - half is 0 (and center + half is 1) analytically at the
    # boundary counts; pin them so rounding noise cannot leak past
    lo = np.where(count == 0, 0.0, np.clip(center - half, 0.0, 1.0))
    hi = np.where(count == n, 1.0, np.clip(center + half, 0.0, 1.0))
    return lo, hi


@dataclass
class MonteCarloResult:
    """Empirical outage and efficiency estimates for a policy.

    Per-period arrays have length K.  outage_count and decode_count are
    exact integer tallies; ci_lo / ci_hi bound the outage probability at
    95% (Wilson).  ee divides the mean delivered bits per horizon by the
    policy's total energy.
    """

    trials: int
    streams: int
    pr_out: np.ndarray       # (K,) empirical outage probability
    ci_lo: np.ndarray        # (K,) Wilson 95% lower bound
    ci_hi: np.ndarray        # (K,) Wilson 95% upper bound
    outage_count: np.ndarray    # (K,) integer outage tallies
    decode_count: np.ndarray    # (K, N) integer per-relay decode tallies
    bits: float              # mean delivered bits per horizon realization
    e_tot: float             # total consumed energy of the policy, J
    ee: float                # bits / e_tot


def _tally_chunk(config, margins, gen, n, outage_count, decode_count):
    """Simulate n trials of every period, accumulating integer counts.

    Chunked counterpart of simulate_period: per period the draws are the
    (n, M, N) first-hop block then the (n, N) second-hop block.
    """
    M = config.M
    for k, (margin_h, margin_g) in enumerate(margins):
        gains_h = sample_channel_power_gain(config.omega_h, config.m, gen,
                                            size=(n, config.M, config.N))
        gains_g = sample_channel_power_gain(config.omega_g, config.m, gen,
                                            size=(n, config.N))
        decoded = np.all(gains_h * margin_h >= 1.0, axis=1)
        forwarded = decoded & (gains_g * margin_g >= 1.0)
        delivered = forwarded.sum(axis=1) >= M
        outage_count[k] += int(n - delivered.sum())
        decode_count[k] += decoded.sum(axis=0, dtype=np.int64)


def estimate_outage(config: ScenarioConfig, policy: Policy, trials, rng,
                    n_streams: int = 1,
                    chunk_size: int = 1 << 16) -> MonteCarloResult:
    """Estimate per-period outage and EE over repeated channel draws.

    rng may be an RngSpec, a plain integer seed, or a Generator (single
    stream only).  Trials are split across n_streams independent streams
    (ids rng.stream_id + 0 .. n_streams - 1, earlier streams take the
    remainder); since aggregation sums integer counts, running the
    streams in parallel workers reproduces this result exactly under the
    same partitioning.
    """
    trials = int(trials)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n_streams = int(n_streams)
    if n_streams < 1:
        raise ValueError("n_streams must be >= 1")
    if isinstance(rng, np.random.Generator):
        if n_streams != 1:
            raise ValueError("a bare Generator cannot be split; pass an "
                             "RngSpec to use multiple streams")
        streams = [rng]
    else:
        spec = rng if isinstance(rng, RngSpec) else RngSpec(int(rng))
        streams = [spec.stream(s).generator() for s in range(n_streams)]

    M, N, K = config.M, config.N, config.K
    margins = [_success_margins(config, policy.p_u[:, k], policy.p_r[:, k])
               for k in range(K)]
    outage_count = np.zeros(K, dtype=np.int64)
    decode_count = np.zeros((K, N), dtype=np.int64)
    base, rem = divmod(trials, n_streams)
    for s, gen in enumerate(streams):
        todo = base + (1 if s < rem else 0)
        while todo > 0:
            n = min(todo, int(chunk_size))
            _tally_chunk(config, margins, gen, n, outage_count, decode_count)
            todo -= n

    pr_out = outage_count / trials
    ci_lo, ci_hi = wilson_interval(outage_count, trials)
    bits = config.M * config.alpha0 * config.T * float(
        (trials - outage_count).sum()) / trials
    e_tot = total_energy(config, policy)
    ee = bits / e_tot if e_tot > 0 else math.inf
    return MonteCarloResult(trials=trials, streams=len(streams),
                            pr_out=pr_out, ci_lo=ci_lo, ci_hi=ci_hi,
                            outage_count=outage_count,
                            decode_count=decode_count,
                            bits=bits, e_tot=e_tot, ee=ee)

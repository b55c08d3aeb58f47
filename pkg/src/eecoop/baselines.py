"""Reference policies the optimizer is compared against.

Four cheap baselines (per-period depleted energy use, no inter-user
transfers, uniform power, decode-and-forward relaying without network
coding) and one expensive oracle: exhaustive grid search over transmit
powers with energy transfers completed greedily.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .model import (
    OUTAGE_AUDIT_RTOL,
    LinkCoefficients,
    Policy,
    ScenarioConfig,
    compute_link_coefficients,
    energy_efficiency,
    total_energy,
    validate_policy,
)
from .outage import (
    MonomialTable,
    network_outage_exact_batch,
    network_outage_report,
    per_link_outage_exact,
)
from .solver import SolveResult, SolverOptions, dinkelbach_optimize

BASELINE_KINDS = ("depleted_energy", "no_transfer", "uniform_power",
                  "nonc_df")


@dataclass
class PolicyEvaluation:
    """A policy together with its audited performance."""

    method: str
    status: str                  # ok | infeasible | audit_failed
    policy: Policy = None
    ee: float = None             # exact-outage energy efficiency, bits/J
    pr_out: np.ndarray = None    # exact outage used for the audit
    e_tot: float = None          # J
    feasible: bool = False
    extra: dict = field(default_factory=dict)


def as_evaluation(method: str, res: SolveResult) -> PolicyEvaluation:
    """Flatten a SolveResult into the common comparison record."""
    if res.status == "infeasible":
        return PolicyEvaluation(method=method, status="infeasible",
                                extra={"binding_class": res.binding_class})
    pr = None
    if res.outage_exact is not None:
        pr = np.atleast_1d(res.outage_exact.pr_out)
    return PolicyEvaluation(
        method=method,
        status="ok" if res.feasible else "audit_failed",
        policy=res.policy, ee=res.ee_exact, pr_out=pr, e_tot=res.e_tot,
        feasible=res.feasible,
        extra={"q_star": res.q_star, "solver_status": res.status,
               "outer_iterations": len(res.trace)})


def no_transfer_policy(config: ScenarioConfig,
                       options: SolverOptions = None) -> SolveResult:
    """Optimized powers with inter-user energy transfer disabled."""
    return dinkelbach_optimize(config, options, transfers=False)


def depleted_energy_policy(config: ScenarioConfig,
                           options: SolverOptions = None,
                           allow_transfers: bool = False) -> SolveResult:
    """Users spend each period exactly what that period provides.

    Per-period consumption is pinned to the per-period harvest, so no
    energy is banked between periods and, by default, none moves between
    users either; relay powers are still optimized.  The gap between this
    baseline and the transfer-free optimum then isolates the value of
    scheduling energy across periods.  With ``allow_transfers=True`` the
    pinned budgets may additionally be reshaped by optimized inter-user
    transfers.
    """
    return dinkelbach_optimize(config, options, depleted=True,
                               transfers=allow_transfers)


def uniform_power_policy(config: ScenarioConfig, relay_powers_from=None,
                         options: SolverOptions = None) -> PolicyEvaluation:
    """Every user transmits the horizon-average power in every period.

    The level spreads the total harvested arrivals over all user slots
    (capped at the power ceiling) and is made causal, where possible, by
    just-in-time transfers from users in surplus; the initial battery is
    the only slack that can pay for transfer losses.  Relay powers are not
    re-derived: they come from a reference optimized solve unless given.
    The outage target plays no role in the construction; the realized
    outage is reported as-is.
    """
    M, K, T = config.M, config.K, config.T
    level = min(float(config.arrivals.sum()) / (M * K * T), config.p_max)
    if relay_powers_from is None:
        relay_powers_from = dinkelbach_optimize(config, options)
    if isinstance(relay_powers_from, SolveResult):
        if relay_powers_from.status == "infeasible":
            return PolicyEvaluation(
                method="uniform_power", status="infeasible",
                extra={"binding_class": relay_powers_from.binding_class,
                       "reason": "reference solve infeasible"})
        relay_powers = relay_powers_from.policy.p_r
    elif isinstance(relay_powers_from, Policy):
        relay_powers = relay_powers_from.p_r
    else:
        relay_powers = relay_powers_from
    relay_powers = np.asarray(relay_powers, dtype=float)
    if relay_powers.shape != (config.N, K):
        raise ValueError("relay powers must have shape (N, K)")

    p_u = np.full((M, K), level)
    transfers = _just_in_time_transfers(config, p_u)
    if transfers is None:
        return PolicyEvaluation(method="uniform_power", status="infeasible",
                                extra={"binding_class": "causality",
                                       "reason": "deficits not coverable",
                                       "level": level})
    policy = Policy(p_u=p_u, p_r=relay_powers.copy(), transfers=transfers)
    report = validate_policy(config, policy, check_outage=False)
    outage = network_outage_report(config, policy, mode="exact")
    ee = energy_efficiency(config, policy, outage.pr_out)
    limit = config.pr_out_0 * (1.0 + OUTAGE_AUDIT_RTOL)
    return PolicyEvaluation(
        method="uniform_power",
        status="ok" if report.feasible else "audit_failed",
        policy=policy, ee=ee, pr_out=outage.pr_out,
        e_tot=total_energy(config, policy), feasible=report.feasible,
        extra={"level": level,
               "outage_ok": bool(np.all(outage.pr_out <= limit))})


def _just_in_time_transfers(config: ScenarioConfig, p_u: np.ndarray):
    """Cover per-period deficits with transfers from users in surplus.

    Works period by period: each user short of energy pulls the missing
    amount (scaled by 1/eta) from donors in index order, donors keeping
    enough for their own transmission.  Deficits are met the moment they
    occur, which wastes no energy on transfers that later turn out to be
    unnecessary.  Returns the (K, M, M) transfer array, or None when some
    deficit cannot be covered.
    """
    M, K, T = config.M, config.K, config.T
    eta = config.eta
    battery = config.Eu_0.astype(float).copy()
    transfers = np.zeros((K, M, M))
    for k in range(K):
        battery += config.arrivals[:, k]
        need = p_u[:, k] * T
        for i in range(M):
            deficit = need[i] - battery[i]
            if deficit <= 1e-15:
                continue
            for j in range(M):
                if j == i or deficit <= 1e-15:
                    continue
                spare = battery[j] - need[j]
                if spare <= 0.0:
                    continue
                draw = min(spare, deficit / eta)
                transfers[k, j, i] += draw
                battery[j] -= draw
                battery[i] += eta * draw
                deficit = need[i] - battery[i]
            if deficit > 1e-12:
                return None
        battery -= need
        battery = np.maximum(battery, 0.0)  # wash out rounding dust
    return transfers


# ---------------------------------------------------------------------------
# decode-and-forward relaying without network coding


def relay_assignment(M: int, N: int):
    """Round-robin partition of the N relays among the M users.

    Without network coding a relay transmission carries one user's message,
    so the N second-hop slots are divided among the users: relay j serves
    user j mod M.  Requires N >= M so every user has at least one relay.
    """
    if N < M:
        raise ValueError(f"plain relaying needs at least one relay per "
                         f"user, got N={N} < M={M}")
    return [[j for j in range(N) if j % M == i] for i in range(M)]


def build_per_user_tables(coeffs: LinkCoefficients, M: int, N: int):
    """Posynomial upper bounds on per-user outage without network coding.

    Message i is lost when it fails through every relay assigned to user
    i: relay j fails it when it cannot decode (c_ij * p_i**-m) or its
    forwarding transmission fails (c_j * q_j**-m).  The product over the
    assigned relays expands into 2**|assigned| monomials per user;
    identical exponent patterns are merged.
    """
    tables = []
    for i, assigned in enumerate(relay_assignment(M, N)):
        rows = {}
        for decode_fails in product([True, False], repeat=len(assigned)):
            coef = 1.0
            u_cnt = [0] * M
            r_cnt = [0] * N
            for j, failed in zip(assigned, decode_fails):
                if failed:
                    coef *= coeffs.c_u[i, j]
                    u_cnt[i] += 1
                else:
                    coef *= coeffs.c_r[j]
                    r_cnt[j] += 1
            key = tuple(u_cnt) + tuple(r_cnt)
            rows[key] = rows.get(key, 0.0) + coef
        keys = sorted(rows)
        coef = np.array([rows[k] for k in keys])
        w = -coeffs.m * np.array(keys, dtype=float)
        tables.append(MonomialTable(coef=coef, w=w, M=M, N=N, m=coeffs.m))
    return tables


def per_user_outage_exact(config: ScenarioConfig, policy: Policy):
    """Exact per-user outage, shape (M, K), for per-message DF relaying.

    User i's message is lost in a period iff every relay assigned to user
    i either fails to decode it or fails its forwarding slot.
    """
    rep = network_outage_report(config, policy, mode="exact")
    pe_u, pe_r = rep.pe_user, rep.pe_relay   # (M, N, K), (N, K)
    out = np.empty((config.M, config.K))
    for i, assigned in enumerate(relay_assignment(config.M, config.N)):
        fail = pe_u[i, assigned, :] \
            + (1.0 - pe_u[i, assigned, :]) * pe_r[assigned, :]
        out[i] = np.prod(fail, axis=0)
    return out


@dataclass
class PerUserOutageReport:
    """Exact per-user outage of the non-coded protocol, shape (M, K)."""

    pr_out: np.ndarray


def _nonc_audit(config: ScenarioConfig, policy: Policy):
    feas = validate_policy(config, policy, check_outage=False)
    out = per_user_outage_exact(config, policy)
    limit = config.pr_out_0 * (1.0 + OUTAGE_AUDIT_RTOL)
    over = float(np.max(out - limit, initial=0.0))
    if over > 0.0:
        feas.worst["outage"] = over
        feas.feasible = False
        feas.messages.append(f"per-user outage exceeds target by {over:.3e}")
    e_tot = total_energy(config, policy)
    bits = config.alpha0 * config.T * float((1.0 - out).sum())
    return feas, PerUserOutageReport(pr_out=out), bits / e_tot


def nonc_df_policy(config: ScenarioConfig,
                   options: SolverOptions = None) -> SolveResult:
    """Energy-efficiency optimum of plain decode-and-forward relaying.

    Without network coding a relay transmission carries a single user's
    message, so the second-hop slots are partitioned among the users
    (relay_assignment) and the outage target applies to every user
    separately.  Channel uses and energy slots match the network-coded
    protocol: every relay still transmits once per period.  The returned
    result's outage report carries the per-user outage matrix.
    """
    coeffs = compute_link_coefficients(config)
    tables = build_per_user_tables(coeffs, config.M, config.N)
    return dinkelbach_optimize(
        config, options, tables_weights=(tables, [1.0] * config.M),
        audit=_nonc_audit)


# ---------------------------------------------------------------------------
# brute-force grid oracle


@dataclass
class GridSpec:
    """Search controls for the exhaustive oracle."""

    points_per_dim: int = None   # default: sized to keep a round ~2e6 cells
    refine_rounds: int = 4
    shrink: float = 0.15         # log-range contraction per refinement
    p_floor: float = 1e-3        # W, lower edge of the first round
    cell_budget: float = 2e6     # target mesh size for the default sizing


@dataclass
class BruteForceResult:
    """Best feasible grid point and search bookkeeping."""

    status: str                  # ok | infeasible
    policy: Policy = None
    ee: float = None
    pr_out: np.ndarray = None
    evaluations: int = 0
    feasible: bool = False


def _per_link_pe_grids(config: ScenarioConfig, user_grids, relay_grids):
    """Exact per-link outage along each grid axis.

    Returns pe_u[(i, k)] with shape (N, npts) on user i's period-k grid and
    pe_r[(j, k)] with shape (npts,) on relay j's period-k grid.
    """
    M, N, K = config.M, config.N, config.K
    pe_u = {}
    for i in range(M):
        for k in range(K):
            g = user_grids[i][k]
            pe_u[(i, k)] = np.stack([
                np.array([per_link_outage_exact(
                    float(p), m=config.m, alpha0=config.alpha0, B=config.B,
                    N0=config.N0_h[i, j], d=config.d_h[i, j],
                    beta=config.beta_h[i, j], omega=config.omega_h[i, j])
                    for p in g]) for j in range(N)])
    pe_r = {}
    for j in range(N):
        for k in range(K):
            g = relay_grids[j][k]
            pe_r[(j, k)] = np.array([per_link_outage_exact(
                float(p), m=config.m, alpha0=config.alpha0, B=config.B,
                N0=config.N0_g[j], d=config.d_g[j], beta=config.beta_g[j],
                omega=config.omega_g[j]) for p in g])
    return pe_u, pe_r


def _completion_loss_grid(config: ScenarioConfig, user_grids):
    """Vectorized just-in-time completion over the user-power mesh.

    Returns (feasible mask, transfer loss in J), each shaped as the outer
    product of the per-(user, period) grids, axes ordered user-major.
    """
    M, K, T = config.M, config.K, config.T
    eta = config.eta
    dims = [len(user_grids[i][k]) for i in range(M) for k in range(K)]
    shape = tuple(dims)

    def axis_view(i, k, arr):
        view = [1] * (M * K)
        view[i * K + k] = arr.shape[0]
        return arr.reshape(view)

    battery = [np.zeros(()) + config.Eu_0[i] for i in range(M)]
    feasible = np.ones((), dtype=bool)
    loss = np.zeros(())
    for k in range(K):
        need = []
        for i in range(M):
            battery[i] = battery[i] + config.arrivals[i, k]
            need.append(axis_view(i, k, user_grids[i][k] * T))
        for i in range(M):
            deficit = np.maximum(need[i] - battery[i], 0.0)
            for j in range(M):
                if j == i:
                    continue
                spare = np.maximum(battery[j] - need[j], 0.0)
                draw = np.minimum(spare, deficit / eta)
                battery[j] = battery[j] - draw
                battery[i] = battery[i] + eta * draw
                loss = loss + (1.0 - eta) * draw
                deficit = np.maximum(need[i] - battery[i], 0.0)
            feasible = feasible & (deficit <= 1e-12)
        for i in range(M):
            battery[i] = np.maximum(battery[i] - need[i], 0.0)
    feasible = np.broadcast_to(feasible, shape)
    loss = np.broadcast_to(loss, shape)
    return feasible, loss


def grid_dimension_guard(config: ScenarioConfig) -> int:
    """Nominal search dimension count; must stay at or below eight.

    Counts the power dimensions plus the net transfer schedule dimensions
    that the greedy completion replaces.
    """
    M, N, K = config.M, config.N, config.K
    return (M - 1) ** 2 * K + M * K + N * K


def brute_force_optimize(config: ScenarioConfig, grid: GridSpec = None,
                         enforce_outage: bool = True) -> BruteForceResult:
    """Exhaustive search over log-spaced power grids with refinement.

    Grids cover every (user, period) and (relay, period) power; inter-user
    transfers are not gridded but completed greedily (just-in-time, which
    is loss-optimal for two users).  Exact outage is used throughout.
    Each refinement round contracts every axis range around the incumbent.
    """
    grid = grid or GridSpec()
    M, N, K, T = config.M, config.N, config.K, config.T
    if grid_dimension_guard(config) > 8:
        raise ValueError(
            f"brute force limited to 8 nominal search dimensions, got "
            f"{grid_dimension_guard(config)}")
    ndim = (M + N) * K
    npts = grid.points_per_dim
    if npts is None:
        npts = max(4, min(64, int(round(grid.cell_budget ** (1.0 / ndim)))))

    lo_u = np.full((M, K), grid.p_floor)
    hi_u = np.full((M, K), config.p_max)
    lo_r = np.full((N, K), grid.p_floor)
    hi_r = np.full((N, K), config.p_max)

    def user_axis(i, k):
        return i * K + k

    def relay_axis(j, k):
        return M * K + j * K + k

    def on_axis(arr, ax):
        view = [1] * ndim
        view[ax] = arr.shape[-1]
        return arr.reshape(view)

    best = None
    best_ee = -np.inf
    evaluations = 0
    for _round in range(grid.refine_rounds):
        user_grids = [[np.exp(np.linspace(math.log(lo_u[i, k]),
                                          math.log(hi_u[i, k]), npts))
                       for k in range(K)] for i in range(M)]
        relay_grids = [[np.exp(np.linspace(math.log(lo_r[j, k]),
                                           math.log(hi_r[j, k]), npts))
                        for k in range(K)] for j in range(N)]
        pe_u, pe_r = _per_link_pe_grids(config, user_grids, relay_grids)

        shape = (npts,) * ndim
        evaluations += int(np.prod(shape))

        bits = np.zeros(())
        out_ok = np.ones((), dtype=bool)
        for k in range(K):
            rho_list = []
            per_list = []
            for j in range(N):
                rho_j = np.ones(())
                for i in range(M):
                    rho_j = rho_j * on_axis(1.0 - pe_u[(i, k)][j],
                                            user_axis(i, k))
                rho_list.append(np.broadcast_to(rho_j, shape))
                per_list.append(np.broadcast_to(
                    on_axis(pe_r[(j, k)], relay_axis(j, k)), shape))
            out_k = network_outage_exact_batch(
                np.stack(rho_list, axis=-1), np.stack(per_list, axis=-1), M)
            bits = bits + config.alpha0 * T * M * (1.0 - out_k)
            if enforce_outage:
                out_ok = out_ok & (out_k <= config.pr_out_0
                                   * (1.0 + OUTAGE_AUDIT_RTOL))

        energy = np.zeros(())
        for i in range(M):
            for k in range(K):
                energy = energy + on_axis(user_grids[i][k] * T,
                                          user_axis(i, k))
        for j in range(N):
            for k in range(K):
                energy = energy + on_axis(relay_grids[j][k] * T,
                                          relay_axis(j, k))
        causal_ok, loss = _completion_loss_grid(config, user_grids)
        lift = tuple([slice(None)] * (M * K) + [None] * (N * K))
        energy = energy + loss[lift]
        mask = np.broadcast_to(causal_ok[lift], shape) \
            & np.broadcast_to(out_ok, shape)

        ee = np.where(mask, bits / energy, -np.inf)
        idx = int(np.argmax(ee))
        if not np.isfinite(ee.flat[idx]):
            continue  # nothing feasible on this mesh; keep the same range
        multi = np.unravel_index(idx, shape)
        cand_pu = np.array([[user_grids[i][k][multi[user_axis(i, k)]]
                             for k in range(K)] for i in range(M)])
        cand_pr = np.array([[relay_grids[j][k][multi[relay_axis(j, k)]]
                             for k in range(K)] for j in range(N)])
        if ee.flat[idx] > best_ee:
            best_ee = float(ee.flat[idx])
            best = (cand_pu, cand_pr)

        for i in range(M):
            for k in range(K):
                width = (math.log(hi_u[i, k]) - math.log(lo_u[i, k])) \
                    * grid.shrink
                c = math.log(best[0][i, k])
                lo_u[i, k] = max(grid.p_floor * 1e-3,
                                 math.exp(c - width / 2))
                hi_u[i, k] = min(config.p_max, math.exp(c + width / 2))
        for j in range(N):
            for k in range(K):
                width = (math.log(hi_r[j, k]) - math.log(lo_r[j, k])) \
                    * grid.shrink
                c = math.log(best[1][j, k])
                lo_r[j, k] = max(grid.p_floor * 1e-3,
                                 math.exp(c - width / 2))
                hi_r[j, k] = min(config.p_max, math.exp(c + width / 2))

    if best is None:
        return BruteForceResult(status="infeasible", evaluations=evaluations)
    p_u, p_r = best
    transfers = _just_in_time_transfers(config, p_u)
    if transfers is None:  # cannot happen: the mesh marked this point causal
        return BruteForceResult(status="infeasible", evaluations=evaluations)
    policy = Policy(p_u=p_u, p_r=p_r, transfers=transfers)
    rep = network_outage_report(config, policy, mode="exact")
    ee = energy_efficiency(config, policy, rep.pr_out)
    return BruteForceResult(status="ok", policy=policy, ee=ee,
                            pr_out=rep.pr_out, evaluations=evaluations,
                            feasible=True)

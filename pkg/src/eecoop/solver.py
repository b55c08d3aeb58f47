"""Energy-efficiency maximization by fractional programming.

The optimizer maximizes delivered-bits-per-joule over user powers, relay
powers and inter-user energy transfers.  Powers enter through their
logarithms, which turns every outage posynomial into a convex sum of
exponentials; transfers stay linear.  The outer loop is the classic
parametric (Dinkelbach) iteration on q = bits / joule; each inner problem

    minimize  sum_k per-period-outage-bits + q * total-energy
    s.t.      cumulative energy causality per user
              power box constraints, transfer bounds
              approximate outage <= target per period

is convex and solved with a log-barrier interior-point method using damped
Newton steps and a dense Cholesky factorization.  Solutions are audited
against the exact outage expression afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .model import (
    P_MIN,
    TOL_FEAS,
    LinkCoefficients,
    Policy,
    ScenarioConfig,
    compute_link_coefficients,
    energy_ledger,
    total_energy,
    validate_policy,
)
from .outage import MonomialTable, network_outage_report, outage_tables

INF = float("inf")


class InfeasibleError(Exception):
    """Raised when phase 1 certifies the constraint set has no interior."""

    def __init__(self, binding_class: str, detail: str = ""):
        self.binding_class = binding_class
        self.detail = detail
        super().__init__(f"infeasible ({binding_class}) {detail}".strip())


@dataclass
class SolverOptions:
    """Tolerances and loop limits for the fractional-programming solver."""

    q_tol: float = None        # |numerator - q*denominator| stop, bits;
                               # defaults to 1e-6 * M * K * alpha0 * T
    max_outer: int = 50        # Dinkelbach iterations
    kkt_tol: float = 1e-6      # duality-gap target of the barrier method
    barrier_mu: float = 10.0   # barrier parameter growth factor
    newton_tol: float = 1e-9   # half squared Newton decrement per stage
    max_newton: int = 80       # Newton iterations per barrier stage
    t0: float = 1.0            # initial barrier parameter
    p_min: float = P_MIN       # smallest representable power, W
    max_retries: int = 3       # internal threshold shrinks after audit fail
    phase1_margin: float = 1e-3  # scaled strict-feasibility margin

    def q_tol_abs(self, config: ScenarioConfig) -> float:
        if self.q_tol is not None:
            return self.q_tol
        return 1e-6 * config.M * config.K * config.alpha0 * config.T


@dataclass
class Layout:
    """Flat variable vector: [user log powers, relay log powers, transfers].

    Transfers are indexed by ordered user pairs (i, j), i != j, period-major
    inside each pair.  The depleted variant eliminates user powers, so the
    user block may be absent.
    """

    M: int
    N: int
    K: int
    with_users: bool
    with_transfers: bool

    def __post_init__(self):
        M, N, K = self.M, self.N, self.K
        self.pairs = [(i, j) for i in range(M) for j in range(M) if i != j]
        off = 0
        if self.with_users:
            self.user_idx = off + np.arange(M * K).reshape(M, K)
            off += M * K
        else:
            self.user_idx = None
        self.relay_idx = off + np.arange(N * K).reshape(N, K)
        off += N * K
        if self.with_transfers:
            self.pair_idx = {}
            for p, (i, j) in enumerate(self.pairs):
                self.pair_idx[(i, j)] = off + np.arange(K) + p * K
            off += len(self.pairs) * K
        else:
            self.pair_idx = {}
        self.dim = off

    def transfer_array(self, z) -> np.ndarray:
        E = np.zeros((self.K, self.M, self.M))
        for (i, j), idx in self.pair_idx.items():
            E[:, i, j] = z[idx]
        return E

    def pack_transfers(self, E, z) -> None:
        for (i, j), idx in self.pair_idx.items():
            z[idx] = E[:, i, j]


def transform_policy(policy: Policy, p_min: float = P_MIN):
    """Log-power coordinates of a policy: (x_tilde, transfers).

    x_tilde stacks user rows then relay rows, shape (M+N, K).  Requires all
    powers >= p_min; a switched-off relay cannot be represented in log
    coordinates.
    """
    if np.any(policy.p_u < p_min) or np.any(policy.p_r < p_min):
        raise ValueError(f"all powers must be >= {p_min} to take logs")
    x = np.log(np.vstack([policy.p_u, policy.p_r]))
    return x, policy.transfers.copy()


def inverse_transform_policy(x_tilde, transfers, M: int) -> Policy:
    """Inverse of transform_policy."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    p = np.exp(x_tilde)
    return Policy(p_u=p[:M], p_r=p[M:], transfers=np.array(transfers))


# ---------------------------------------------------------------------------
# constraint blocks
#
# Every inequality is written g(z) <= 0.  In phase 1 a block marked soft is
# relaxed to g(z) <= s * sigma with a shared slack variable s appended to z;
# the barrier denominator is then (s * sigma - g) instead of (-g).


def _denom(g, soft):
    if soft is None:
        return -g
    s_val, _s_idx, sigma = soft
    return s_val * sigma - g


class Bounds:
    """Hard one-sided bounds sign * z[idx] - b <= 0 with diagonal barriers."""

    def __init__(self, idx, sign, b):
        self.idx = np.asarray(idx, dtype=int)
        self.sign = np.asarray(sign, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.n = self.idx.size
        self.soft_class = None

    def values(self, z):
        return self.sign * z[self.idx] - self.b

    def phi(self, z, soft=None):
        denom = -self.values(z)
        if np.any(denom <= 0.0):
            return INF
        return -float(np.sum(np.log(denom)))

    def barrier(self, z, grad, H, soft=None):
        denom = -self.values(z)
        if np.any(denom <= 0.0):
            return INF
        np.add.at(grad, self.idx, self.sign / denom)
        np.add.at(H, (self.idx, self.idx), 1.0 / denom ** 2)
        return -float(np.sum(np.log(denom)))


class LinearCons:
    """Rows of vals @ z[cols] - rhs <= 0."""

    def __init__(self, rows, soft_class=None):
        # rows: list of (cols array, vals array, rhs)
        self.rows = [(np.asarray(c, dtype=int), np.asarray(v, dtype=float),
                      float(r)) for c, v, r in rows]
        self.n = len(self.rows)
        self.soft_class = soft_class

    def values(self, z):
        return np.array([v @ z[c] - r for c, v, r in self.rows])

    def phi(self, z, soft=None):
        acc = 0.0
        for c, v, r in self.rows:
            d = _denom(v @ z[c] - r, soft)
            if d <= 0.0:
                return INF
            acc -= math.log(d)
        return acc

    def barrier(self, z, grad, H, soft=None):
        acc = 0.0
        for c, v, r in self.rows:
            d = _denom(v @ z[c] - r, soft)
            if d <= 0.0:
                return INF
            acc -= math.log(d)
            if soft is None:
                cols, vals = c, v
            else:
                cols = np.append(c, soft[1])
                vals = np.append(v, -soft[2])
            grad[cols] += vals / d
            H[np.ix_(cols, cols)] += np.outer(vals, vals) / d ** 2
        return acc


class CausalityCons:
    """Cumulative energy causality, one row per (user, period).

    g = sum coef_t * exp(z[exp_idx_t]) + lin_vals @ z[lin_cols] - rhs <= 0
    """

    def __init__(self, rows, soft_class=None):
        self.rows = [(np.asarray(ei, dtype=int), np.asarray(ec, dtype=float),
                      np.asarray(lc, dtype=int), np.asarray(lv, dtype=float),
                      float(r)) for ei, ec, lc, lv, r in rows]
        self.n = len(self.rows)
        self.soft_class = soft_class

    def _g_parts(self, z, row):
        ei, ec, lc, lv, rhs = row
        with np.errstate(over="ignore"):
            e = ec * np.exp(z[ei])
        lin = lv @ z[lc] if lc.size else 0.0
        return float(e.sum() + lin - rhs), e

    def values(self, z):
        return np.array([self._g_parts(z, row)[0] for row in self.rows])

    def phi(self, z, soft=None):
        acc = 0.0
        for row in self.rows:
            g, _ = self._g_parts(z, row)
            d = _denom(g, soft)
            if not d > 0.0:
                return INF
            acc -= math.log(d)
        return acc

    def barrier(self, z, grad, H, soft=None):
        acc = 0.0
        for row in self.rows:
            ei, ec, lc, lv, rhs = row
            g, e = self._g_parts(z, row)
            d = _denom(g, soft)
            if not d > 0.0:
                return INF
            acc -= math.log(d)
            cols = np.concatenate([ei, lc])
            vals = np.concatenate([e, lv])
            if soft is not None:
                cols = np.append(cols, soft[1])
                vals = np.append(vals, -soft[2])
            grad[cols] += vals / d
            H[np.ix_(cols, cols)] += np.outer(vals, vals) / d ** 2
            # curvature of g itself: diag(e) on the exp part
            H[ei, ei] += e / d
        return acc


def _coords_eval(coords, z):
    """Local log-power vector and jacobian data for a period.

    coords entries: ('v', global_index) for a plain variable, or
    ('a', cols, vals, c0) for log(c0 + vals @ z[cols]) affine-log
    coordinates (eliminated user powers).  Returns (x, jac, curv) or
    (None, None, None) when an affine argument is non-positive.
    """
    L = len(coords)
    x = np.empty(L)
    jac = []
    curv = []
    for d, c in enumerate(coords):
        if c[0] == "v":
            x[d] = z[c[1]]
            jac.append((np.array([c[1]]), np.array([1.0])))
            curv.append(None)
        else:
            _, cols, vals, c0 = c
            aff = c0 + vals @ z[cols]
            if not aff > 0.0:
                return None, None, None
            x[d] = math.log(aff)
            jac.append((cols, vals / aff))
            curv.append((cols, -np.outer(vals, vals) / aff ** 2))
    return x, jac, curv


def _table_eval(table, coords, z, memo, order):
    """Table value (order 0) or (value, local grad, local hess) at z."""
    key = (id(table), id(coords), order)
    if key in memo:
        return memo[key]
    x, jac, curv = _coords_eval(coords, z)
    if x is None:
        memo[key] = None
        return None
    if order == 0:
        out = (float(table.value(x)),)
    else:
        v, g, Hl = table.value_grad_hess(x)
        out = (v, g, Hl, jac, curv)
    memo[key] = out
    return out


def _push_local_hess(g_loc, H_loc, jac, curv, weight, H):
    """Accumulate weight * pullback Hessian into H.

    Pullback of a local Hessian through the coordinate map, plus the
    coordinate curvature weighted by the local gradient.  The pulled-back
    gradient itself is handled by the callers via _sparse_grad.
    """
    L = len(jac)
    for d in range(L):
        cols_d, vals_d = jac[d]
        if curv[d] is not None:
            cc, cm = curv[d]
            H[np.ix_(cc, cc)] += weight * g_loc[d] * cm
        for e in range(L):
            cols_e, vals_e = jac[e]
            H[np.ix_(cols_d, cols_e)] += (weight * H_loc[d, e]) * np.outer(
                vals_d, vals_e)


def _sparse_grad(g_loc, jac):
    """Combined sparse gradient of the posynomial: (unique cols, vals).

    Different local coordinates may touch the same variable (two budgets
    share each transfer), so duplicates are merged before callers use the
    result in fancy-indexed accumulation.
    """
    parts_c = []
    parts_v = []
    for d in range(len(jac)):
        cols_d, vals_d = jac[d]
        parts_c.append(cols_d)
        parts_v.append(g_loc[d] * vals_d)
    cols = np.concatenate(parts_c)
    vals = np.concatenate(parts_v)
    ucols, inverse = np.unique(cols, return_inverse=True)
    if ucols.size == cols.size:
        return cols, vals
    uvals = np.zeros(ucols.size)
    np.add.at(uvals, inverse, vals)
    return ucols, uvals


class PosyCons:
    """Per-period posynomial outage constraints table(x_k) - thr <= 0."""

    def __init__(self, items, soft_class="outage"):
        # items: list of (table, coords, thr)
        self.items = items
        self.n = len(items)
        self.soft_class = soft_class

    def values(self, z, memo=None):
        memo = {} if memo is None else memo
        out = np.empty(self.n)
        for idx, (table, coords, thr) in enumerate(self.items):
            res = _table_eval(table, coords, z, memo, 0)
            out[idx] = INF if res is None else res[0] - thr
        return out

    def phi(self, z, soft=None, memo=None):
        memo = {} if memo is None else memo
        acc = 0.0
        for table, coords, thr in self.items:
            res = _table_eval(table, coords, z, memo, 0)
            if res is None:
                return INF
            d = _denom(res[0] - thr, soft)
            if not d > 0.0:
                return INF
            acc -= math.log(d)
        return acc

    def barrier(self, z, grad, H, soft=None, memo=None):
        memo = {} if memo is None else memo
        acc = 0.0
        for table, coords, thr in self.items:
            res = _table_eval(table, coords, z, memo, 2)
            if res is None:
                return INF
            v, g_loc, H_loc, jac, curv = res
            d = _denom(v - thr, soft)
            if not d > 0.0:
                return INF
            acc -= math.log(d)
            cols, vals = _sparse_grad(g_loc, jac)
            if soft is not None:
                cols = np.append(cols, soft[1])
                vals = np.append(vals, -soft[2])
            grad[cols] += vals / d
            H[np.ix_(cols, cols)] += np.outer(vals, vals) / d ** 2
            _push_local_hess(g_loc, H_loc, jac, curv, 1.0 / d, H)
        return acc


class Objective:
    """Normalized inner objective (outage bits + q * energy) / scale.

    Carries the pieces separately so the Dinkelbach update can read the
    unscaled numerator and denominator at any point.
    """

    def __init__(self, scale, posy_items, exp_idx, exp_base,
                 lin_cols, lin_vals, energy_const):
        self.scale = float(scale)                 # M*K*alpha0*T, bits
        self.posy_items = posy_items              # (table, coords, w_bits)
        self.exp_idx = np.asarray(exp_idx, dtype=int)
        self.exp_base = np.asarray(exp_base, dtype=float)   # J per exp(z)
        self.lin_cols = np.asarray(lin_cols, dtype=int)
        self.lin_vals = np.asarray(lin_vals, dtype=float)   # J per unit z
        self.energy_const = float(energy_const)             # J

    def energy_and_bits(self, z, memo=None):
        """(total energy in J, expected delivered bits) at z."""
        memo = {} if memo is None else memo
        with np.errstate(over="ignore"):
            energy = float(self.exp_base @ np.exp(z[self.exp_idx]))
        if self.lin_cols.size:
            energy += float(self.lin_vals @ z[self.lin_cols])
        energy += self.energy_const
        lost_bits = 0.0
        for table, coords, w_bits in self.posy_items:
            res = _table_eval(table, coords, z, memo, 0)
            if res is None:
                return energy, -INF
            lost_bits += w_bits * res[0]
        return energy, self.scale - lost_bits

    def value(self, z, q, memo=None):
        energy, bits = self.energy_and_bits(z, memo)
        if not np.isfinite(bits):
            return INF
        return ((self.scale - bits) + q * energy) / self.scale

    def fgh(self, z, q, memo=None):
        memo = {} if memo is None else memo
        D = z.shape[0]
        grad = np.zeros(D)
        H = np.zeros((D, D))
        with np.errstate(over="ignore"):
            e = self.exp_base * np.exp(z[self.exp_idx])
        f = q * (float(e.sum()) + self.energy_const)
        if self.lin_cols.size:
            f += q * float(self.lin_vals @ z[self.lin_cols])
            np.add.at(grad, self.lin_cols, q * self.lin_vals / self.scale)
        np.add.at(grad, self.exp_idx, q * e / self.scale)
        np.add.at(H, (self.exp_idx, self.exp_idx), q * e / self.scale)
        f /= self.scale
        for table, coords, w_bits in self.posy_items:
            res = _table_eval(table, coords, z, memo, 2)
            if res is None:
                return INF, grad, H
            v, g_loc, H_loc, jac, curv = res
            w = w_bits / self.scale
            f += w * v
            cols, vals = _sparse_grad(g_loc, jac)
            grad[cols] += w * vals
            _push_local_hess(g_loc, H_loc, jac, curv, w, H)
        return f, grad, H


# ---------------------------------------------------------------------------
# problem assembly


class EEProblem:
    """One convex inner problem: layout, constraint blocks, objective."""

    def __init__(self, config: ScenarioConfig, coeffs: LinkCoefficients,
                 options: SolverOptions, *, threshold: float,
                 transfers: bool = True, depleted: bool = False,
                 tables_weights=None, relay_slot_factor: float = 1.0):
        M, N, K = config.M, config.N, config.K
        self.config = config
        self.coeffs = coeffs
        self.options = options
        self.threshold = float(threshold)
        self.depleted = depleted
        self.relay_slot_factor = float(relay_slot_factor)
        transfers = transfers and M > 1
        self.layout = Layout(M=M, N=N, K=K, with_users=not depleted,
                             with_transfers=transfers)
        lay = self.layout
        T = config.T

        if tables_weights is None:
            tA, tB = outage_tables(coeffs, M, N)
            combined = MonomialTable(
                coef=np.concatenate([tA.coef, tB.coef]),
                w=np.vstack([tA.w, tB.w]), M=M, N=N, m=coeffs.m)
            tables_weights = ([combined], [float(M)])
        self.tables, self.table_weights = tables_weights

        # Per-period coordinate descriptors: M user dims then N relay dims.
        arrivals0 = config.arrivals.copy()
        arrivals0[:, 0] += config.Eu_0
        self.budget_rows = None
        coords_per_k = []
        if depleted:
            # user power eliminated: p[i,k] * T = per-period budget
            self.budget_rows = {}
            for k in range(K):
                coords = []
                for i in range(M):
                    cols, vals = [], []
                    for j in range(M):
                        if j == i:
                            continue
                        if (j, i) in lay.pair_idx:
                            cols.append(lay.pair_idx[(j, i)][k])
                            vals.append(config.eta / T)
                        if (i, j) in lay.pair_idx:
                            cols.append(lay.pair_idx[(i, j)][k])
                            vals.append(-1.0 / T)
                    cols = np.asarray(cols, dtype=int)
                    vals = np.asarray(vals, dtype=float)
                    c0 = arrivals0[i, k] / T
                    coords.append(("a", cols, vals, c0))
                    self.budget_rows[(i, k)] = (cols, vals, c0)
                for j in range(N):
                    coords.append(("v", int(lay.relay_idx[j, k])))
                coords_per_k.append(tuple(coords))
        else:
            for k in range(K):
                coords = tuple(
                    [("v", int(lay.user_idx[i, k])) for i in range(M)]
                    + [("v", int(lay.relay_idx[j, k])) for j in range(N)])
                coords_per_k.append(coords)
        self.coords_per_k = coords_per_k

        # Bounds: log-power boxes and transfer boxes.
        lo, hi = math.log(options.p_min), math.log(config.p_max)
        idx, sign, b = [], [], []
        power_idx = ([] if depleted else list(lay.user_idx.ravel())) \
            + list(lay.relay_idx.ravel())
        for d in power_idx:
            idx += [d, d]
            sign += [1.0, -1.0]
            b += [hi, -lo]
        total_energy_cap = float(config.arrivals.sum() + config.Eu_0.sum())
        self.e_cap = max(total_energy_cap * 1.001, 1e-3)
        for pidx in lay.pair_idx.values():
            for d in pidx:
                idx += [d, d]
                sign += [1.0, -1.0]
                b += [self.e_cap, 0.0]
        self.bounds = Bounds(idx, sign, b)

        blocks = []
        # Causality (standard variant only; the depleted equality makes the
        # cumulative constraint hold automatically).
        if not depleted:
            rows = []
            for i in range(M):
                for k in range(K):
                    ei = lay.user_idx[i, :k + 1]
                    ec = np.full(k + 1, T)
                    lc, lv = [], []
                    for j in range(M):
                        if j == i:
                            continue
                        if (i, j) in lay.pair_idx:
                            lc += list(lay.pair_idx[(i, j)][:k + 1])
                            lv += [1.0] * (k + 1)
                        if (j, i) in lay.pair_idx:
                            lc += list(lay.pair_idx[(j, i)][:k + 1])
                            lv += [-config.eta] * (k + 1)
                    rhs = float(arrivals0[i, :k + 1].sum())
                    rows.append((ei, ec, lc, lv, rhs))
            self.causality = CausalityCons(rows, soft_class="causality")
            blocks.append(self.causality)
        else:
            # eliminated powers must stay inside the power box
            rows = []
            for (i, k), (cols, vals, c0) in self.budget_rows.items():
                # budget/T >= p_min  ->  -vals @ z <= c0 - p_min
                rows.append((cols, -vals, c0 - options.p_min))
                # budget/T <= p_max  ->  vals @ z <= p_max - c0
                rows.append((cols, vals, config.p_max - c0))
            self.budget_cons = LinearCons(rows, soft_class="power_budget")
            blocks.append(self.budget_cons)

        # Outage constraints: every table of every period under threshold.
        items = []
        for k in range(K):
            for table in self.tables:
                items.append((table, coords_per_k[k], self.threshold))
        self.outage_cons = PosyCons(items, soft_class="outage")
        blocks.append(self.outage_cons)
        self.blocks = blocks
        self.n_con = self.bounds.n + sum(blk.n for blk in blocks)

        # Objective pieces.
        scale = M * K * config.alpha0 * T
        posy_items = []
        for k in range(K):
            for table, w in zip(self.tables, self.table_weights):
                posy_items.append((table, coords_per_k[k],
                                   config.alpha0 * T * w))
        exp_idx = list(lay.relay_idx.ravel())
        exp_base = [T * self.relay_slot_factor] * (N * K)
        lin_cols, lin_vals = [], []
        energy_const = 0.0
        if depleted:
            # user energy = sum of budgets: constant + linear in transfers
            energy_const += float(arrivals0.sum())
            for (i, k), (cols, vals, _c0) in self.budget_rows.items():
                lin_cols += list(cols)
                lin_vals += list(vals * T)
        else:
            exp_idx += list(lay.user_idx.ravel())
            exp_base += [T] * (M * K)
        for pidx in lay.pair_idx.values():
            lin_cols += list(pidx)
            lin_vals += [1.0 - config.eta] * K
        self.objective = Objective(scale, posy_items, exp_idx, exp_base,
                                   lin_cols, lin_vals, energy_const)
        self.scale = scale

        # phase-1 scaling per soft class
        self.soft_sigma = {
            "causality": max(1.0, total_energy_cap),
            "outage": self.threshold,
            "power_budget": max(config.p_max, 1.0),
        }

    # -- evaluation helpers -------------------------------------------------

    def barrier_fgh(self, z, q, t):
        memo = {}
        f, grad, H = self.objective.fgh(z, q, memo)
        if not np.isfinite(f):
            return INF, grad, H
        f *= t
        grad *= t
        H *= t
        phi = self.bounds.barrier(z, grad, H)
        if not np.isfinite(phi):
            return INF, grad, H
        f += phi
        for blk in self.blocks:
            kwargs = {"memo": memo} if isinstance(blk, PosyCons) else {}
            phi = blk.barrier(z, grad, H, None, **kwargs)
            if not np.isfinite(phi):
                return INF, grad, H
            f += phi
        return f, grad, H

    def barrier_value(self, z, q, t):
        memo = {}
        f = self.objective.value(z, q, memo)
        if not np.isfinite(f):
            return INF
        f *= t
        phi = self.bounds.phi(z)
        if not np.isfinite(phi):
            return INF
        f += phi
        for blk in self.blocks:
            kwargs = {"memo": memo} if isinstance(blk, PosyCons) else {}
            phi = blk.phi(z, None, **kwargs)
            if not np.isfinite(phi):
                return INF
            f += phi
        return f

    def strictly_feasible(self, z) -> bool:
        if np.any(self.bounds.values(z) >= 0.0):
            return False
        for blk in self.blocks:
            if np.any(blk.values(z) >= 0.0):
                return False
        return True

    def soft_values_scaled(self, z):
        vals = []
        for blk in self.blocks:
            sigma = self.soft_sigma[blk.soft_class]
            vals.append(blk.values(z) / sigma)
        return np.concatenate(vals) if vals else np.zeros(0)

    def _uniform_outage_level(self):
        """Log power level at which every outage posynomial sits at half
        the threshold when all nodes transmit at that common level.

        Found by bisection (the posynomials are strictly decreasing in
        the common level).  Returns the ceiling when even full power
        cannot reach the target: phase 1 then starts from the best
        uniform point available and certifies infeasibility properly.
        """
        cfg = self.config
        target = 0.5 * self.threshold
        n_vars = cfg.M + cfg.N

        def worst(xval):
            x = np.full(n_vars, xval)
            return max(float(t.value(x)) for t in self.tables)

        lo = math.log(10.0 * self.options.p_min)
        hi = math.log(0.999 * cfg.p_max)
        if worst(hi) > target:
            return hi
        if worst(lo) <= target:
            return lo
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if worst(mid) > target:
                lo = mid
            else:
                hi = mid
        return hi

    def initial_point(self):
        """Interior point for the hard bounds; soft constraints may be
        violated here (phase 1 cleans that up).

        All powers start at the common level that parks the outage
        posynomials at half the threshold, so the stiff constraint class
        begins satisfied and phase 1 only has to negotiate the mildly
        scaled energy rows.  The depleted variant has no free user
        powers; its transfers are seeded per period instead.
        """
        cfg = self.config
        opt = self.options
        lo, hi = math.log(opt.p_min), math.log(cfg.p_max)
        margin = 1e-4 * (hi - lo)
        z = np.zeros(self.layout.dim)
        x_all = float(np.clip(self._uniform_outage_level(),
                              lo + margin, hi - margin))
        if self.layout.with_users:
            z[self.layout.user_idx.ravel()] = x_all
        z[self.layout.relay_idx.ravel()] = x_all
        if self.depleted:
            self._seed_depleted_transfers(z)
        else:
            e0 = min(1e-6, 0.25 * self.e_cap)
            for pidx in self.layout.pair_idx.values():
                z[pidx] = e0
        return z

    def _seed_depleted_transfers(self, z):
        """Start the depleted variant with every per-period budget above
        the power floor.

        The eliminated user power is budget/T, which the outage posynomial
        evaluates at the initial point, so nonpositive budgets are not
        merely soft violations: they put the start outside the barrier
        domain.  Periods whose arrivals cannot reach the floor even under
        loss-aware equalization are provably infeasible (within-period
        transfers cannot create energy) and raise InfeasibleError.
        """
        cfg = self.config
        M, K = cfg.M, cfg.K
        eta = cfg.eta
        floor = self.options.p_min * cfg.T
        arrivals0 = cfg.arrivals.copy()
        arrivals0[:, 0] += cfg.Eu_0
        for k in range(K):
            arr = arrivals0[:, k].copy()
            if M == 1 or not self.layout.with_transfers:
                if float(arr.min()) <= floor * 1.01:
                    raise InfeasibleError(
                        "power_budget",
                        f"period {k + 1}: a user's harvest cannot sustain "
                        f"the minimum power")
                continue
            # highest budget floor reachable by equalizing transfers,
            # accounting for the transfer loss, found by bisection
            lo_t, hi_t = 0.0, float(arr.max())
            for _ in range(60):
                mid = 0.5 * (lo_t + hi_t)
                surplus = eta * float(np.clip(arr - mid, 0.0, None).sum())
                deficit = float(np.clip(mid - arr, 0.0, None).sum())
                if surplus >= deficit:
                    lo_t = mid
                else:
                    hi_t = mid
            t_even = lo_t
            if t_even <= floor * 1.01:
                raise InfeasibleError(
                    "power_budget",
                    f"period {k + 1}: equalizing transfers cannot lift "
                    f"every user to the minimum power")
            pulls = np.zeros((M, M))
            target = max(2.0 * floor, 0.5 * t_even)
            if float(arr.min()) < target:
                give_room = np.clip(arr - target, 0.0, None)
                order = np.argsort(-give_room)
                for i in range(M):
                    need = target - arr[i]
                    for j in order:
                        if need <= 0.0:
                            break
                        if j == i or give_room[j] <= 0.0:
                            continue
                        pull = min(give_room[j], need / eta)
                        pulls[j, i] += pull
                        give_room[j] -= pull
                        need -= eta * pull
            budget = arr + eta * pulls.sum(axis=0) - pulls.sum(axis=1)
            # small uniform seed on every pair, sized so it cannot push
            # the tightest budget anywhere near the floor
            e0 = min(1e-6, 0.25 * self.e_cap,
                     0.05 * float(budget.min()) / max(M - 1, 1))
            for (i, j), pidx in self.layout.pair_idx.items():
                z[pidx[k]] = e0 + pulls[i, j]

    def extract_policy(self, z) -> Policy:
        cfg = self.config
        lay = self.layout
        E = lay.transfer_array(z)
        p_r = np.exp(z[lay.relay_idx])
        if self.depleted:
            p_u = np.empty((cfg.M, cfg.K))
            for (i, k), (cols, vals, c0) in self.budget_rows.items():
                p_u[i, k] = c0 + (vals @ z[cols] if cols.size else 0.0)
        else:
            p_u = np.exp(z[lay.user_idx])
        return Policy(p_u=p_u, p_r=p_r, transfers=E)


# ---------------------------------------------------------------------------
# Newton / barrier engines


def _solve_newton_system(H, g):
    n = H.shape[0]
    base = max(float(np.trace(H)) / n, 1e-300)
    jitter = 0.0
    for _ in range(14):
        try:
            M = H if jitter == 0.0 else H + jitter * base * np.eye(n)
            c = sla.cho_factor(M, lower=True, check_finite=False)
            return sla.cho_solve(c, g, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            jitter = 1e-12 if jitter == 0.0 else jitter * 100.0
    raise RuntimeError("Newton system could not be factorized")


def _damped_newton(z, fgh, value, tol, max_iter):
    """Backtracking Newton on a barrier objective.

    Returns (z, iters, converged); converged is True only when the
    Newton decrement dropped below tol, so callers can tell a genuine
    minimizer from a stall (line search exhausted or iteration cap).
    """
    f, g, H = fgh(z)
    if not np.isfinite(f):
        raise RuntimeError("Newton started at an infeasible point")
    iters = 0
    converged = False
    for _ in range(max_iter):
        step = _solve_newton_system(H, g)
        lam2 = float(g @ step)
        if not np.isfinite(lam2):
            break
        if lam2 < 0.0:
            # factorization jitter can flip the sign at convergence scale
            lam2 = abs(lam2)
        if 0.5 * lam2 <= tol:
            converged = True
            break
        alpha = 1.0
        accepted = False
        while alpha >= 1e-14:
            zt = z - alpha * step
            ft = value(zt)
            if np.isfinite(ft) and ft <= f - 0.25 * alpha * lam2:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        z = zt
        f, g, H = fgh(z)
        iters += 1
    return z, iters, converged


@dataclass
class InnerResult:
    z: np.ndarray
    v_prime_norm: float     # objective value (normalized by scale)
    newton_iters: int
    t_final: float


def inner_solve(problem: EEProblem, q: float, z0: np.ndarray,
                options: SolverOptions = None) -> InnerResult:
    """Barrier path following for the convex inner problem at parameter q.

    z0 must be strictly feasible.  Returns the central-path point whose
    duality-gap estimate (constraint count / barrier parameter) is at or
    below kkt_tol times the constraint count scale.
    """
    options = options or problem.options
    if not problem.strictly_feasible(z0):
        raise ValueError("inner_solve needs a strictly feasible start")
    z = z0.copy()
    t = options.t0
    total = 0
    while True:
        z, it, _conv = _damped_newton(
            z,
            lambda zz: problem.barrier_fgh(zz, q, t),
            lambda zz: problem.barrier_value(zz, q, t),
            options.newton_tol, options.max_newton)
        total += it
        if problem.n_con / t <= options.kkt_tol:
            break
        t *= options.barrier_mu
    memo = {}
    return InnerResult(z=z, v_prime_norm=problem.objective.value(z, q, memo),
                       newton_iters=total, t_final=t)


def phase1(problem: EEProblem, options: SolverOptions = None) -> np.ndarray:
    """Find a strictly feasible point or certify infeasibility.

    Minimizes a shared scaled slack s over the soft constraints g <= s*sigma
    while keeping hard bounds exact.  Succeeds once s drops below the
    margin; declares infeasibility once the duality gap proves s* > 0.
    """
    options = options or problem.options
    z = problem.initial_point()
    # Effective per-class scales.  Base sigmas make the classes mutually
    # comparable, but a hopeless threshold can leave a class violated by
    # many orders of magnitude, which turns its slack variable either
    # astronomically large or, after rescaling, denormal-small; widening
    # the scale to the seed's worst raw violation keeps the initial
    # scaled slack O(1).  The sign of s, hence feasibility and the
    # certificate, does not depend on the sigmas.
    sig = dict(problem.soft_sigma)
    for blk in problem.blocks:
        raw = float(np.max(blk.values(z)))
        if np.isfinite(raw):
            sig[blk.soft_class] = max(sig[blk.soft_class], raw)
    svals = np.concatenate(
        [blk.values(z) / sig[blk.soft_class] for blk in problem.blocks]) \
        if problem.blocks else np.zeros(0)
    if svals.size == 0 or float(svals.max()) < -options.phase1_margin:
        return z
    D = problem.layout.dim
    # the slack must exceed the worst violation by more than one ULP,
    # or the barrier evaluates ln(0) when violations are huge
    worst = float(svals.max())
    s0 = worst + max(1.0, 1e-9 * abs(worst))
    zs = np.append(z, s0)
    # the duality-gap certificate must count every barrier term, hard
    # bounds included, not just the softened rows
    n_ph1 = problem.n_con

    def fgh(t):
        def inner(zz):
            grad = np.zeros(D + 1)
            H = np.zeros((D + 1, D + 1))
            f = t * zz[-1]
            grad[-1] = t
            phi = problem.bounds.barrier(zz, grad, H)
            if not np.isfinite(phi):
                return INF, grad, H
            f += phi
            memo = {}
            for blk in problem.blocks:
                soft = (zz[-1], D, sig[blk.soft_class])
                kwargs = {"memo": memo} if isinstance(blk, PosyCons) else {}
                phi = blk.barrier(zz, grad, H, soft, **kwargs)
                if not np.isfinite(phi):
                    return INF, grad, H
                f += phi
            return f, grad, H
        return inner

    def value(t):
        def inner(zz):
            f = t * zz[-1]
            phi = problem.bounds.phi(zz)
            if not np.isfinite(phi):
                return INF
            f += phi
            memo = {}
            for blk in problem.blocks:
                soft = (zz[-1], D, sig[blk.soft_class])
                kwargs = {"memo": memo} if isinstance(blk, PosyCons) else {}
                phi = blk.phi(zz, soft, **kwargs)
                if not np.isfinite(phi):
                    return INF
                f += phi
            return f
        return inner

    t = 1.0
    any_converged = False
    for _stage in range(24):
        zs, _it, conv = _damped_newton(zs, fgh(t), value(t),
                                       options.newton_tol, options.max_newton)
        any_converged = any_converged or conv
        s = zs[-1]
        if s < -options.phase1_margin:
            return zs[:-1]
        # the duality gap bounds the optimal slack: s* >= s - n/t, but
        # only at a converged central-path point; a stalled Newton
        # leaves s stale
        if conv and s - n_ph1 / t > 0.0:
            break
        if conv and s < 0.0 and s - n_ph1 / t > -options.phase1_margin:
            # strictly feasible, and provably no point clears the full
            # margin; pushing t further only drives the active slacks
            # below floating-point resolution, so accept this interior
            return zs[:-1]
        t *= options.barrier_mu
    if not any_converged:
        raise RuntimeError("phase 1 stalled: no barrier stage converged, "
                           "so feasibility could not be decided")
    # infeasible (or no strict interior): identify the binding class
    zfin = zs[:-1]
    worst_class, worst_val = "outage", -INF
    for blk in problem.blocks:
        v = float(np.max(blk.values(zfin) / sig[blk.soft_class]))
        if v > worst_val:
            worst_val, worst_class = v, blk.soft_class
    raise InfeasibleError(worst_class,
                          f"phase-1 slack {zs[-1]:.3e} (scaled)")


# ---------------------------------------------------------------------------
# public evaluation op


def evaluate_V_prime(q: float, x_tilde, transfers, config: ScenarioConfig,
                     coeffs: LinkCoefficients = None):
    """Inner objective at a transformed point, with derivatives.

    x_tilde is (M+N, K) log powers (user rows first), transfers is
    (K, M, M) joules.  Returns (value, (grad_x, grad_E), hvp) where value
    is in bits (outage-weighted bits plus q times energy), grads match the
    input shapes, and hvp maps (vx, vE) to Hessian products of the same
    shapes.  The Hessian is positive semidefinite.
    """
    config_M, K = config.M, config.K
    coeffs = coeffs or compute_link_coefficients(config)
    x_tilde = np.asarray(x_tilde, dtype=float)
    transfers = np.asarray(transfers, dtype=float)
    if x_tilde.shape != (config.M + config.N, K):
        raise ValueError("x_tilde must have shape (M+N, K)")
    if transfers.shape != (K, config_M, config_M):
        raise ValueError("transfers must have shape (K, M, M)")
    options = SolverOptions()
    problem = EEProblem(config, coeffs, options, threshold=config.pr_out_0,
                        transfers=True)
    lay = problem.layout
    z = np.zeros(lay.dim)
    z[lay.user_idx] = x_tilde[:config.M]
    z[lay.relay_idx] = x_tilde[config.M:]
    lay.pack_transfers(transfers, z)
    f_norm, grad, H = problem.objective.fgh(z, q)
    value = f_norm * problem.scale
    grad = grad * problem.scale
    H = H * problem.scale

    def split(vec):
        gx = np.empty_like(x_tilde)
        gx[:config.M] = vec[lay.user_idx]
        gx[config.M:] = vec[lay.relay_idx]
        gE = np.zeros((K, config_M, config_M))
        for (i, j), idx in lay.pair_idx.items():
            gE[:, i, j] = vec[idx]
        return gx, gE

    def hvp(vx, vE):
        v = np.zeros(lay.dim)
        v[lay.user_idx] = np.asarray(vx, dtype=float)[:config.M]
        v[lay.relay_idx] = np.asarray(vx, dtype=float)[config.M:]
        lay.pack_transfers(np.asarray(vE, dtype=float), v)
        return split(H @ v)

    return value, split(grad), hvp


# ---------------------------------------------------------------------------
# Dinkelbach outer loop


@dataclass
class SolveResult:
    """Outcome of an energy-efficiency optimization run.

    status is one of converged, max_iterations, infeasible, audit_failed.
    q_star is the achieved bits-per-joule ratio of the approximate model;
    ee_exact re-evaluates the returned policy with exact outage.  trace
    holds one (q, V, newton_iterations) triple per outer iteration.
    """

    status: str
    policy: Policy = None
    q_star: float = None
    trace: list = field(default_factory=list)
    feasibility: object = None
    ee_exact: float = None
    e_tot: float = None
    outage_exact: object = None
    threshold_internal: float = None
    binding_class: str = None
    newton_iters_total: int = 0

    @property
    def feasible(self) -> bool:
        return self.status in ("converged", "max_iterations") \
            and self.feasibility is not None and self.feasibility.feasible


def _cleanup_transfers(config: ScenarioConfig, policy: Policy) -> Policy:
    """Cancel opposing transfers and drop solver dust.

    Cancelling min(send, return) inside a user pair never hurts causality
    (the receiver loses eta*c but also keeps c it would have sent).  Tiny
    residual transfers are zeroed only if causality still audits clean.
    """
    pol = policy.copy()
    E = pol.transfers
    for k in range(config.K):
        for i in range(config.M):
            for j in range(i + 1, config.M):
                c = min(E[k, i, j], E[k, j, i])
                if c > 0.0:
                    E[k, i, j] -= c
                    E[k, j, i] -= c
    tiny = (E > 0.0) & (E < 1e-9)
    if np.any(tiny):
        trial = pol.copy()
        trial.transfers[tiny] = 0.0
        ledger = energy_ledger(config, trial)
        if np.all(trial.p_u * config.T - ledger.available <= TOL_FEAS):
            pol = trial
    return pol


def _snap_relays(config: ScenarioConfig, policy: Policy, threshold: float,
                 p_min: float) -> Policy:
    """Zero relay powers that sit at the numerical floor, if outage allows."""
    near_zero = policy.p_r < 10.0 * p_min
    if not np.any(near_zero):
        return policy
    trial = policy.copy()
    trial.p_r[near_zero] = 0.0
    report = network_outage_report(config, trial, mode="exact")
    if np.all(report.pr_out <= threshold * (1.0 + 1e-6)):
        return trial
    return policy


def _nc_audit(config: ScenarioConfig, policy: Policy):
    feas = validate_policy(config, policy)
    report = network_outage_report(config, policy, mode="exact")
    from .model import energy_efficiency
    ee = energy_efficiency(config, policy, report.pr_out)
    return feas, report, ee


def dinkelbach_optimize(config: ScenarioConfig,
                        options: SolverOptions = None, *,
                        transfers: bool = True, depleted: bool = False,
                        tables_weights=None, relay_slot_factor: float = 1.0,
                        audit=None) -> SolveResult:
    """Maximize energy efficiency and audit the result with exact outage.

    The keyword switches select restricted variants used by the baseline
    policies: transfers=False removes inter-user energy transfer variables,
    depleted=True pins per-period consumption to per-period harvest.
    tables_weights and relay_slot_factor allow a different outage model
    (used by the orthogonal relaying baseline).  audit overrides the exact
    feasibility check; the default audits the network-coded outage.
    """
    options = options or SolverOptions()
    coeffs = compute_link_coefficients(config)
    q_tol = options.q_tol_abs(config)
    audit = audit or _nc_audit

    threshold = config.pr_out_0
    last_result = None
    for _attempt in range(1 + options.max_retries):
        problem = EEProblem(config, coeffs, options, threshold=threshold,
                            transfers=transfers, depleted=depleted,
                            tables_weights=tables_weights,
                            relay_slot_factor=relay_slot_factor)
        try:
            z = phase1(problem, options)
        except InfeasibleError as err:
            return SolveResult(status="infeasible",
                               binding_class=err.binding_class,
                               threshold_internal=threshold)
        energy, bits = problem.objective.energy_and_bits(z)
        q = max(bits, 0.0) / energy
        trace = []
        status = "max_iterations"
        total_iters = 0
        for _outer in range(options.max_outer):
            res = inner_solve(problem, q, z, options)
            z = res.z
            energy, bits = problem.objective.energy_and_bits(z)
            V = bits - q * energy
            trace.append((q, V, res.newton_iters))
            total_iters += res.newton_iters
            if abs(V) <= q_tol:
                status = "converged"
                break
            q = bits / energy

        # q_star is the achieved ratio of the approximate model at the
        # solver optimum, read off before cosmetic cleanup (which cannot be
        # represented in log coordinates once a relay snaps to zero).
        q_star = bits / energy
        policy = problem.extract_policy(z)
        if not depleted:
            # transfer netting changes per-period budgets, which would break
            # the depleted identity consumption == budget, so skip it there
            policy = _cleanup_transfers(config, policy)
        if tables_weights is None:
            # the snap test is phrased in terms of the network-coded outage,
            # so leave relays alone when a custom outage model is in use
            policy = _snap_relays(config, policy, config.pr_out_0,
                                  options.p_min)
        feas, outage_report, ee_exact = audit(config, policy)
        result = SolveResult(status=status, policy=policy, q_star=q_star,
                             trace=trace, feasibility=feas,
                             ee_exact=ee_exact,
                             e_tot=total_energy(
                                 config, policy,
                                 relay_slot_factor=relay_slot_factor),
                             outage_exact=outage_report,
                             threshold_internal=threshold,
                             newton_iters_total=total_iters)
        if feas.feasible:
            return result
        only_outage = all(v == 0.0 for cls, v in feas.worst.items()
                          if cls != "outage")
        last_result = result
        if not only_outage:
            result.status = "audit_failed"
            return result
        threshold *= 0.9

    last_result.status = "audit_failed"
    return last_result

"""Sparse nonnegative rate-matrix algebra.

Home of the n-step weight recursion, generation masses, first-passage
weights, the three power series built from them, and the nth-root growth
estimators. Everything here is deterministic double-precision numerics;
weights are kept in a rescaled representation (power-of-two scale factors,
so rescaling itself is exact) to survive horizons in the thousands.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ContractError",
    "RateMatrix",
    "SeriesTable",
    "RootEstimate",
    "SeriesEvaluation",
    "row_apply",
    "build_series_table",
    "evaluate_H",
    "evaluate_Theta",
    "evaluate_Phi",
    "check_series_identities",
    "estimate_Ks",
    "estimate_Kw",
    "lambda_s_from_phi",
]

_REL_TOL = 1e-12


def _pow2(e: int) -> float:
    # 2**e as a float; overflows quietly to inf instead of raising
    with np.errstate(over="ignore"):
        return float(np.exp2(np.float64(e)))


class ContractError(ValueError):
    """Raised when an operation's input contract is violated."""


@dataclass(frozen=True)
class RateMatrix:
    """Row-finite nonnegative rate matrix over an indexed vertex window.

    ``csr`` holds one row per vertex; entry (x, y) is the per-particle
    transition weight from x to y at unit intensity. ``row_sum`` caches the
    row totals. Instances are immutable after construction and safe to share.
    """

    csr: sp.csr_matrix
    row_sum: np.ndarray

    @property
    def vertex_count(self) -> int:
        return self.csr.shape[0]

    @staticmethod
    def from_edges(vertex_count: int, edges) -> "RateMatrix":
        """Build from an iterable of (source, target, rate) triples.

        Duplicate (source, target) pairs are rejected; rates must be finite
        and nonnegative. Zero rates are dropped.
        """
        if vertex_count <= 0:
            raise ContractError("vertex_count must be positive")
        src, dst, val = [], [], []
        seen = set()
        for u, v, r in edges:
            u = int(u)
            v = int(v)
            r = float(r)
            if not (0 <= u < vertex_count and 0 <= v < vertex_count):
                raise ContractError(f"edge ({u},{v}) outside window of size {vertex_count}")
            if not math.isfinite(r) or r < 0:
                raise ContractError(f"rate {r!r} on edge ({u},{v}) must be finite and >= 0")
            if (u, v) in seen:
                raise ContractError(f"duplicate edge ({u},{v})")
            seen.add((u, v))
            if r > 0:
                src.append(u)
                dst.append(v)
                val.append(r)
        m = sp.csr_matrix(
            (np.asarray(val, dtype=np.float64), (np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64))),
            shape=(vertex_count, vertex_count),
        )
        m.sort_indices()
        rs = np.asarray(m.sum(axis=1)).ravel()
        m.data.flags.writeable = False
        rs.flags.writeable = False
        return RateMatrix(csr=m, row_sum=rs)

    @staticmethod
    def from_arrays(vertex_count: int, src, dst, rate) -> "RateMatrix":
        """Vectorized variant of ``from_edges`` for large edge sets.

        Same contract: in-window indices, finite nonnegative rates, no
        duplicate (source, target) pairs; zero rates are dropped.
        """
        if vertex_count <= 0:
            raise ContractError("vertex_count must be positive")
        src = np.ascontiguousarray(src, dtype=np.int64)
        dst = np.ascontiguousarray(dst, dtype=np.int64)
        rate = np.ascontiguousarray(rate, dtype=np.float64)
        if not (src.ndim == 1 and src.shape == dst.shape == rate.shape):
            raise ContractError("src, dst, rate must be one-dimensional and equally long")
        if src.size:
            if int(src.min()) < 0 or int(src.max()) >= vertex_count:
                raise ContractError("source index outside window")
            if int(dst.min()) < 0 or int(dst.max()) >= vertex_count:
                raise ContractError("target index outside window")
            if not np.all(np.isfinite(rate)) or float(rate.min()) < 0:
                raise ContractError("rates must be finite and >= 0")
            order = np.lexsort((dst, src))
            ss, dd = src[order], dst[order]
            if np.any((ss[1:] == ss[:-1]) & (dd[1:] == dd[:-1])):
                raise ContractError("duplicate (source, target) pair")
        keep = rate > 0
        m = sp.csr_matrix(
            (rate[keep], (src[keep], dst[keep])), shape=(vertex_count, vertex_count)
        )
        m.sort_indices()
        rs = np.asarray(m.sum(axis=1)).ravel()
        m.data.flags.writeable = False
        rs.flags.writeable = False
        return RateMatrix(csr=m, row_sum=rs)

    def validate(self) -> None:
        """Recompute row sums and check the cache within 1e-12 relative."""
        fresh = np.asarray(self.csr.sum(axis=1)).ravel()
        scale = np.maximum(np.abs(fresh), 1.0)
        if np.any(np.abs(fresh - self.row_sum) > _REL_TOL * scale):
            raise ContractError("cached row_sum inconsistent with matrix rows")
        if np.any(self.csr.data < 0):
            raise ContractError("negative rate present")

    def rows(self):
        """Yield (vertex, targets array, rates array) per vertex."""
        indptr, indices, data = self.csr.indptr, self.csr.indices, self.csr.data
        for x in range(self.vertex_count):
            lo, hi = indptr[x], indptr[x + 1]
            yield x, indices[lo:hi], data[lo:hi]

    def dense(self) -> np.ndarray:
        return self.csr.toarray()


def row_apply(K: RateMatrix, v: np.ndarray) -> np.ndarray:
    """Sparse product (Kv)(x) = sum_y k_xy v(y)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (K.vertex_count,):
        raise ContractError(f"vector of shape {v.shape} does not match window size {K.vertex_count}")
    if not np.all(np.isfinite(v)):
        raise ContractError("vector entries must be finite")
    return K.csr.dot(v)


# ---------------------------------------------------------------------------
# series tables

@dataclass(frozen=True)
class SeriesTable:
    """Per-n weight rows from one source vertex, in rescaled form.

    The actual n-step row is ``scaled_rows[n] * 2.0**scale_exp[n]``; scale
    factors are powers of two so rescaling never rounds. ``first_passage``
    entries count weighted paths that avoid ``target`` strictly before the
    final step; they are kept in the same rescaled form.
    """

    source: int
    target: int | None
    horizon: int
    scaled_rows: np.ndarray        # (N+1, V) float64
    scale_exp: np.ndarray          # (N+1,) int64
    fp_scaled: np.ndarray | None   # (N+1,) float64, first-passage weights
    fp_scale_exp: np.ndarray | None
    return_column: int             # column used for the return-weight roots

    @property
    def vertex_count(self) -> int:
        return self.scaled_rows.shape[1]

    # -- log-space accessors (safe at any horizon) --

    def log_step_weight(self, n: int, y: int) -> float:
        """log k^(n)(source, y); -inf when the weight is zero."""
        w = self.scaled_rows[n, y]
        if w == 0.0:
            return -math.inf
        return math.log(w) + float(self.scale_exp[n]) * _LN2

    def log_generation_mass(self, n: int) -> float:
        s = float(self.scaled_rows[n].sum())
        if s == 0.0:
            return -math.inf
        return math.log(s) + float(self.scale_exp[n]) * _LN2

    def log_first_passage(self, n: int) -> float:
        if self.fp_scaled is None:
            raise ContractError("table was built without a first-passage target")
        w = float(self.fp_scaled[n])
        if w == 0.0:
            return -math.inf
        return math.log(w) + float(self.fp_scale_exp[n]) * _LN2

    # -- linear accessors (may overflow to inf at large horizons) --

    def step_weights(self, n: int) -> np.ndarray:
        return self.scaled_rows[n] * _pow2(int(self.scale_exp[n]))

    @property
    def generation_mass(self) -> np.ndarray:
        out = np.empty(self.horizon + 1)
        for n in range(self.horizon + 1):
            out[n] = self.scaled_rows[n].sum() * _pow2(int(self.scale_exp[n]))
        return out

    @property
    def first_passage(self) -> np.ndarray:
        if self.fp_scaled is None:
            raise ContractError("table was built without a first-passage target")
        out = np.empty(self.horizon + 1)
        for n in range(self.horizon + 1):
            out[n] = self.fp_scaled[n] * _pow2(int(self.fp_scale_exp[n]))
        return out

    def mass_roots(self) -> np.ndarray:
        """(T^n)^(1/n) for n = 1..horizon, nan where the mass is zero."""
        out = np.full(self.horizon + 1, np.nan)
        for n in range(1, self.horizon + 1):
            lg = self.log_generation_mass(n)
            out[n] = 0.0 if lg == -math.inf else math.exp(lg / n)
        return out

    def return_roots(self) -> np.ndarray:
        """(k^(n)(source, return_column))^(1/n), nan at n=0, 0 on zero weights."""
        out = np.full(self.horizon + 1, np.nan)
        for n in range(1, self.horizon + 1):
            lg = self.log_step_weight(n, self.return_column)
            out[n] = 0.0 if lg == -math.inf else math.exp(lg / n)
        return out


_LN2 = math.log(2.0)


def _rescale(row: np.ndarray, carried_exp: int) -> tuple[np.ndarray, int]:
    # power-of-two rescaling is exact; keeps the running maximum near 1
    m = row.max() if row.size else 0.0
    if m <= 0.0 or not math.isfinite(m):
        return row, carried_exp
    e = int(math.frexp(m)[1])  # m in [2^(e-1), 2^e)
    if e == 0:
        return row, carried_exp
    return row * _pow2(-e), carried_exp + e


def build_series_table(K: RateMatrix, source: int, target: int | None = None, N: int = 64) -> SeriesTable:
    """Tabulate n-step weights from ``source`` for n = 0..N.

    When ``target`` is given, first-passage weights into it (paths whose
    intermediate vertices avoid the target) are tabulated as well.
    """
    if N < 1:
        raise ContractError("horizon N must be >= 1")
    V = K.vertex_count
    if not (0 <= source < V):
        raise ContractError(f"source {source} outside window")
    if target is not None and not (0 <= target < V):
        raise ContractError(f"target {target} outside window")

    rows = np.zeros((N + 1, V))
    exps = np.zeros(N + 1, dtype=np.int64)
    rows[0, source] = 1.0
    KT = K.csr.T.tocsr()  # row vector times K, done as K^T times column
    cur = rows[0].copy()
    cur_exp = 0
    for n in range(1, N + 1):
        cur = KT.dot(cur)
        cur, cur_exp = _rescale(cur, cur_exp)
        rows[n] = cur
        exps[n] = cur_exp

    fp = None
    fp_exp = None
    if target is not None:
        # intermediate vertices must avoid the target: iterate with the
        # target's incoming column removed, close each step through it
        mask = np.ones(V)
        mask[target] = 0.0
        col = np.asarray(K.csr[:, [target]].todense()).ravel()
        fp = np.zeros(N + 1)
        fp_exp = np.zeros(N + 1, dtype=np.int64)
        u = np.zeros(V)
        u[source] = 1.0
        u_exp = 0
        for n in range(1, N + 1):
            # close: paths ending at target exactly at step n
            val = float(u.dot(col))
            fp[n] = val
            fp_exp[n] = u_exp
            # advance while blocking the target as an intermediate
            u = KT.dot(u) * mask
            u, u_exp = _rescale(u, u_exp)
        for arr in (fp, fp_exp):
            arr.flags.writeable = False

    rows.flags.writeable = False
    exps.flags.writeable = False
    return SeriesTable(
        source=source,
        target=target,
        horizon=N,
        scaled_rows=rows,
        scale_exp=exps,
        fp_scaled=fp,
        fp_scale_exp=fp_exp,
        return_column=target if target is not None else source,
    )


# ---------------------------------------------------------------------------
# power series

@dataclass(frozen=True)
class SeriesEvaluation:
    lam: float
    partial_sum: float
    terms_used: int
    last_term_magnitude: float
    converged_flag: bool


_SERIES_ABS_TOL = 1e-12


def _sum_log_series(log_coeffs, lam: float) -> SeriesEvaluation:
    """Partial sum of sum_n c_n lam^n from log coefficients (c_n >= 0)."""
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    if lam == 0.0:
        # only the n = 0 term survives
        c0 = 0.0 if log_coeffs[0] == -math.inf else math.exp(log_coeffs[0])
        return SeriesEvaluation(lam, c0, 1, c0 if len(log_coeffs) == 1 else 0.0, True)
    total = 0.0
    last = 0.0
    used = 0
    loglam = math.log(lam)
    for n, lc in enumerate(log_coeffs):
        if lc == -math.inf:
            term = 0.0
        else:
            arg = lc + n * loglam
            term = math.inf if arg > 709.0 else math.exp(arg)
        total += term
        last = term
        used = n + 1
        if not math.isfinite(total):
            return SeriesEvaluation(lam, math.inf, used, last, False)
    return SeriesEvaluation(lam, total, used, last, last < _SERIES_ABS_TOL)


def evaluate_H(table: SeriesTable, lam: float) -> SeriesEvaluation:
    """Partial sum of the n-step weight series from source to the table's column."""
    logs = [table.log_step_weight(n, table.return_column) for n in range(table.horizon + 1)]
    return _sum_log_series(logs, lam)


def evaluate_Theta(table: SeriesTable, lam: float) -> SeriesEvaluation:
    """Partial sum of the generation-mass series at the source."""
    logs = [table.log_generation_mass(n) for n in range(table.horizon + 1)]
    return _sum_log_series(logs, lam)


def evaluate_Phi(table: SeriesTable, lam: float) -> SeriesEvaluation:
    """Partial sum of the first-passage series into the table's target."""
    if table.fp_scaled is None:
        raise ContractError("table was built without a first-passage target")
    logs = [table.log_first_passage(n) for n in range(table.horizon + 1)]
    return _sum_log_series(logs, lam)


# ---------------------------------------------------------------------------
# series identity checks

def _column_powers(K: RateMatrix, y: int, N: int) -> list[np.ndarray]:
    """Columns of K^n at y: vectors w_n with w_n(x) = k^(n)(x, y)."""
    V = K.vertex_count
    out = [np.zeros(V)]
    out[0][y] = 1.0
    cur = out[0]
    for _ in range(N):
        cur = K.csr.dot(cur)
        out.append(cur)
    return out


def _mass_vectors(K: RateMatrix, N: int) -> list[np.ndarray]:
    """Vectors v_n with v_n(x) = T^n_x."""
    cur = np.ones(K.vertex_count)
    out = [cur]
    for _ in range(N):
        cur = K.csr.dot(cur)
        out.append(cur)
    return out


def _first_passage_columns(K: RateMatrix, y: int, N: int) -> list[np.ndarray]:
    """Vectors c_n with c_n(x) = weight of first passage from x into y at step n."""
    V = K.vertex_count
    mask = np.ones(V)
    mask[y] = 0.0
    out = [np.zeros(V)]
    cur = np.asarray(K.csr[:, [y]].todense()).ravel()  # n = 1
    out.append(cur)
    for _ in range(2, N + 1):
        cur = K.csr.dot(cur * mask)
        out.append(cur)
    return out


def _geometric_sum(vectors, lam: float) -> tuple[np.ndarray, bool]:
    """sum_n lam^n vec_n with a crude tail-growth convergence verdict."""
    total = np.zeros_like(vectors[0])
    prev_term = None
    growing = False
    scale = 1.0
    for n, vec in enumerate(vectors):
        term = vec * scale
        total = total + term
        tm = float(np.max(np.abs(term))) if term.size else 0.0
        if prev_term is not None and tm > prev_term and n >= len(vectors) // 2:
            growing = True
        prev_term = tm
        scale *= lam
    converged = (not growing) and (prev_term is not None and prev_term < 1e-8)
    return total, converged


def check_series_identities(K: RateMatrix, lam: float, x: int, y: int, N: int) -> dict:
    """Residuals of the five algebraic identities tying the three series together.

    Returns a dict with per-identity absolute residuals; identities whose
    series do not converge at this lambda are reported as skipped instead of
    producing a spurious residual.
    """
    V = K.vertex_count
    if not (0 <= x < V and 0 <= y < V):
        raise ContractError("x or y outside window")

    H_y, ok_hy = _geometric_sum(_column_powers(K, y, N), lam)
    H_x, ok_hx = _geometric_sum(_column_powers(K, x, N), lam)
    Th, ok_th = _geometric_sum(_mass_vectors(K, N), lam)
    Phi_y, ok_py = _geometric_sum(_first_passage_columns(K, y, N), lam)
    Phi_x, ok_px = _geometric_sum(_first_passage_columns(K, x, N), lam)

    report: dict[str, object] = {"lam": lam, "x": x, "y": y, "N": N}
    delta_xy = 1.0 if x == y else 0.0

    def entry(name, ok, residual):
        report[name] = {"residual": residual, "skipped": not ok}
        if not ok:
            report[name]["note"] = "series not converged at this lambda"

    # row recursion of the n-step series
    if ok_hy:
        rhs = delta_xy + lam * float(row_apply(K, H_y)[x])
        entry("H_recursion", True, abs(float(H_y[x]) - rhs))
    else:
        entry("H_recursion", False, math.nan)

    # row recursion of the mass series
    if ok_th:
        rhs = 1.0 + lam * float(row_apply(K, Th)[x])
        entry("Theta_recursion", True, abs(float(Th[x]) - rhs))
    else:
        entry("Theta_recursion", False, math.nan)

    # splitting at the first passage into y
    if ok_hy and ok_py:
        rhs = delta_xy + float(Phi_y[x]) * float(H_y[y])
        entry("H_first_passage_product", True, abs(float(H_y[x]) - rhs))
    else:
        entry("H_first_passage_product", False, math.nan)

    # the return series sums the first-return geometric pile-up
    if ok_hx and ok_px and float(Phi_x[x]) < 1.0:
        rhs = 1.0 / (1.0 - float(Phi_x[x]))
        entry("H_return_series", True, abs(float(H_x[x]) - rhs))
    else:
        entry("H_return_series", False, math.nan)

    # one-step expansion of the first-return weight
    if ok_px:
        indptr, indices, data = K.csr.indptr, K.csr.indices, K.csr.data
        lo, hi = indptr[x], indptr[x + 1]
        acc = 0.0
        loop = 0.0
        for j, r in zip(indices[lo:hi], data[lo:hi]):
            if j == x:
                loop = r
            else:
                acc += r * float(Phi_x[j])
        rhs = lam * acc + lam * loop
        entry("Phi_first_step", True, abs(float(Phi_x[x]) - rhs))
    else:
        entry("Phi_first_step", False, math.nan)

    return report


# ---------------------------------------------------------------------------
# growth-rate estimators

@dataclass(frozen=True)
class RootEstimate:
    liminf_estimate: float
    limsup_estimate: float
    window_used: tuple[int, int]
    oscillation_flag: bool


def _window_extremes(values: np.ndarray, lo: int, hi: int, spread_threshold: float) -> RootEstimate:
    window = values[lo : hi + 1]
    window = window[~np.isnan(window)]
    if window.size == 0 or np.all(window == 0.0):
        return RootEstimate(0.0, 0.0, (lo, hi), False)
    lo_v = float(window.min())
    hi_v = float(window.max())
    return RootEstimate(lo_v, hi_v, (lo, hi), (hi_v - lo_v) > spread_threshold)


def estimate_Ks(table: SeriesTable, spread_threshold: float = 0.2) -> RootEstimate:
    """Growth rate of the return weights: window extremes of the nth roots.

    The lower and upper window extremes approximate the liminf and limsup;
    they are reported separately and never averaged, since several models
    of interest genuinely oscillate.
    """
    lo = max(1, table.horizon // 2)
    return _window_extremes(table.return_roots(), lo, table.horizon, spread_threshold)


def estimate_Kw(table: SeriesTable, spread_threshold: float = 0.2) -> RootEstimate:
    """Growth rate of the generation mass: window extremes of the nth roots."""
    lo = max(1, table.horizon // 2)
    return _window_extremes(table.mass_roots(), lo, table.horizon, spread_threshold)


def lambda_s_from_phi(
    K: RateMatrix,
    x: int,
    search_interval: tuple[float, float],
    N: int = 400,
    tol: float = 1e-6,
) -> float:
    """Largest lambda at which the first-return series stays at or below one.

    Bisection on the monotone map lambda -> Phi(x, x | lambda); a divergent
    partial sum counts as exceeding one (the terms are nonnegative). Returns
    the interval's upper end when the series never reaches one there.
    """
    lo, hi = float(search_interval[0]), float(search_interval[1])
    if not (0.0 <= lo < hi):
        raise ContractError("need 0 <= lo < hi")
    table = build_series_table(K, x, target=x, N=N)

    def phi_le_one(lam: float) -> bool:
        ev = evaluate_Phi(table, lam)
        return ev.partial_sum <= 1.0

    if not phi_le_one(lo):
        raise ContractError(f"first-return series already exceeds 1 at lambda={lo}")
    if phi_le_one(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if phi_le_one(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)

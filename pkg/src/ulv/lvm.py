"""Latent-level stage: two-way random-effects modeling of difference matrices.

An m x n difference matrix D with rows for case subjects and columns for
control subjects is modeled as

    d_ij = a_i - b_j + e_ij

with a_i ~ N(mu + beta' x_i, s1^2), b_j ~ N(beta' x_j, s0^2) and
e_ij ~ N(0, s^2) mutually independent, so that

    E[d_ij]   = mu + beta'(x_i - x_j)
    cov(d_ij, d_kl) = s1_i [i=k] + s0_j [j=l] + s^2 [i=k, j=l].

mu is the group effect on the metric scale; under the weighted analysis the
latent variances are divided by the per-subject cell counts. The module
offers a closed-form moment test for the plain two-group case, exact least
squares solutions for the latent levels, a profiled maximum-likelihood fit
for the covariate-adjusted / weighted / multi-group cases, and Wald and
likelihood-ratio tests on the fitted models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .pairwise import DifferenceMatrix

VARIANCE_FLOOR = 1e-12

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LatentModelConfig:
    """Options for fitting the latent-variable model.

    covariates is an (m + n) x p matrix of per-subject covariate values with
    case subjects stacked above control subjects; only differences x_i - x_j
    enter the model. The weighted flag divides each latent variance by the
    subject's cluster size. null_center overrides the metric's default null
    value; the Wald reference distribution is t with m + n - 2 degrees of
    freedom unless normal_approx is set.
    """

    covariates: np.ndarray | None = None
    weighted: bool = False
    null_center: float | None = None
    normal_approx: bool = False
    max_iterations: int = 500
    rel_tol: float = 1e-10


@dataclass
class ModelFit:
    """Maximum-likelihood fit of the latent model for one difference matrix."""

    mu_hat: float
    beta_hat: np.ndarray | None
    var_case: float
    var_control: float
    var_resid: float
    a_hat: np.ndarray
    b_hat: np.ndarray
    loglik: float
    converged: bool
    n_iterations: int
    mu_se: float
    n_case: int
    n_control: int
    null_center: float
    weighted: bool


@dataclass
class TestResult:
    """Outcome of a per-gene test on the difference-matrix scale."""

    gene_id: str
    effect: float
    statistic: float
    df: float
    p_value: float
    method: str
    degenerate: bool = False
    condition_effects: dict[str, float] | None = None


class LseConstraint(Enum):
    """Identifying constraint selecting one least-squares solution."""

    ZERO_MEAN_CONTROL = "zero-mean-control"
    MIN_NORM = "min-norm"


def _two_sided_p(stat: float, df: float, normal_approx: bool) -> float:
    if normal_approx:
        return float(2.0 * sps.norm.sf(abs(stat)))
    return float(2.0 * sps.t.sf(abs(stat), df))


def _one_sided_p(stat: float, df: float, normal_approx: bool, greater: bool) -> float:
    z = stat if greater else -stat
    if normal_approx:
        return float(sps.norm.sf(z))
    return float(sps.t.sf(z, df))


def _p_from_stat(stat: float, df: float, alternative: str, normal_approx: bool) -> float:
    if alternative == "two-sided":
        return _two_sided_p(stat, df, normal_approx)
    if alternative == "greater":
        return _one_sided_p(stat, df, normal_approx, greater=True)
    if alternative == "less":
        return _one_sided_p(stat, df, normal_approx, greater=False)
    raise ValueError(f"unknown alternative {alternative!r}")


def _degenerate_result(
    gene_id: str, effect: float, mu0: float, df: float, method: str
) -> TestResult:
    # continuity limits: exact null -> p = 1, any nonzero offset -> p = 0
    if effect == mu0:
        return TestResult(gene_id, effect, 0.0, df, 1.0, method, degenerate=True)
    stat = math.copysign(math.inf, effect - mu0)
    return TestResult(gene_id, effect, stat, df, 0.0, method, degenerate=True)


def closed_form_test(
    D: DifferenceMatrix,
    null_center: float | None = None,
    alternative: str = "two-sided",
    normal_approx: bool = False,
    gene_id: str = "",
    method: str = "ulv-closed-form",
) -> TestResult:
    """Moment-based t-test for the unweighted, covariate-free two-group model.

    The statistic is (dbar - mu0) / sqrt(s_row^2 / m + s_col^2 / n) with
    s_row^2 the sample variance of the case row means and s_col^2 that of
    the control column means; it is referred to a t distribution with
    m + n - 2 degrees of freedom and is identical to the two-sample
    t-statistic on the least-squares latent levels. The small residual
    variance term of order 1/(mn) is dropped; the ML path retains it.
    """
    V = D.values
    m, n = V.shape
    mu0 = D.null_center if null_center is None else null_center
    grand = float(V.mean())
    s_row = float(V.mean(axis=1).var(ddof=1))
    s_col = float(V.mean(axis=0).var(ddof=1))
    se = math.sqrt(s_row / m + s_col / n)
    df = float(m + n - 2)
    if se == 0.0:
        return _degenerate_result(gene_id, grand, mu0, df, method)
    stat = (grand - mu0) / se
    p = _p_from_stat(stat, df, alternative, normal_approx)
    return TestResult(gene_id, grand, stat, df, p, method)


def lse_solution(
    D: DifferenceMatrix, constraint: LseConstraint = LseConstraint.ZERO_MEAN_CONTROL
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares latent levels (a_hat, b_hat) for d_ij = a_i - b_j.

    Solutions are unique up to adding a common constant to both vectors.
    ZERO_MEAN_CONTROL pins sum(b_hat) = 0:

        a_i = row mean of D,  b_j = grand mean - column mean.

    MIN_NORM shifts both by the constant -m * grand / (m + n), which
    minimizes sum(a^2) + sum(b^2) and reproduces the Moore-Penrose
    pseudoinverse solution of the pairwise design matrix. Both constraints
    give the same fitted differences a_i - b_j, and for separable metrics
    the fit is exact.
    """
    V = D.values
    m, n = V.shape
    grand = float(V.mean())
    a_hat = V.mean(axis=1).copy()
    b_hat = grand - V.mean(axis=0)
    if constraint is LseConstraint.MIN_NORM:
        shift = -m * grand / (m + n)
        a_hat = a_hat + shift
        b_hat = b_hat + shift
    return a_hat, b_hat


# ---------------------------------------------------------------------------
# Profiled Gaussian likelihood machinery
# ---------------------------------------------------------------------------


@dataclass
class _Layout:
    """Stacked difference data with structured fixed effects.

    Rows are case subjects (possibly several conditions stacked), columns
    are the shared control subjects. Every fixed-effect column has the form
    X_k[i, j] = u_k[i] + w_k[j], so it lies in the column space of the
    row/column indicator matrix U and all GLS cross products live in the
    (R + C)-dimensional space of row and column sums. The likelihood is
    evaluated through the eigendecomposition of the small capacitance
    matrix, with the part of the data orthogonal to additive structure
    entering only through its exact interaction sum of squares; this stays
    accurate when variance components collapse to the floor.
    """

    d: np.ndarray  # (R, C) data, any offset already subtracted
    u: np.ndarray  # (q, R)
    w: np.ndarray  # (q, C)
    row_group: np.ndarray  # (R,) variance-group index, 0..M-1
    n_groups: int  # M
    row_div: np.ndarray  # (R,) cluster sizes if weighted else ones
    col_div: np.ndarray  # (C,)

    # precomputed in __post_init__
    N: int = field(init=False)
    UtU: np.ndarray = field(init=False)
    Ut_d: np.ndarray = field(init=False)
    ss_int: float = field(init=False)
    UtX: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        R, C = self.d.shape
        q = self.u.shape[0]
        self.N = R * C
        self.UtU = np.zeros((R + C, R + C))
        self.UtU[:R, :R] = C * np.eye(R)
        self.UtU[R:, R:] = R * np.eye(C)
        self.UtU[:R, R:] = 1.0
        self.UtU[R:, :R] = 1.0
        row_sums = self.d.sum(axis=1)
        col_sums = self.d.sum(axis=0)
        self.Ut_d = np.concatenate([row_sums, col_sums])
        inter = (
            self.d
            - self.d.mean(axis=1, keepdims=True)
            - self.d.mean(axis=0, keepdims=True)
            + self.d.mean()
        )
        self.ss_int = float((inter**2).sum())
        su = self.u.sum(axis=1)
        sw = self.w.sum(axis=1)
        self.UtX = np.concatenate(
            [C * self.u + sw[:, None], R * self.w + su[:, None]], axis=1
        ).T  # (R + C, q)
        if q:
            xtx = (
                C * (self.u @ self.u.T)
                + R * (self.w @ self.w.T)
                + np.outer(su, sw)
                + np.outer(sw, su)
            )
            if np.linalg.matrix_rank(xtx, tol=1e-10 * max(1.0, self.N)) < q:
                raise ValueError("collinear covariates")

    @property
    def n_rows(self) -> int:
        return self.d.shape[0]

    @property
    def n_cols(self) -> int:
        return self.d.shape[1]

    def variances(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Map log-scale parameters to (row, column, residual) variances."""
        g = VARIANCE_FLOOR + np.exp(np.clip(theta, None, 45.0))
        v_row = g[self.row_group] / self.row_div
        v_col = g[self.n_groups] / self.col_div
        return v_row, v_col, float(g[self.n_groups + 1])

    def profile(self, theta: np.ndarray):
        """Profiled log-likelihood and GLS summaries at one parameter point.

        Returns (loglik, coef, coef_cov, internals) where internals carry
        the factorization pieces needed for latent-level predictions.
        """
        q = self.u.shape[0]
        v_row, v_col, s = self.variances(theta)
        chalf = np.sqrt(np.concatenate([v_row, v_col]))
        cap = chalf[:, None] * self.UtU * chalf[None, :]
        lam, vecs = np.linalg.eigh(cap)
        lam = np.maximum(lam, 0.0)
        logdet = (self.N - lam.size) * math.log(s) + float(np.log(s + lam).sum())
        # drop the exact null direction of the additive design (one zero
        # eigenvalue); every genuine direction stays far above this cut
        keep = lam > lam[-1] * 1e-14 if lam[-1] > 0 else np.zeros(lam.size, bool)
        W = (chalf[:, None] * vecs[:, keep]) / np.sqrt(lam[keep])[None, :]
        denom = s + lam[keep]
        cd = W.T @ self.Ut_d
        d_sig_d = float((cd**2 / denom).sum()) + self.ss_int / s
        if q:
            CX = W.T @ self.UtX  # (K, q)
            xtsx = CX.T @ (CX / denom[:, None])
            xtsd = CX.T @ (cd / denom)
            try:
                cf_x = cho_factor(xtsx)
            except LinAlgError as exc:
                raise ValueError("collinear covariates") from exc
            coef = cho_solve(cf_x, xtsd)
            coef_cov = cho_solve(cf_x, np.eye(q))
            quad = d_sig_d - float(xtsd @ coef)
        else:
            coef = np.zeros(0)
            coef_cov = np.zeros((0, 0))
            quad = d_sig_d
        loglik = -0.5 * (self.N * _LOG_2PI + logdet + quad)
        internals = (W, denom, cd, v_row, v_col)
        return loglik, coef, coef_cov, internals

    def blups(self, coef: np.ndarray, internals):
        """Best linear unbiased predictions of the latent row/column effects."""
        W, denom, cd, v_row, v_col = internals
        R = self.d.shape[0]
        cr = cd - (W.T @ self.UtX) @ coef if coef.size else cd
        ut_sig_r = (self.UtU @ W) @ (cr / denom)
        alpha = v_row * ut_sig_r[:R]
        gamma = -v_col * ut_sig_r[R:]
        return alpha, gamma


def _solve_spd(A, b):
    """Cholesky solve of a small symmetric positive definite system."""
    nd = len(b)
    L = [[0.0] * nd for _ in range(nd)]
    for i in range(nd):
        for j in range(i + 1):
            acc = A[i][j] - sum(L[i][k] * L[j][k] for k in range(j))
            if i == j:
                if acc <= 0.0:
                    raise ValueError("collinear covariates")
                L[i][i] = math.sqrt(acc)
            else:
                L[i][j] = acc / L[j][j]
    y = [0.0] * nd
    for i in range(nd):
        y[i] = (b[i] - sum(L[i][k] * y[k] for k in range(i))) / L[i][i]
    x = [0.0] * nd
    for i in reversed(range(nd)):
        x[i] = (y[i] - sum(L[k][i] * x[k] for k in range(i + 1, nd))) / L[i][i]
    return x


class _BalancedObjective:
    """Closed-form profiled negative log-likelihood for the unweighted model.

    With equal latent variances within rows and within columns the
    covariance eigenstructure is explicit: row contrasts, column contrasts,
    one mixed grand-mean direction, and the residual space. The data enter
    only through a handful of precomputed scalar cross products, so one
    evaluation costs a few dozen float operations. Numerically identical to
    _Layout.profile at the same parameters; used to steer the simplex
    search, never to report results.
    """

    def __init__(self, layout: _Layout) -> None:
        R, C = layout.d.shape
        q = layout.u.shape[0]
        self.R, self.C, self.N, self.q = R, C, R * C, q
        r = layout.d.sum(axis=1)
        c = layout.d.sum(axis=0)
        T = float(r.sum())
        self.T_d = T
        self.ss_int = layout.ss_int
        self.Srr_dd = float(r @ r) - T * T / R
        self.Scc_dd = float(c @ c) - T * T / C
        u, w = layout.u, layout.w

        def ctr(a, b, length):
            return float(a @ b) - float(a.sum()) * float(b.sum()) / length

        self.SrrXX = [[C * C * ctr(u[k], u[l], R) for l in range(q)] for k in range(q)]
        self.SccXX = [[R * R * ctr(w[k], w[l], C) for l in range(q)] for k in range(q)]
        self.T_X = [C * float(u[k].sum()) + R * float(w[k].sum()) for k in range(q)]
        self.SrrXd = [C * ctr(u[k], r, R) for k in range(q)]
        self.SccXd = [R * ctr(w[k], c, C) for k in range(q)]

    def __call__(self, theta) -> float:
        v1 = VARIANCE_FLOOR + math.exp(min(theta[0], 45.0))
        v0 = VARIANCE_FLOOR + math.exp(min(theta[1], 45.0))
        s = VARIANCE_FLOOR + math.exp(min(theta[2], 45.0))
        R, C, N, q = self.R, self.C, self.N, self.q
        er = s + C * v1
        ec = s + R * v0
        eb = s + C * v1 + R * v0
        ar = 1.0 / (C * er)
        ac = 1.0 / (R * ec)
        ab = 1.0 / (N * eb)
        d_sig_d = (
            ar * self.Srr_dd + ac * self.Scc_dd + ab * self.T_d * self.T_d
            + self.ss_int / s
        )
        A = [
            [
                ar * self.SrrXX[k][l] + ac * self.SccXX[k][l]
                + ab * self.T_X[k] * self.T_X[l]
                for l in range(q)
            ]
            for k in range(q)
        ]
        b = [
            ar * self.SrrXd[k] + ac * self.SccXd[k] + ab * self.T_X[k] * self.T_d
            for k in range(q)
        ]
        coef = _solve_spd(A, b)
        quad = d_sig_d - sum(bk * ck for bk, ck in zip(b, coef))
        logdet = (
            (R - 1) * math.log(er)
            + (C - 1) * math.log(ec)
            + math.log(eb)
            + (N - R - C + 1) * math.log(s)
        )
        return 0.5 * (N * _LOG_2PI + logdet + quad)


class _BlockBalancedObjective:
    """Profiled negative log-likelihood for unweighted condition-blocked rows.

    Rows carry one latent variance per condition block and columns share
    one, so the covariance eigenstructure is explicit: within-block row
    contrasts, column contrasts, an (M + 1)-dimensional block-mean space,
    and the residual space. The data and every structured fixed-effect
    column enter through small precomputed Gram matrices. Numerically
    identical to _Layout.profile at the same parameters; used only to steer
    the simplex search.
    """

    def __init__(self, layout: _Layout) -> None:
        d = layout.d
        R, C = d.shape
        q = layout.u.shape[0]
        M = layout.n_groups
        self.R, self.C, self.N, self.q, self.M = R, C, R * C, q, M
        self.ss_int = layout.ss_int
        # U-coordinates of d and each fixed-effect column: rows then columns
        V = np.column_stack([layout.Ut_d, layout.UtX.reshape(R + C, q)])
        rows, cols = V[:R], V[R:]
        self.blocks = [np.flatnonzero(layout.row_group == m) for m in range(M)]
        self.Nm = np.array([len(b) for b in self.blocks], dtype=float)
        self.G_block = []
        self.block_sums = np.empty((M, 1 + q))
        for m, b in enumerate(self.blocks):
            Vb = rows[b]
            self.block_sums[m] = Vb.sum(axis=0)
            centered = Vb - Vb.mean(axis=0, keepdims=True)
            self.G_block.append(centered.T @ centered)
        centered_cols = cols - cols.mean(axis=0, keepdims=True)
        self.G_col = centered_cols.T @ centered_cols
        self.col_totals = cols.sum(axis=0)

    def __call__(self, theta) -> float:
        th = np.clip(np.asarray(theta, dtype=float), None, 45.0)
        g = VARIANCE_FLOOR + np.exp(th)
        v_m = g[: self.M]
        v0 = g[self.M]
        s = g[self.M + 1]
        R, C, N, q, M = self.R, self.C, self.N, self.q, self.M

        Q = self.G_col / (R * (s + R * v0))
        logdet = (C - 1) * math.log(s + R * v0)
        for m in range(M):
            er = s + C * v_m[m]
            Q = Q + self.G_block[m] / (C * er)
            logdet += (self.Nm[m] - 1) * math.log(er)

        # block-mean space: one direction per condition plus the column mean
        G = np.zeros((M + 1, M + 1))
        z = np.empty((M + 1, 1 + q))
        sq_vm = np.sqrt(v_m)
        for m in range(M):
            G[m, m] = C * v_m[m]
            G[m, M] = G[M, m] = math.sqrt(v_m[m] * v0 * self.Nm[m] * C)
            z[m] = sq_vm[m] * self.block_sums[m] / math.sqrt(self.Nm[m])
        G[M, M] = R * v0
        z[M] = math.sqrt(v0) * self.col_totals / math.sqrt(C)
        lam, vecs = np.linalg.eigh(G)
        lam = np.maximum(lam, 0.0)
        keep = lam > lam[-1] * 1e-14 if lam[-1] > 0 else np.zeros(lam.size, bool)
        zz = vecs[:, keep].T @ z  # (K, 1 + q)
        scale = 1.0 / ((s + lam[keep]) * lam[keep])
        Q = Q + zz.T @ (zz * scale[:, None])
        logdet += float(np.log(s + lam[keep]).sum())
        logdet += (N - R - C + 1) * math.log(s)

        d_sig_d = Q[0, 0] + self.ss_int / s
        if q:
            coef = _solve_spd(
                [[Q[1 + k, 1 + l] for l in range(q)] for k in range(q)],
                [Q[1 + k, 0] for k in range(q)],
            )
            quad = d_sig_d - sum(Q[1 + k, 0] * coef[k] for k in range(q))
        else:
            quad = d_sig_d
        return 0.5 * (N * _LOG_2PI + logdet + quad)


def _initial_points(layout: _Layout) -> list[np.ndarray]:
    """Deterministic restarts: method of moments, equal split, residual heavy."""
    d = layout.d
    R, C = d.shape
    M = layout.n_groups
    total = float(d.var())
    scale = max(total, 1e-8)

    row_means = d.mean(axis=1)
    col_means = d.mean(axis=0)
    ms_int = layout.ss_int / max((R - 1) * (C - 1), 1)

    mom = np.empty(M + 2)
    for g in range(M):
        rows = row_means[layout.row_group == g]
        rv = float(rows.var(ddof=1)) if rows.size > 1 else scale / 3.0
        est = rv - ms_int / C
        if layout.row_div.max() > 1:
            est *= float(layout.row_div[layout.row_group == g].mean())
        mom[g] = max(est, 1e-4 * scale)
    cv = float(col_means.var(ddof=1)) - ms_int / R
    if layout.col_div.max() > 1:
        cv *= float(layout.col_div.mean())
    mom[M] = max(cv, 1e-4 * scale)
    mom[M + 1] = max(ms_int, 1e-4 * scale)

    equal = np.full(M + 2, scale / 3.0)
    resid_heavy = np.full(M + 2, scale / 100.0)
    resid_heavy[M + 1] = scale

    return [np.log(mom), np.log(equal), np.log(resid_heavy)]


def _nelder_mead(f, x0, max_iterations: int, rel_tol: float):
    """Deterministic Nelder-Mead simplex minimizer on plain floats.

    Stops when the simplex function values agree to rel_tol relative to
    their magnitude, or after max_iterations. Returns (x, fmin, n_iter,
    converged).
    """
    dim = len(x0)
    simplex = [list(x0)]
    for k in range(dim):
        p = list(x0)
        p[k] += 0.05 if p[k] != 0.0 else 0.00025
        simplex.append(p)
    fvals = [f(p) for p in simplex]

    n_iter = 0
    converged = False
    while n_iter < max_iterations:
        order = sorted(range(dim + 1), key=fvals.__getitem__)
        simplex = [simplex[i] for i in order]
        fvals = [fvals[i] for i in order]
        if fvals[-1] - fvals[0] <= rel_tol * (abs(fvals[0]) + 1.0):
            converged = True
            break
        n_iter += 1
        centroid = [
            sum(simplex[i][k] for i in range(dim)) / dim for k in range(dim)
        ]
        worst = simplex[-1]
        reflected = [centroid[k] + (centroid[k] - worst[k]) for k in range(dim)]
        f_r = f(reflected)
        if f_r < fvals[0]:
            expanded = [centroid[k] + 2.0 * (centroid[k] - worst[k]) for k in range(dim)]
            f_e = f(expanded)
            if f_e < f_r:
                simplex[-1], fvals[-1] = expanded, f_e
            else:
                simplex[-1], fvals[-1] = reflected, f_r
        elif f_r < fvals[-2]:
            simplex[-1], fvals[-1] = reflected, f_r
        else:
            if f_r < fvals[-1]:
                contracted = [centroid[k] + 0.5 * (reflected[k] - centroid[k]) for k in range(dim)]
            else:
                contracted = [centroid[k] + 0.5 * (worst[k] - centroid[k]) for k in range(dim)]
            f_c = f(contracted)
            if f_c < min(f_r, fvals[-1]):
                simplex[-1], fvals[-1] = contracted, f_c
            else:
                best = simplex[0]
                for i in range(1, dim + 1):
                    simplex[i] = [
                        best[k] + 0.5 * (simplex[i][k] - best[k]) for k in range(dim)
                    ]
                    fvals[i] = f(simplex[i])
    order = sorted(range(dim + 1), key=fvals.__getitem__)
    return simplex[order[0]], fvals[order[0]], n_iter, converged


def _maximize(layout: _Layout, max_iterations: int, rel_tol: float, fast=None):
    """Simplex search over log variance components with profiled fixed effects.

    fast, when given, is a cheap scalar objective identical to the general
    profiled likelihood; the general engine always produces the reported
    quantities at the located optimum.
    """
    if fast is None:

        def neg_ll(theta) -> float:
            return -layout.profile(np.asarray(theta, dtype=float))[0]

    else:
        neg_ll = fast

    best = None
    for x0 in _initial_points(layout):
        res = _nelder_mead(neg_ll, list(x0), max_iterations, rel_tol)
        if best is None or res[1] < best[1]:
            best = res
    theta, fmin, n_iter, converged = best
    return np.asarray(theta, dtype=float), -fmin, n_iter, converged


def _degenerate_fit(D: DifferenceMatrix, config: LatentModelConfig) -> ModelFit:
    const = float(D.values.flat[0])
    m, n = D.values.shape
    p = 0 if config.covariates is None else config.covariates.shape[1]
    return ModelFit(
        mu_hat=const,
        beta_hat=np.zeros(p) if p else None,
        var_case=0.0,
        var_control=0.0,
        var_resid=0.0,
        a_hat=np.full(m, const),
        b_hat=np.zeros(n),
        loglik=math.inf,
        converged=True,
        n_iterations=0,
        mu_se=0.0,
        n_case=m,
        n_control=n,
        null_center=D.null_center if config.null_center is None else config.null_center,
        weighted=config.weighted,
    )


def _validate_covariates(
    covariates: np.ndarray | None, n_subjects: int
) -> np.ndarray | None:
    if covariates is None:
        return None
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != n_subjects:
        raise ValueError(
            f"covariates have {x.shape[0]} rows, expected one per subject ({n_subjects})"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("covariates contain non-finite values")
    if x.shape[1] >= n_subjects - 1:
        raise ValueError("too many covariates for the number of subjects")
    return x


def _two_group_layout(
    D: DifferenceMatrix, config: LatentModelConfig
) -> tuple[_Layout, int]:
    m, n = D.values.shape
    x = _validate_covariates(config.covariates, m + n)
    p = 0 if x is None else x.shape[1]
    u = np.ones((1 + p, m))
    w = np.zeros((1 + p, n))
    if p:
        u[1:] = x[:m].T
        w[1:] = -x[m:].T
    row_div = D.case_sizes.astype(float) if config.weighted else np.ones(m)
    col_div = D.control_sizes.astype(float) if config.weighted else np.ones(n)
    layout = _Layout(
        d=D.values,
        u=u,
        w=w,
        row_group=np.zeros(m, dtype=int),
        n_groups=1,
        row_div=row_div,
        col_div=col_div,
    )
    return layout, p


def fit_latent_model(
    D: DifferenceMatrix, config: LatentModelConfig | None = None
) -> ModelFit:
    """Maximum-likelihood fit of the latent two-way model to one matrix.

    Fixed effects (mu and covariate coefficients) are profiled out by
    generalized least squares at each variance-component candidate; the
    variance components are searched on the log scale by a Nelder-Mead
    simplex from three deterministic starts. In the unweighted, covariate
    free case the returned mu_hat equals the grand mean of D, which is the
    MLE.
    """
    config = config or LatentModelConfig()
    if float(np.ptp(D.values)) == 0.0:
        return _degenerate_fit(D, config)
    if config.weighted:
        k_case = np.unique(D.case_sizes)
        k_control = np.unique(D.control_sizes)
        if k_case.size == 1 and k_control.size == 1:
            # equal sizes within each group: the weighted model is the
            # unweighted one with rescaled latent variances, so fit that
            # exactly and rescale the reported components
            inner = fit_latent_model(
                D,
                LatentModelConfig(
                    covariates=config.covariates,
                    weighted=False,
                    null_center=config.null_center,
                    normal_approx=config.normal_approx,
                    max_iterations=config.max_iterations,
                    rel_tol=config.rel_tol,
                ),
            )
            inner.var_case *= float(k_case[0])
            inner.var_control *= float(k_control[0])
            inner.weighted = True
            return inner
    layout, p = _two_group_layout(D, config)
    fast = None if config.weighted else _BalancedObjective(layout)
    theta, _, n_iter, success = _maximize(
        layout, config.max_iterations, config.rel_tol, fast=fast
    )
    loglik, coef, coef_cov, internals = layout.profile(theta)
    alpha, gamma = layout.blups(coef, internals)
    g = VARIANCE_FLOOR + np.exp(theta)
    mu = float(coef[0])
    return ModelFit(
        mu_hat=mu,
        beta_hat=coef[1:].copy() if p else None,
        var_case=float(g[0]),
        var_control=float(g[1]),
        var_resid=float(g[2]),
        a_hat=mu + alpha,
        b_hat=gamma,
        loglik=loglik,
        converged=success,
        n_iterations=n_iter,
        mu_se=float(math.sqrt(max(coef_cov[0, 0], 0.0))),
        n_case=D.values.shape[0],
        n_control=D.values.shape[1],
        null_center=D.null_center if config.null_center is None else config.null_center,
        weighted=config.weighted,
    )


def wald_test(
    fit: ModelFit,
    null_center: float | None = None,
    alternative: str = "two-sided",
    normal_approx: bool = False,
    gene_id: str = "",
    method: str = "ulv-wald",
) -> TestResult:
    """Wald test of the fitted group effect against the null center.

    Uses t with m + n - 2 degrees of freedom (the closed-form reference) or
    the standard normal when normal_approx is set.
    """
    mu0 = fit.null_center if null_center is None else null_center
    df = float(fit.n_case + fit.n_control - 2)
    if fit.mu_se == 0.0:
        return _degenerate_result(gene_id, fit.mu_hat, mu0, df, method)
    stat = (fit.mu_hat - mu0) / fit.mu_se
    p = _p_from_stat(stat, df, alternative, normal_approx)
    return TestResult(gene_id, fit.mu_hat, stat, df, p, method)


def _shared_controls(matrices: Mapping[str, DifferenceMatrix]) -> None:
    items = list(matrices.values())
    ref = items[0]
    for D in items[1:]:
        if D.control_ids != ref.control_ids:
            raise ValueError("all conditions must share the same reference subjects")
        if not np.array_equal(D.control_sizes, ref.control_sizes):
            raise ValueError("reference cluster sizes differ between matrices")


def multi_group_test(
    matrices: Mapping[str, DifferenceMatrix],
    config: LatentModelConfig | None = None,
    gene_id: str = "",
    method: str = "ulv-multi",
) -> TestResult:
    """Likelihood-ratio test that all condition means equal the null center.

    Each non-reference condition contributes one difference matrix against
    the shared reference subjects; the joint model gives every condition its
    own mean and latent variance while the reference levels are shared. The
    null model pins all condition means at the null center but keeps the
    variance components free. The statistic is referred to chi-square with
    one degree of freedom per condition.
    """
    if not matrices:
        raise ValueError("no difference matrices supplied")
    config = config or LatentModelConfig()
    names = list(matrices)
    _shared_controls(matrices)
    mats = [matrices[name] for name in names]
    M = len(mats)
    for name, D in zip(names, mats):
        if D.values.shape[0] < 2:
            raise ValueError(f"insufficient subjects in condition {name!r}")
    mu0 = mats[0].null_center if config.null_center is None else config.null_center

    stacked = np.concatenate([D.values for D in mats], axis=0)
    row_group = np.concatenate(
        [np.full(D.values.shape[0], k, dtype=int) for k, D in enumerate(mats)]
    )
    R, C = stacked.shape
    x = _validate_covariates(config.covariates, R + C)
    p = 0 if x is None else x.shape[1]

    if config.weighted:
        row_div = np.concatenate([D.case_sizes for D in mats]).astype(float)
        col_div = mats[0].control_sizes.astype(float)
    else:
        row_div = np.ones(R)
        col_div = np.ones(C)

    if float(np.ptp(stacked)) == 0.0:
        const = float(stacked.flat[0])
        res = _degenerate_result(gene_id, const, mu0, float(M), method)
        res.condition_effects = {name: const for name in names}
        return res

    # full model: one intercept per condition (plus covariate differences)
    u_full = np.zeros((M + p, R))
    w_full = np.zeros((M + p, C))
    for k in range(M):
        u_full[k] = (row_group == k).astype(float)
    if p:
        u_full[M:] = x[:R].T
        w_full[M:] = -x[R:].T
    full = _Layout(stacked, u_full, w_full, row_group, M, row_div, col_div)
    fast_full = None if config.weighted else _BlockBalancedObjective(full)
    theta_f, _, _, _ = _maximize(
        full, config.max_iterations, config.rel_tol, fast=fast_full
    )
    ll_full, coef_full, _, _ = full.profile(theta_f)

    # null model: means pinned at mu0, covariate effects still free
    u_null = x[:R].T.reshape(p, R) if p else np.zeros((0, R))
    w_null = -x[R:].T.reshape(p, C) if p else np.zeros((0, C))
    null = _Layout(stacked - mu0, u_null, w_null, row_group, M, row_div, col_div)
    fast_null = None if config.weighted else _BlockBalancedObjective(null)
    theta_n, _, _, _ = _maximize(
        null, config.max_iterations, config.rel_tol, fast=fast_null
    )
    ll_null = null.profile(theta_n)[0]

    stat = max(0.0, 2.0 * (ll_full - ll_null))
    p_value = float(sps.chi2.sf(stat, df=M))
    mus = {name: float(coef_full[k]) for k, name in enumerate(names)}
    effect = max(mus.values(), key=lambda v: abs(v - mu0))
    result = TestResult(gene_id, effect, stat, float(M), p_value, method)
    result.condition_effects = mus
    return result

"""Weibull proportional-hazards mixture-cure model.

The model splits survival into a logistic cure part and a Weibull latency
part: Pr(T > t | x) = p(x) + (1 - p(x)) * S0(t | x) with
p(x) = expit(alpha0 + alpha'x) the cure probability,
S0(t | x) = exp(-exp(beta0 + beta'x) * t**gamma), and hazard
h0(t | x) = gamma * t**(gamma-1) * exp(beta0 + beta'x).

Parameters are ordered (alpha0, alpha, beta0, beta, gamma) throughout.
Log-likelihood, score, observed information (negative Hessian), and the
trace correction of the Firth-type modified score are all analytic; the
test suite validates each against central finite differences of the level
below it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import expit

from .data import DataError, SurvivalDataset

STATUS_CONVERGED = "converged"
STATUS_SEPARATED = "separated"
STATUS_MAX_ITER = "max-iterations"
STATUS_NUMERICAL = "numerical-failure"

_TINY = 1e-300


class ModelError(ValueError):
    """Raised when model inputs violate a precondition."""


class PenaltyUndefinedError(ModelError):
    """Observed information is not positive definite at this point."""


@dataclass(frozen=True)
class ParamVector:
    """Full parameter vector of the mixture-cure model."""

    alpha0: float
    alpha: np.ndarray
    beta0: float
    beta: np.ndarray
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 1:
            raise ModelError("alpha and beta must be 1-d and of equal length")

    @property
    def d(self) -> int:
        return self.alpha.shape[0]

    @property
    def npar(self) -> int:
        return 2 * self.d + 3

    def to_array(self) -> np.ndarray:
        return np.concatenate(
            [[self.alpha0], self.alpha, [self.beta0], self.beta, [self.gamma]]
        )

    @classmethod
    def from_array(cls, arr: np.ndarray, d: int) -> "ParamVector":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (2 * d + 3,):
            raise ModelError(f"expected {2 * d + 3} parameters, got {arr.shape}")
        return cls(
            alpha0=float(arr[0]),
            alpha=arr[1 : d + 1].copy(),
            beta0=float(arr[d + 1]),
            beta=arr[d + 2 : 2 * d + 2].copy(),
            gamma=float(arr[-1]),
        )

    def validate(self) -> None:
        arr = self.to_array()
        if not np.all(np.isfinite(arr)):
            raise ModelError("parameters must be finite")
        if self.gamma <= 0:
            raise ModelError("gamma must be positive")


@dataclass
class FitResult:
    theta: ParamVector
    objective: float
    info: np.ndarray
    method: str
    status: str
    iterations: int
    score_sup_norm: float
    info_pd: bool

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.info)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.to_array().tolist(),
            "d": self.theta.d,
            "objective": self.objective,
            "method": self.method,
            "status": self.status,
            "iterations": self.iterations,
            "score_sup_norm": self.score_sup_norm,
            "info_pd": self.info_pd,
            "info": self.info.tolist(),
        }


@dataclass(frozen=True)
class FitControls:
    max_iter: int = 200
    score_tol: float = 1e-6
    step_tol: float = 1e-8
    max_halvings: int = 30
    coef_bound: float = 20.0
    ridge_scale: float = 1e-8


class McKernel:
    """Precomputed design arrays and analytic derivatives for one dataset.

    Rows are split by event status once; all likelihood quantities are then
    vectorized group-wise. ``theta`` arguments are flat arrays in the fixed
    parameter order.
    """

    def __init__(self, x: np.ndarray, time: np.ndarray, event: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        time = np.asarray(time, dtype=float)
        event = np.asarray(event, dtype=float)
        if np.isnan(x).any():
            raise ModelError("covariates contain missing entries")
        if np.any(time < 0):
            raise ModelError("negative time")
        self.n, self.d = x.shape
        self.p = self.d + 1
        self.npar = 2 * self.d + 3
        z = np.column_stack([np.ones(self.n), x])
        ev = event == 1.0
        self.n_ev = int(ev.sum())
        self.z_ev = z[ev]
        self.z_ce = z[~ev]
        self.t_ev = time[ev]
        self.t_ce = time[~ev]
        self.has_zero_event_time = bool(np.any(self.t_ev == 0.0))
        with np.errstate(divide="ignore"):
            self.logt_ev = np.where(self.t_ev > 0, np.log(np.maximum(self.t_ev, _TINY)), 0.0)
            self.logt_ce = np.where(self.t_ce > 0, np.log(np.maximum(self.t_ce, _TINY)), 0.0)
        self.event_rate = float(event.mean()) if self.n else 0.0
        self.total_time = float(time.sum())
        self.events = float(event.sum())

    # -- linear predictors -------------------------------------------------
    def _split(self, theta: np.ndarray):
        p = self.p
        a_co, b_co, g = theta[:p], theta[p : 2 * p], theta[-1]
        return a_co, b_co, g

    def _check(self, theta: np.ndarray) -> None:
        g = theta[-1]
        if g <= 0:
            raise ModelError("gamma must be positive")
        if self.has_zero_event_time and g != 1.0:
            raise ModelError("event at time 0 leaves the hazard undefined unless gamma == 1")

    def _parts(self, theta: np.ndarray):
        a_co, b_co, g = self._split(theta)
        a_ev = self.z_ev @ a_co
        b_ev = self.z_ev @ b_co
        a_ce = self.z_ce @ a_co
        b_ce = self.z_ce @ b_co
        # cap the cumulative-hazard exponent just below overflow; rows out
        # there contribute -inf log-likelihood or exactly-zero weights anyway
        lam_ev = np.where(
            self.t_ev > 0, np.exp(np.minimum(b_ev + g * self.logt_ev, 700.0)), 0.0
        )
        lam_ce = np.where(
            self.t_ce > 0, np.exp(np.minimum(b_ce + g * self.logt_ce, 700.0)), 0.0
        )
        return a_ev, b_ev, lam_ev, a_ce, b_ce, lam_ce, g

    # -- log-likelihood ----------------------------------------------------
    def loglik(self, theta: np.ndarray) -> float:
        self._check(theta)
        a_ev, b_ev, lam_ev, a_ce, _, lam_ce, g = self._parts(theta)
        # events: log h0 + log S0 + log(1 - pi)
        ll_ev = (
            math.log(g) * self.n_ev
            + np.sum((g - 1.0) * self.logt_ev + b_ev - lam_ev)
            - np.sum(np.logaddexp(0.0, a_ev))
        )
        # censored: log(pi + (1 - pi) * S0), computed in log space
        log_pi = -np.logaddexp(0.0, -a_ce)
        log_1mpi = -np.logaddexp(0.0, a_ce)
        ll_ce = np.sum(np.logaddexp(log_pi, log_1mpi - lam_ce))
        return float(ll_ev + ll_ce)

    # -- per-row weight bundles ---------------------------------------------
    def _censored_weights(self, a_ce, lam_ce, order: int):
        """Score/Hessian/third-derivative weights for censored rows.

        Returns per-row derivatives of log(pi + (1-pi)S0) with respect to the
        two linear predictors; the shape parameter enters through powers of
        log(t) applied by the caller.
        """
        pi = expit(a_ce)
        s1 = pi * (1.0 - pi)
        s = np.exp(-lam_ce)
        f = pi + (1.0 - pi) * s
        f = np.maximum(f, _TINY)
        sl = s * lam_ce
        e1 = s1 * (1.0 - s) / f
        c1 = (1.0 - pi) * sl / f
        out = {"u_a": e1, "u_b": -c1}
        if order < 2:
            return out
        # polynomial factors in the hazard only matter where s*lam > 0, which
        # needs lam < ~745; the cap avoids inf*0 at astronomically large lam
        lam_c = np.minimum(lam_ce, 1e6)
        s2 = s1 * (1.0 - 2.0 * pi)
        d1 = s1 * sl / f
        e2 = s2 * (1.0 - s) / f
        w2 = (1.0 - pi) * sl * (lam_c - 1.0) / f
        out.update(
            h_aa=e2 - e1 * e1,
            h_ab=d1 + e1 * c1,
            h_bb=w2 - c1 * c1,
        )
        if order < 3:
            return out
        s3 = s1 * (1.0 - 6.0 * pi + 6.0 * pi * pi)
        e3 = s3 * (1.0 - s) / f
        d2 = s2 * sl / f
        d3 = s1 * sl * (1.0 - lam_c) / f
        w3 = (1.0 - pi) * sl * (-lam_c * lam_c + 3.0 * lam_c - 1.0) / f
        out.update(
            t_aaa=e3 - 3.0 * e2 * e1 + 2.0 * e1 ** 3,
            t_aab=d2 + e2 * c1 - 2.0 * d1 * e1 - 2.0 * e1 * e1 * c1,
            t_abb=d3 + 2.0 * d1 * c1 - w2 * e1 + 2.0 * e1 * c1 * c1,
            t_bbb=w3 + 3.0 * w2 * c1 - 2.0 * c1 ** 3,
        )
        return out

    def _event_weights(self, a_ev, lam_ev, order: int):
        pi = expit(a_ev)
        out = {"u_a": -pi, "u_b": 1.0 - lam_ev}
        if order < 2:
            return out
        s1 = pi * (1.0 - pi)
        out.update(h_aa=-s1, h_ab=np.zeros_like(pi), h_bb=-lam_ev)
        if order < 3:
            return out
        s2 = s1 * (1.0 - 2.0 * pi)
        zero = np.zeros_like(pi)
        out.update(t_aaa=-s2, t_aab=zero, t_abb=zero, t_bbb=-lam_ev)
        return out

    # -- score ---------------------------------------------------------------
    def score(self, theta: np.ndarray) -> np.ndarray:
        self._check(theta)
        a_ev, _, lam_ev, a_ce, _, lam_ce, g = self._parts(theta)
        wev = self._event_weights(a_ev, lam_ev, 1)
        wce = self._censored_weights(a_ce, lam_ce, 1)
        u_alpha = self.z_ev.T @ wev["u_a"] + self.z_ce.T @ wce["u_a"]
        u_beta = self.z_ev.T @ wev["u_b"] + self.z_ce.T @ wce["u_b"]
        u_gamma = (
            self.n_ev / g
            + float(self.logt_ev @ wev["u_b"])
            + float(self.logt_ce @ wce["u_b"])
        )
        return np.concatenate([u_alpha, u_beta, [u_gamma]])

    # -- observed information -------------------------------------------------
    def _info_from_weights(self, wev, wce, g):
        p = self.p
        k_aa_ev, k_aa_ce = -wev["h_aa"], -wce["h_aa"]
        k_ab_ev, k_ab_ce = -wev["h_ab"], -wce["h_ab"]
        k_bb_ev, k_bb_ce = -wev["h_bb"], -wce["h_bb"]
        lev, lce = self.logt_ev, self.logt_ce

        def gram(zm, w):
            return zm.T @ (zm * w[:, None])

        i_aa = gram(self.z_ev, k_aa_ev) + gram(self.z_ce, k_aa_ce)
        i_ab = gram(self.z_ev, k_ab_ev) + gram(self.z_ce, k_ab_ce)
        i_bb = gram(self.z_ev, k_bb_ev) + gram(self.z_ce, k_bb_ce)
        i_ag = self.z_ev.T @ (k_ab_ev * lev) + self.z_ce.T @ (k_ab_ce * lce)
        i_bg = self.z_ev.T @ (k_bb_ev * lev) + self.z_ce.T @ (k_bb_ce * lce)
        i_gg = (
            float((k_bb_ev * lev * lev).sum())
            + float((k_bb_ce * lce * lce).sum())
            + self.n_ev / (g * g)
        )
        info = np.empty((self.npar, self.npar))
        info[:p, :p] = i_aa
        info[:p, p : 2 * p] = i_ab
        info[p : 2 * p, :p] = i_ab.T
        info[p : 2 * p, p : 2 * p] = i_bb
        info[:p, -1] = i_ag
        info[-1, :p] = i_ag
        info[p : 2 * p, -1] = i_bg
        info[-1, p : 2 * p] = i_bg
        info[-1, -1] = i_gg
        return info

    def observed_info(self, theta: np.ndarray) -> np.ndarray:
        self._check(theta)
        a_ev, _, lam_ev, a_ce, _, lam_ce, g = self._parts(theta)
        wev = self._event_weights(a_ev, lam_ev, 2)
        wce = self._censored_weights(a_ce, lam_ce, 2)
        return self._info_from_weights(wev, wce, g)

    def score_info(self, theta: np.ndarray):
        self._check(theta)
        a_ev, _, lam_ev, a_ce, _, lam_ce, g = self._parts(theta)
        wev = self._event_weights(a_ev, lam_ev, 2)
        wce = self._censored_weights(a_ce, lam_ce, 2)
        u_alpha = self.z_ev.T @ wev["u_a"] + self.z_ce.T @ wce["u_a"]
        u_beta = self.z_ev.T @ wev["u_b"] + self.z_ce.T @ wce["u_b"]
        u_gamma = (
            self.n_ev / g
            + float(self.logt_ev @ wev["u_b"])
            + float(self.logt_ce @ wce["u_b"])
        )
        u = np.concatenate([u_alpha, u_beta, [u_gamma]])
        return u, self._info_from_weights(wev, wce, g)

    def penalized_loglik(self, theta: np.ndarray) -> float:
        info = self.observed_info(theta)
        # Cholesky both computes the log-determinant and certifies positive
        # definiteness (slogdet would accept an indefinite matrix whose
        # negative eigenvalues pair up)
        try:
            chol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise PenaltyUndefinedError(
                "observed information is not positive definite"
            ) from exc
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return self.loglik(theta) + 0.5 * logdet

    def _trace_correction(self, theta: np.ndarray):
        """Trace vector tr(I^-1 dI/dtheta_j), the information, and weights.

        Uses analytic third derivatives; per-row tensors collapse onto two
        base weight vectors with powers of log(t) carrying every
        shape-parameter index.
        """
        self._check(theta)
        p = self.p
        a_ev, _, lam_ev, a_ce, _, lam_ce, g = self._parts(theta)
        wev = self._event_weights(a_ev, lam_ev, 3)
        wce = self._censored_weights(a_ce, lam_ce, 3)
        info = self._info_from_weights(wev, wce, g)
        try:
            chol = cho_factor(info)
        except LinAlgError as exc:
            raise PenaltyUndefinedError(
                f"singular information (cond ~ {np.linalg.cond(info):.2e})"
            ) from exc
        minv = cho_solve(chol, np.eye(self.npar))

        m_aa = minv[:p, :p]
        m_ab = minv[:p, p : 2 * p]
        m_bb = minv[p : 2 * p, p : 2 * p]
        m_ag = minv[:p, -1]
        m_bg = minv[p : 2 * p, -1]
        m_gg = minv[-1, -1]

        def tau(zm, logt, w):
            q_aa = np.einsum("np,np->n", zm @ m_aa, zm)
            q_ab = np.einsum("np,np->n", zm @ m_ab, zm)
            q_bb = np.einsum("np,np->n", zm @ m_bb, zm)
            q_ag = zm @ m_ag
            q_bg = zm @ m_bg
            g1 = 2.0 * q_ab + 2.0 * logt * q_ag
            g2 = q_bb + 2.0 * logt * q_bg + (logt * logt) * m_gg
            tau_a = w["t_aaa"] * q_aa + w["t_aab"] * g1 + w["t_abb"] * g2
            tau_b = w["t_aab"] * q_aa + w["t_abb"] * g1 + w["t_bbb"] * g2
            tau_g = logt * tau_b
            return tau_a, tau_b, tau_g

        ta_ev, tb_ev, tg_ev = tau(self.z_ev, self.logt_ev, wev)
        ta_ce, tb_ce, tg_ce = tau(self.z_ce, self.logt_ce, wce)
        # event rows add the explicit 2/g^3 third derivative in gamma
        tg_extra = (2.0 / g ** 3) * m_gg * self.n_ev

        v_alpha = -(self.z_ev.T @ ta_ev + self.z_ce.T @ ta_ce)
        v_beta = -(self.z_ev.T @ tb_ev + self.z_ce.T @ tb_ce)
        v_gamma = -(float(tg_ev.sum()) + float(tg_ce.sum()) + tg_extra)

        u_alpha = self.z_ev.T @ wev["u_a"] + self.z_ce.T @ wce["u_a"]
        u_beta = self.z_ev.T @ wev["u_b"] + self.z_ce.T @ wce["u_b"]
        u_gamma = (
            self.n_ev / g
            + float(self.logt_ev @ wev["u_b"])
            + float(self.logt_ce @ wce["u_b"])
        )
        u = np.concatenate([u_alpha, u_beta, [u_gamma]])
        vtr = np.concatenate([v_alpha, v_beta, [v_gamma]])
        return u, vtr, info, minv

    def modified_score_info(self, theta: np.ndarray):
        """Firth-type modified score U + tr(I^-1 dI/dtheta)/2, with I and I^-1."""
        u, vtr, info, minv = self._trace_correction(theta)
        return u + 0.5 * vtr, info, minv

    def modified_score(self, theta: np.ndarray) -> np.ndarray:
        return self.modified_score_info(theta)[0]

    def penalty_gradient(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of the log-determinant penalty, tr(I^-1 dI/dtheta_j)/2."""
        return 0.5 * self._trace_correction(theta)[1]

    def _trace_batch(self, thetas: np.ndarray) -> np.ndarray:
        """Trace vectors tr(I^-1 dI/dtheta_j) for a batch of parameter
        vectors in one vectorized pass; rows of the result correspond to
        batch members. Raises if any member's information is not positive
        definite."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        bsz = thetas.shape[0]
        p = self.p
        a_co = thetas[:, :p]
        b_co = thetas[:, p : 2 * p]
        g = thetas[:, -1]
        if np.any(g <= 0):
            raise ModelError("gamma must be positive")

        def predictors(zm, logt, t):
            a = zm @ a_co.T  # (n, B)
            b = zm @ b_co.T
            expo = np.minimum(b + g[None, :] * logt[:, None], 700.0)
            lam = np.where((t > 0)[:, None], np.exp(expo), 0.0)
            return a, lam

        a_ev, lam_ev = predictors(self.z_ev, self.logt_ev, self.t_ev)
        a_ce, lam_ce = predictors(self.z_ce, self.logt_ce, self.t_ce)

        # event-row weights (vectorized over the batch)
        pi_ev = expit(a_ev)
        s1_ev = pi_ev * (1.0 - pi_ev)
        h_aa_ev = -s1_ev
        zeros_ev = np.zeros_like(a_ev)
        h_ab_ev = zeros_ev
        h_bb_ev = -lam_ev
        t_aaa_ev = -s1_ev * (1.0 - 2.0 * pi_ev)
        t_aab_ev = zeros_ev
        t_abb_ev = zeros_ev
        t_bbb_ev = -lam_ev

        # censored-row weights
        pi = expit(a_ce)
        s1 = pi * (1.0 - pi)
        s = np.exp(-lam_ce)
        f = np.maximum(pi + (1.0 - pi) * s, _TINY)
        sl = s * lam_ce
        lam_c = np.minimum(lam_ce, 1e6)
        e1 = s1 * (1.0 - s) / f
        c1 = (1.0 - pi) * sl / f
        s2 = s1 * (1.0 - 2.0 * pi)
        d1 = s1 * sl / f
        e2 = s2 * (1.0 - s) / f
        w2 = (1.0 - pi) * sl * (lam_c - 1.0) / f
        h_aa_ce = e2 - e1 * e1
        h_ab_ce = d1 + e1 * c1
        h_bb_ce = w2 - c1 * c1
        s3 = s1 * (1.0 - 6.0 * pi + 6.0 * pi * pi)
        e3 = s3 * (1.0 - s) / f
        d2 = s2 * sl / f
        d3 = s1 * sl * (1.0 - lam_c) / f
        w3 = (1.0 - pi) * sl * (-lam_c * lam_c + 3.0 * lam_c - 1.0) / f
        t_aaa_ce = e3 - 3.0 * e2 * e1 + 2.0 * e1 ** 3
        t_aab_ce = d2 + e2 * c1 - 2.0 * d1 * e1 - 2.0 * e1 * e1 * c1
        t_abb_ce = d3 + 2.0 * d1 * c1 - w2 * e1 + 2.0 * e1 * c1 * c1
        t_bbb_ce = w3 + 3.0 * w2 * c1 - 2.0 * c1 ** 3

        # batched information matrices via broadcast matmul (BLAS-backed)
        def grams(zm, w):
            # (B,p,n) @ (n,p) -> (B,p,p)
            return (zm.T[None, :, :] * w.T[:, None, :]) @ zm

        def gvec(zm, w):
            return w.T @ zm

        lev, lce = self.logt_ev, self.logt_ce
        i_aa = grams(self.z_ev, -h_aa_ev) + grams(self.z_ce, -h_aa_ce)
        i_ab = grams(self.z_ev, -h_ab_ev) + grams(self.z_ce, -h_ab_ce)
        i_bb = grams(self.z_ev, -h_bb_ev) + grams(self.z_ce, -h_bb_ce)
        i_ag = gvec(self.z_ev, -h_ab_ev * lev[:, None]) + gvec(
            self.z_ce, -h_ab_ce * lce[:, None]
        )
        i_bg = gvec(self.z_ev, -h_bb_ev * lev[:, None]) + gvec(
            self.z_ce, -h_bb_ce * lce[:, None]
        )
        i_gg = (
            (-h_bb_ev * (lev * lev)[:, None]).sum(axis=0)
            + (-h_bb_ce * (lce * lce)[:, None]).sum(axis=0)
            + self.n_ev / (g * g)
        )
        info = np.zeros((bsz, self.npar, self.npar))
        info[:, :p, :p] = i_aa
        info[:, :p, p : 2 * p] = i_ab
        info[:, p : 2 * p, :p] = np.transpose(i_ab, (0, 2, 1))
        info[:, p : 2 * p, p : 2 * p] = i_bb
        info[:, :p, -1] = i_ag
        info[:, -1, :p] = i_ag
        info[:, p : 2 * p, -1] = i_bg
        info[:, -1, p : 2 * p] = i_bg
        info[:, -1, -1] = i_gg
        try:
            minv = np.linalg.inv(info)
        except np.linalg.LinAlgError as exc:
            raise PenaltyUndefinedError("singular information in batch") from exc

        m_aa = minv[:, :p, :p]
        m_ab = minv[:, :p, p : 2 * p]
        m_bb = minv[:, p : 2 * p, p : 2 * p]
        m_ag = minv[:, :p, -1]
        m_bg = minv[:, p : 2 * p, -1]
        m_gg = minv[:, -1, -1]

        def quad(zm, mats):
            # (B,n,p) = zm @ mats then row dot zm -> (n,B)
            return np.einsum("bnp,np->nb", zm @ mats, zm)

        def taus(zm, logt, t_aaa, t_aab, t_abb, t_bbb):
            q_aa = quad(zm, m_aa)
            q_ab = quad(zm, m_ab)
            q_bb = quad(zm, m_bb)
            q_ag = zm @ m_ag.T
            q_bg = zm @ m_bg.T
            lt = logt[:, None]
            g1 = 2.0 * q_ab + 2.0 * lt * q_ag
            g2 = q_bb + 2.0 * lt * q_bg + (lt * lt) * m_gg[None, :]
            tau_a = t_aaa * q_aa + t_aab * g1 + t_abb * g2
            tau_b = t_aab * q_aa + t_abb * g1 + t_bbb * g2
            tau_g = lt * tau_b
            return tau_a, tau_b, tau_g

        ta_ev, tb_ev, tg_ev = taus(self.z_ev, lev, t_aaa_ev, t_aab_ev, t_abb_ev, t_bbb_ev)
        ta_ce, tb_ce, tg_ce = taus(self.z_ce, lce, t_aaa_ce, t_aab_ce, t_abb_ce, t_bbb_ce)
        tg_extra = (2.0 / g ** 3) * m_gg * self.n_ev

        v_alpha = -(ta_ev.T @ self.z_ev + ta_ce.T @ self.z_ce)
        v_beta = -(tb_ev.T @ self.z_ev + tb_ce.T @ self.z_ce)
        v_gamma = -(tg_ev.sum(axis=0) + tg_ce.sum(axis=0) + tg_extra)
        return np.concatenate([v_alpha, v_beta, v_gamma[:, None]], axis=1)

    def penalty_hessian(self, theta: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
        """Curvature of the penalty by central differences of its analytic
        gradient, all probes evaluated in one batched pass; used only to
        precondition the penalized Newton iteration, so moderate accuracy
        suffices. If probes cross the positive-definiteness wall the
        per-column fallback path takes over."""
        steps = rel_step * np.maximum(1.0, np.abs(theta))
        probes = np.repeat(theta[None, :], 2 * self.npar, axis=0)
        for j in range(self.npar):
            probes[2 * j, j] += steps[j]
            probes[2 * j + 1, j] -= steps[j]
        try:
            vtr = 0.5 * self._trace_batch(probes)
            if np.all(np.isfinite(vtr)):
                p_hess = (vtr[0::2] - vtr[1::2]).T / (2.0 * steps[None, :])
                return 0.5 * (p_hess + p_hess.T)
        except (ModelError, PenaltyUndefinedError):
            pass
        return self._penalty_hessian_careful(theta, rel_step)

    def _penalty_hessian_careful(self, theta: np.ndarray, rel_step: float) -> np.ndarray:
        """Column-by-column fallback with one-sided differences at walls."""
        try:
            g0 = self.penalty_gradient(theta)
        except (ModelError, PenaltyUndefinedError):
            return np.zeros((self.npar, self.npar))
        p_hess = np.zeros((self.npar, self.npar))
        for j in range(self.npar):
            h = rel_step * max(1.0, abs(theta[j]))
            up = theta.copy()
            dn = theta.copy()
            up[j] += h
            dn[j] -= h
            gp = gn = None
            try:
                gp = self.penalty_gradient(up)
            except (ModelError, PenaltyUndefinedError):
                pass
            try:
                gn = self.penalty_gradient(dn)
            except (ModelError, PenaltyUndefinedError):
                pass
            if gp is not None and gn is not None:
                p_hess[:, j] = (gp - gn) / (2.0 * h)
            elif gp is not None:
                p_hess[:, j] = (gp - g0) / h
            elif gn is not None:
                p_hess[:, j] = (g0 - gn) / h
        return 0.5 * (p_hess + p_hess.T)

    def default_init(self) -> np.ndarray:
        rate = min(max(self.event_rate, 1.0 / (self.n + 1.0)), self.n / (self.n + 1.0))
        alpha0 = math.log((1.0 - rate) / rate)
        events = max(self.events, 0.5)
        beta0 = math.log(events / max(self.total_time, _TINY))
        theta = np.zeros(self.npar)
        theta[0] = alpha0
        theta[self.p] = beta0
        theta[-1] = 1.0
        return theta


def _kernel(data: SurvivalDataset) -> McKernel:
    return McKernel(data.analysis_matrix(), data.time, data.event)


# ---------------------------------------------------------------------------
# Newton fitting with step-halving (shared by full fits and profile solves)
# ---------------------------------------------------------------------------


def _newton(
    kernel: McKernel,
    method: str,
    init: np.ndarray,
    controls: FitControls,
    fixed_index: int | None = None,
    fixed_value: float | None = None,
    check_separation: bool | None = None,
    penalty_hess: np.ndarray | None = None,
    penalty_hess_at: np.ndarray | None = None,
    penalty_store=None,
):
    """Solve the (modified) score equations, optionally with one component
    pinned. Returns (theta, objective, status, iterations, score_sup).

    For ML the observed information is the exact negative Hessian and this is
    damped Newton with an objective-nondecrease line search. For the
    penalized score the log-determinant penalty contributes curvature that
    the information alone misses, so steps use I - P_hat with P_hat a
    measured penalty-curvature estimate (Levenberg-shifted to positive
    definite, remeasured when the iterate drifts). Far from the root, steps
    must not decrease the objective; near it they must shrink the score
    residual, which also resolves roots where the penalized surface is very
    flat in one direction.
    """
    if method not in ("ML", "FTPL"):
        raise ModelError(f"unknown method {method!r}")
    penalized = method == "FTPL"
    if check_separation is None:
        check_separation = method == "ML"
    theta = np.asarray(init, dtype=float).copy()
    if fixed_index is not None:
        theta[fixed_index] = fixed_value
    free = np.ones(kernel.npar, dtype=bool)
    if fixed_index is not None:
        free[fixed_index] = False
    nfree = int(free.sum())
    eye_r = np.eye(nfree)

    def objective(th):
        try:
            return kernel.penalized_loglik(th) if penalized else kernel.loglik(th)
        except (PenaltyUndefinedError, ModelError):
            return -np.inf

    def grad_info(th):
        if penalized:
            u, info, _ = kernel.modified_score_info(th)
        else:
            u, info = kernel.score_info(th)
        return u, info

    obj = objective(theta)
    if not np.isfinite(obj):
        return theta, obj, STATUS_NUMERICAL, 0, np.inf
    try:
        u, info = grad_info(theta)
    except (PenaltyUndefinedError, FloatingPointError):
        return theta, obj, STATUS_NUMERICAL, 0, np.inf

    status = STATUS_MAX_ITER
    sup = np.inf
    it = 0
    measures = 0
    measure_budget = 12
    # a supplied penalty curvature is trusted until the iterate drifts from
    # the point where it was measured
    measured_at = None
    if penalty_hess is not None:
        measured_at = (
            np.asarray(penalty_hess_at, dtype=float).copy()
            if penalty_hess_at is not None
            else theta.copy()
        )
    obj_current = True

    def measure(th):
        nonlocal penalty_hess, measures, measured_at
        penalty_hess = kernel.penalty_hessian(th)
        measures += 1
        measured_at = th.copy()

    def direction(u_r, info_r):
        """Newton direction from the full curvature where it is positive
        definite, else the plain information (always an ascent metric)."""
        if penalized and penalty_hess is not None:
            mat = info_r - penalty_hess[np.ix_(free, free)]
            try:
                evals = np.linalg.eigvalsh(mat)
                if evals[0] > max(1e-6, 1e-8 * abs(float(evals[-1]))):
                    cand = np.linalg.solve(mat, u_r)
                    if np.all(np.isfinite(cand)):
                        return cand
            except np.linalg.LinAlgError:
                pass
        mat = info_r.copy()
        for _ in range(2):
            try:
                cand = np.linalg.solve(mat, u_r)
                if np.all(np.isfinite(cand)):
                    return cand
            except np.linalg.LinAlgError:
                pass
            mat = mat + max(
                controls.ridge_scale * abs(np.trace(info_r)) / max(nfree, 1), 1e-8
            ) * eye_r
        return None

    def exact_jacobian_dir(th, u_r):
        """Newton step on U = 0 from a central-difference Jacobian of the
        (modified) score over the free components; the reliable rescue when
        approximate curvature cannot make progress."""
        idx = np.flatnonzero(free)
        jac = np.empty((nfree, nfree))
        for col, jj in enumerate(idx):
            h = 1e-6 * max(1.0, abs(th[jj]))
            up = th.copy()
            dn = th.copy()
            up[jj] += h
            dn[jj] -= h
            try:
                gu, _ = grad_info(up)
                gd, _ = grad_info(dn)
            except (PenaltyUndefinedError, FloatingPointError):
                return None
            jac[:, col] = (gu[free] - gd[free]) / (2.0 * h)
        try:
            cand = np.linalg.solve(jac, -u_r)
        except np.linalg.LinAlgError:
            return None
        return cand if np.all(np.isfinite(cand)) else None

    def try_step(step_r, residual, cur_norm, cur_obj):
        """Line search; returns (trial, u_t, info_t, obj_t) or None."""
        step = np.zeros(kernel.npar)
        step[free] = step_r
        scale = 1.0
        for _ in range(controls.max_halvings + 1):
            trial = theta + scale * step
            if trial[-1] > 0:
                if residual:
                    try:
                        u_t, info_t = grad_info(trial)
                    except (PenaltyUndefinedError, FloatingPointError):
                        scale *= 0.5
                        continue
                    if np.all(np.isfinite(u_t)):
                        norm_t = float(np.linalg.norm(u_t[free])) if free.any() else 0.0
                        if norm_t < cur_norm:
                            return trial, u_t, info_t, None
                else:
                    new_obj = objective(trial)
                    if np.isfinite(new_obj) and new_obj >= cur_obj - 1e-10 * (
                        1.0 + abs(cur_obj)
                    ):
                        return trial, None, None, new_obj
            scale *= 0.5
        return None

    for it in range(1, controls.max_iter + 1):
        if not np.all(np.isfinite(u)):
            status = STATUS_NUMERICAL
            break
        sup = float(np.max(np.abs(u[free]))) if free.any() else 0.0
        if sup < controls.score_tol:
            status = STATUS_CONVERGED
            break
        if penalized:
            moved = (
                measured_at is None
                or float(np.max(np.abs(theta - measured_at))) > 0.75
            )
            if moved and measures < measure_budget:
                measure(theta)
        info_r = info[np.ix_(free, free)]
        u_r = u[free]
        residual_mode = penalized and sup < 1.0
        res_norm = float(np.linalg.norm(u_r))
        if not obj_current:
            obj = objective(theta)
            obj_current = True

        result = None
        step_r = direction(u_r, info_r)
        if step_r is not None:
            result = try_step(step_r, residual_mode, res_norm, obj)
        if result is None and penalized:
            # escalation 1: refresh the penalty curvature at this point
            if measures < measure_budget and (
                measured_at is None
                or float(np.max(np.abs(theta - measured_at))) > 1e-12
            ):
                measure(theta)
                step_r = direction(u_r, info_r)
                if step_r is not None:
                    result = try_step(step_r, residual_mode, res_norm, obj)
            # escalation 2: exact score Jacobian, judged by the residual
            if result is None:
                step_r = exact_jacobian_dir(theta, u_r)
                if step_r is not None:
                    result = try_step(step_r, True, res_norm, obj)
        if result is None:
            if step_r is None:
                status = STATUS_NUMERICAL
            else:
                status = (
                    STATUS_MAX_ITER if sup >= controls.score_tol else STATUS_CONVERGED
                )
            break

        trial, u_t, info_t, new_obj = result
        delta = float(np.max(np.abs(trial - theta)))
        theta = trial
        if u_t is not None:
            u, info = u_t, info_t
            obj_current = False
        else:
            obj = new_obj
            obj_current = True
            try:
                u, info = grad_info(theta)
            except (PenaltyUndefinedError, FloatingPointError):
                status = STATUS_NUMERICAL
                break
        if check_separation:
            coefs = theta[:-1]
            big = np.abs(coefs) > controls.coef_bound
            if np.any(big & (np.abs(u[:-1]) > 1e-4)):
                status = STATUS_SEPARATED
                sup = float(np.max(np.abs(u[free]))) if free.any() else 0.0
                break
        if delta < controls.step_tol:
            sup = float(np.max(np.abs(u[free]))) if free.any() else 0.0
            status = STATUS_CONVERGED if sup < 10 * controls.score_tol else STATUS_MAX_ITER
            break

    if check_separation and np.any(np.abs(theta[:-1]) > controls.coef_bound):
        # a coefficient this large is monotone-likelihood breakdown even if
        # the score has flattened below tolerance along the divergent path
        status = STATUS_SEPARATED
    if not obj_current:
        obj = objective(theta)
    return theta, obj, status, it, sup


def _root_rescue(kernel: McKernel, method: str, theta: np.ndarray,
                 controls: FitControls):
    """Last-resort solve of the (modified) score equations with MINPACK's
    hybrid method, started from a stalled iterate. Returns the refined theta
    or None; gamma is kept positive through a log reparametrization of the
    search (the score itself stays in the original parametrization)."""
    from scipy.optimize import root

    def to_arr(z):
        th = z.copy()
        th[-1] = np.exp(z[-1])
        return th

    def fun(z):
        th = to_arr(z)
        try:
            if method == "FTPL":
                u = kernel.modified_score(th)
            else:
                u = kernel.score(th)
        except (ModelError, PenaltyUndefinedError):
            return np.full(kernel.npar, 1e6)
        if not np.all(np.isfinite(u)):
            return np.full(kernel.npar, 1e6)
        return u

    z0 = theta.copy()
    z0[-1] = np.log(max(theta[-1], 1e-6))
    try:
        sol = root(fun, z0, method="hybr", options={"xtol": 1e-12, "maxfev": 4000})
    except Exception:
        return None
    cand = to_arr(sol.x)
    try:
        u = fun(sol.x)
    except Exception:
        return None
    if float(np.max(np.abs(u))) >= controls.score_tol or not np.all(np.isfinite(cand)):
        return None
    # accept only a genuine maximum: the curvature there must be negative
    # definite (for FTPL including the penalty's contribution)
    try:
        info = kernel.observed_info(cand)
        if method == "FTPL":
            curv = info - kernel.penalty_hessian(cand)
        else:
            curv = info
        if np.linalg.eigvalsh(curv)[0] < -1e-3:
            return None
    except (ModelError, PenaltyUndefinedError, np.linalg.LinAlgError):
        return None
    return cand


def fit_kernel(
    kernel: McKernel,
    method: str = "FTPL",
    init: np.ndarray | None = None,
    controls: FitControls = FitControls(),
) -> FitResult:
    init_arr = kernel.default_init() if init is None else np.asarray(init, dtype=float)
    theta, obj, status, it, sup = _newton(kernel, method, init_arr, controls)
    if status == STATUS_MAX_ITER:
        # escalation ladder for stalled iterations: a direct root solve from
        # the stall, then deterministic jittered restarts
        rescue_rng = np.random.default_rng(1729)
        for attempt in range(5):
            rescued = _root_rescue(kernel, method, theta, controls)
            if rescued is not None:
                theta = rescued
                status = STATUS_CONVERGED
                break
            if attempt == 4:
                break
            if attempt == 0 and not np.allclose(init_arr, kernel.default_init()):
                init_j = kernel.default_init()
            else:
                jitter = 0.3 * (attempt + 1)
                init_j = theta + rescue_rng.normal(0.0, jitter, kernel.npar)
                init_j[-1] = max(abs(init_j[-1]), 0.2)
            theta_j, obj_j, status_j, it_j, sup_j = _newton(
                kernel, method, init_j, controls
            )
            it += it_j
            if status_j in (STATUS_CONVERGED, STATUS_SEPARATED):
                theta, obj, status, sup = theta_j, obj_j, status_j, sup_j
                break
            if np.isfinite(obj_j) and (not np.isfinite(obj) or obj_j > obj):
                theta, obj, sup = theta_j, obj_j, sup_j
        if status == STATUS_CONVERGED:
            if method == "FTPL":
                sup = float(np.max(np.abs(kernel.modified_score(theta))))
                obj = kernel.penalized_loglik(theta)
            else:
                sup = float(np.max(np.abs(kernel.score(theta))))
                obj = kernel.loglik(theta)
            if method == "ML" and np.any(np.abs(theta[:-1]) > controls.coef_bound):
                status = STATUS_SEPARATED
    info = kernel.observed_info(theta)
    try:
        cho_factor(info)
        info_pd = True
    except LinAlgError:
        info_pd = False
    return FitResult(
        theta=ParamVector.from_array(theta, kernel.d),
        objective=float(obj),
        info=info,
        method=method,
        status=status,
        iterations=it,
        score_sup_norm=sup,
        info_pd=info_pd,
    )


# ---------------------------------------------------------------------------
# Public dataset-level operations
# ---------------------------------------------------------------------------


def log_likelihood(theta: ParamVector, data: SurvivalDataset) -> float:
    theta.validate()
    return _kernel(data).loglik(theta.to_array())


def score(theta: ParamVector, data: SurvivalDataset) -> np.ndarray:
    theta.validate()
    return _kernel(data).score(theta.to_array())


def observed_info(theta: ParamVector, data: SurvivalDataset) -> np.ndarray:
    theta.validate()
    return _kernel(data).observed_info(theta.to_array())


def penalized_log_likelihood(theta: ParamVector, data: SurvivalDataset) -> float:
    theta.validate()
    return _kernel(data).penalized_loglik(theta.to_array())


def modified_score(theta: ParamVector, data: SurvivalDataset) -> np.ndarray:
    theta.validate()
    return _kernel(data).modified_score(theta.to_array())


def fit(
    data: SurvivalDataset,
    method: str = "FTPL",
    init: ParamVector | None = None,
    controls: FitControls = FitControls(),
) -> FitResult:
    kernel = _kernel(data)
    if kernel.n < kernel.npar - 1:
        raise ModelError("too few rows for the number of parameters")
    init_arr = init.to_array() if init is not None else None
    return fit_kernel(kernel, method, init_arr, controls)


def aic(fit_result: FitResult, data: SurvivalDataset) -> float:
    """Akaike information criterion against the unpenalized likelihood."""
    theta = fit_result.theta
    return 2.0 * theta.npar - 2.0 * log_likelihood(theta, data)


def cure_probability(theta: ParamVector, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return float(expit(theta.alpha0 + theta.alpha @ x))


def latent_survival(theta: ParamVector, t, x: np.ndarray):
    """Weibull survival among the uncured, S0(t | x)."""
    x = np.asarray(x, dtype=float)
    rate = math.exp(theta.beta0 + float(theta.beta @ x))
    t = np.asarray(t, dtype=float)
    return np.exp(-rate * np.power(t, theta.gamma))


def posterior_cure_prob(theta: ParamVector, t: float, x: np.ndarray, event: float = 0.0) -> float:
    """Probability of being cured given survival to t (0 for event rows)."""
    if event == 1.0:
        return 0.0
    pi = cure_probability(theta, x)
    s0 = float(latent_survival(theta, t, x))
    return pi / (pi + (1.0 - pi) * s0)


def population_survival(theta: ParamVector, t, x: np.ndarray):
    """Marginal survival Pr(T > t | x) of the mixture."""
    pi = cure_probability(theta, x)
    return pi + (1.0 - pi) * latent_survival(theta, t, x)


@dataclass
class PredictionCurve:
    times: np.ndarray
    survival: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(
            {
                "time": self.times,
                "survival": self.survival,
                "lo": self.band_lo,
                "hi": self.band_hi,
            }
        )


def predict_rfs(
    params: list[ParamVector], x: np.ndarray, times: np.ndarray
) -> PredictionCurve:
    """Pooled survival-curve prediction across imputations.

    The point curve uses the element-wise mean parameter vector; the band is
    the 2.5th/97.5th percentile of the per-imputation curves at each time,
    widened if necessary so the point curve stays inside.
    """
    if not params:
        raise ModelError("empty parameter list")
    times = np.asarray(times, dtype=float)
    d = params[0].d
    mean_arr = np.mean([p.to_array() for p in params], axis=0)
    mean_theta = ParamVector.from_array(mean_arr, d)
    point = np.asarray(population_survival(mean_theta, times, x), dtype=float)
    curves = np.stack(
        [np.asarray(population_survival(p, times, x), dtype=float) for p in params]
    )
    lo = np.percentile(curves, 2.5, axis=0)
    hi = np.percentile(curves, 97.5, axis=0)
    lo = np.minimum(lo, point)
    hi = np.maximum(hi, point)
    return PredictionCurve(times=times, survival=point, band_lo=lo, band_hi=hi)

"""Profile-likelihood confidence intervals and tests for single parameters.

Endpoints solve l_p(s) = l_max - q/2 (q the chi-square(1) quantile). The
primary solver is a Lagrange-multiplier Newton iteration on the quadratic
local model, delta = -H^{-1}(U - lambda * e_j); every endpoint it proposes is
verified on the traced profile curve, and a bracketed bisection along that
curve is the fallback. Profile evaluations use continuation: the curve is
traced outward from the fitted optimum in steps capped by a fraction of the
Wald scale, each inner solve warm-started from its neighbour, which keeps
evaluations on the profile branch connected to the optimum. The machinery
operates on a small surface interface so exactly quadratic objectives
exercise the same code paths as mixture-cure likelihoods.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .data import SurvivalDataset
from .model import (
    FitControls,
    FitResult,
    McKernel,
    ModelError,
    STATUS_CONVERGED,
    _newton,
)


class ProfileError(RuntimeError):
    """Inner profile maximization failed; carries diagnostics."""


@dataclass
class ProfilePoint:
    value: float
    theta: np.ndarray
    status: str
    iterations: int


class _CurvatureStore:
    """Most recent penalty-curvature estimate and where it was measured."""

    def __init__(self):
        self._hess = None
        self._at = None

    def get(self):
        if self._hess is None:
            return None
        return self._hess, self._at

    def put(self, hess, at):
        self._hess = hess
        self._at = np.asarray(at, dtype=float).copy()


class McSurface:
    """(Penalized) log-likelihood surface of a mixture-cure fit.

    Penalized profile solves share a penalty-curvature estimate through a
    store, so the estimate follows whatever neighbourhood is being traced
    instead of being remeasured by every solve.
    """

    def __init__(self, kernel: McKernel, method: str):
        self.kernel = kernel
        self.method = method
        self.npar = kernel.npar
        self._store = _CurvatureStore()

    def value(self, theta: np.ndarray) -> float:
        if self.method == "FTPL":
            return self.kernel.penalized_loglik(theta)
        return self.kernel.loglik(theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        if self.method == "FTPL":
            return self.kernel.modified_score(theta)
        return self.kernel.score(theta)

    def info(self, theta: np.ndarray) -> np.ndarray:
        return self.kernel.observed_info(theta)

    def feasible(self, theta: np.ndarray) -> bool:
        return theta[-1] > 0

    def default_init(self) -> np.ndarray:
        return self.kernel.default_init()

    def maximize(self, init=None, fixed=None) -> ProfilePoint:
        init_arr = self.kernel.default_init() if init is None else init
        fixed_index = fixed[0] if fixed is not None else None
        fixed_value = fixed[1] if fixed is not None else None
        # pinned solves are warm-started by the callers; cap their effort so
        # probes beyond a feasibility barrier fail fast
        controls = FitControls() if fixed is None else FitControls(max_iter=80)
        theta, obj, status, iters, _ = _newton(
            self.kernel,
            self.method,
            init_arr,
            controls,
            fixed_index=fixed_index,
            fixed_value=fixed_value,
            check_separation=(self.method == "ML"),
            penalty_store=self._store if self.method == "FTPL" else None,
        )
        return ProfilePoint(value=float(obj), theta=theta, status=status, iterations=iters)


class QuadraticSurface:
    """Exact quadratic objective, value = vmax - (theta-c)' Q (theta-c) / 2."""

    def __init__(self, center: np.ndarray, q: np.ndarray, vmax: float = 0.0):
        self.center = np.asarray(center, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.vmax = float(vmax)
        self.npar = self.center.shape[0]

    def value(self, theta):
        dev = np.asarray(theta, dtype=float) - self.center
        return self.vmax - 0.5 * float(dev @ self.q @ dev)

    def grad(self, theta):
        dev = np.asarray(theta, dtype=float) - self.center
        return -self.q @ dev

    def info(self, theta):
        return self.q

    def feasible(self, theta):
        return True

    def default_init(self):
        return self.center.copy()

    def maximize(self, init=None, fixed=None) -> ProfilePoint:
        if fixed is None:
            return ProfilePoint(self.vmax, self.center.copy(), STATUS_CONVERGED, 0)
        j, s = fixed
        free = np.arange(self.npar) != j
        theta = self.center.copy()
        theta[j] = s
        qff = self.q[np.ix_(free, free)]
        qfj = self.q[free, j]
        theta[free] = self.center[free] - np.linalg.solve(qff, qfj) * (s - self.center[j])
        return ProfilePoint(self.value(theta), theta, STATUS_CONVERGED, 1)


def profile_point(surface, j: int, s: float, init: np.ndarray | None = None) -> ProfilePoint:
    """Maximize the surface over all parameters with component j pinned at s."""
    if init is None:
        init = surface.default_init()
    init = np.asarray(init, dtype=float).copy()
    init[j] = s
    point = surface.maximize(init=init, fixed=(j, s))
    if point.status != STATUS_CONVERGED or not np.isfinite(point.value):
        raise ProfileError(
            f"profile solve failed at component {j} = {s:.6g} "
            f"(status {point.status}, {point.iterations} iterations)"
        )
    return point


class ProfileTracer:
    """Traces one parameter's profile curve outward from the fitted optimum.

    Solved points are cached; a request far from any cached point walks there
    in Wald-scaled increments, each inner solve warm-started from the
    previous one. This keeps every evaluation on the profile branch connected
    to the optimum and makes repeated evaluations (bisection, CLIP averaging)
    cheap.
    """

    def __init__(self, surface, j: int, theta_hat: np.ndarray,
                 value_at_hat: float | None = None):
        self.surface = surface
        self.j = j
        theta_hat = np.asarray(theta_hat, dtype=float)
        self.center = float(theta_hat[j])
        if value_at_hat is None:
            value_at_hat = surface.value(theta_hat)
        self.cache: dict[float, tuple[float, np.ndarray]] = {
            self.center: (float(value_at_hat), theta_hat.copy())
        }
        se = 1.0
        try:
            v = float(np.linalg.inv(surface.info(theta_hat))[j, j])
            if np.isfinite(v) and v > 0:
                se = float(np.sqrt(v))
        except np.linalg.LinAlgError:
            pass
        self.se = se
        self.step_cap = max(0.35 * se, 1e-3)
        # positions where the traced branch dead-ended; requests at or beyond
        # them fail immediately instead of re-probing
        self.fail_lo: float | None = None
        self.fail_hi: float | None = None

    def solve(self, v: float) -> tuple[float, np.ndarray]:
        v = float(v)
        hit = self.cache.get(v)
        if hit is not None:
            return hit
        if (self.fail_lo is not None and v <= self.fail_lo) or (
            self.fail_hi is not None and v >= self.fail_hi
        ):
            raise ProfileError(
                f"component {self.j}: traced profile branch ends before {v:.6g}"
            )
        s0 = min(self.cache, key=lambda s: abs(s - v))
        lp0, th0 = self.cache[s0]
        try:
            while abs(v - s0) > self.step_cap * 1.0001:
                s1 = s0 + np.sign(v - s0) * self.step_cap
                lp0, th0 = self._solve_step(s1, s0, th0)
                s0 = s1
            if v != s0:
                lp0, th0 = self._solve_step(v, s0, th0)
        except ProfileError as exc:
            # the barrier is wherever the walk actually died, which may be
            # much closer to the optimum than the requested value
            died = getattr(exc, "died_at", v)
            if v < self.center:
                cand = max(died, v)
                self.fail_lo = (
                    cand if self.fail_lo is None else max(self.fail_lo, cand)
                )
            else:
                cand = min(died, v)
                self.fail_hi = (
                    cand if self.fail_hi is None else min(self.fail_hi, cand)
                )
            raise
        return lp0, th0

    def value(self, v: float) -> float:
        return self.solve(v)[0]

    def _solve_step(self, s1, s0, th0, depth: int = 6):
        try:
            pt = profile_point(self.surface, self.j, s1, init=th0)
        except ProfileError as exc:
            if depth <= 0 or abs(s1 - s0) < 1e-10:
                if not hasattr(exc, "died_at"):
                    exc.died_at = float(s1)
                raise
            mid = 0.5 * (s0 + s1)
            _, thm = self._solve_step(mid, s0, th0, depth - 1)
            return self._solve_step(s1, mid, thm, depth - 1)
        self.cache[float(s1)] = (pt.value, pt.theta)
        return pt.value, pt.theta


def profile_objective(data: SurvivalDataset, method: str, j: int, s: float) -> float:
    """Profile (penalized) log-likelihood of the mixture-cure model at theta_j = s."""
    kernel = McKernel(data.analysis_matrix(), data.time, data.event)
    surface = McSurface(kernel, method)
    opt = surface.maximize()
    if opt.status != STATUS_CONVERGED:
        raise ProfileError(f"full maximization failed (status {opt.status})")
    return ProfileTracer(surface, j, opt.theta, opt.value).value(s)


def _safe_value(surface, theta) -> float:
    try:
        val = surface.value(theta)
    except Exception:
        return -np.inf
    return val if np.isfinite(val) else -np.inf


def _vm_endpoint(surface, theta_hat, j, l0, upper: bool, bound: float,
                 max_iter: int = 60, tol: float = 1e-6):
    """Lagrange iteration for one endpoint; returns s or None."""
    theta = np.asarray(theta_hat, dtype=float).copy()
    free = np.arange(surface.npar) != j
    ej = np.zeros(surface.npar)
    ej[j] = 1.0
    for _ in range(max_iter):
        try:
            u = surface.grad(theta)
        except Exception:
            return None
        val = _safe_value(surface, theta)
        if abs(val - l0) < tol and float(np.max(np.abs(u[free]))) < tol:
            return float(theta[j])
        try:
            info = surface.info(theta)
            iu = np.linalg.solve(info, u)
            ie = np.linalg.solve(info, ej)
        except Exception:
            return None
        denom = ie[j]
        if denom <= 0:
            return None
        lam_sq = (float(u @ iu) + 2.0 * (val - l0)) / denom
        lam = np.sqrt(max(lam_sq, 0.0))
        # H = -info, so delta = iu - lam*ie; negative lam moves theta_j upward
        lam = -lam if upper else lam
        delta = iu - lam * ie
        # dampen wild steps, then halve until the trial point is admissible
        sup = float(np.max(np.abs(delta)))
        if sup > 2.0:
            delta = delta * (2.0 / sup)
        accepted = False
        for _ in range(30):
            trial = theta + delta
            if surface.feasible(trial) and np.isfinite(_safe_value(surface, trial)):
                accepted = True
                break
            delta = delta * 0.5
        if not accepted:
            return None
        theta = trial
        if abs(theta[j]) > bound + 1.0:
            return None
    return None


def _traced_endpoint(tracer: ProfileTracer, l0: float, upper: bool, bound: float):
    """Bracketed bisection for l_p(s) = l0 along the traced profile curve.

    Points where the trace cannot continue (beyond a feasibility or
    penalty-definedness wall) are treated as lying below the level curve.
    """
    center = tracer.center
    sign = 1.0 if upper else -1.0

    def lp(s):
        try:
            return tracer.value(s)
        except ProfileError:
            return -np.inf

    width = max(1.9 * tracer.se, 1e-2)
    inner = center
    while True:
        s = center + sign * width
        if sign * s > bound:
            s = sign * bound
            if lp(s) > l0:
                return sign * np.inf  # open endpoint within the search box
            break
        if lp(s) <= l0:
            break
        inner = s
        width *= 2.0
    # `inside` has lp > l0, `outside` has lp <= l0; halve the gap between them
    inside, outside = inner, s
    for _ in range(200):
        if abs(outside - inside) < 1e-8:
            break
        mid = 0.5 * (inside + outside)
        if lp(mid) > l0:
            inside = mid
        else:
            outside = mid
    return 0.5 * (inside + outside)


def plci_surface(surface, theta_hat: np.ndarray, j: int, level: float = 0.95,
                 bound: float = 30.0,
                 tracer: ProfileTracer | None = None) -> tuple[float, float]:
    """Profile-likelihood CI endpoints for component j on any surface."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    lmax = surface.value(theta_hat)
    q = chi2.ppf(level, 1)
    l0 = lmax - 0.5 * q
    if tracer is None:
        tracer = ProfileTracer(surface, j, theta_hat, lmax)
    out = []
    for upper in (False, True):
        s = _vm_endpoint(surface, theta_hat, j, l0, upper, bound)
        if s is not None and ((s >= theta_hat[j]) == upper or abs(s - theta_hat[j]) < 1e-12):
            # verify on the traced curve; the iteration can land on an
            # inferior sheet of the inner maximization
            try:
                if abs(tracer.value(s) - l0) < 1e-5:
                    out.append(float(s))
                    continue
            except ProfileError:
                pass
        out.append(float(_traced_endpoint(tracer, l0, upper, bound)))
    lo, hi = out
    return lo, hi


def plci(fit_result: FitResult, data: SurvivalDataset, j: int,
         level: float = 0.95) -> tuple[float, float]:
    """Profile-likelihood CI for parameter j of a fitted mixture-cure model."""
    if not fit_result.converged:
        raise ModelError(f"cannot profile a fit with status {fit_result.status!r}")
    kernel = McKernel(data.analysis_matrix(), data.time, data.event)
    surface = McSurface(kernel, fit_result.method)
    return plci_surface(surface, fit_result.theta.to_array(), j, level)


def lrt_pvalue(fit_result: FitResult, data: SurvivalDataset, j: int,
               null_value: float = 0.0) -> float:
    """Likelihood-ratio p-value for theta_j = null_value (penalized for FTPL)."""
    if not fit_result.converged:
        raise ModelError(f"cannot profile a fit with status {fit_result.status!r}")
    kernel = McKernel(data.analysis_matrix(), data.time, data.event)
    surface = McSurface(kernel, fit_result.method)
    theta_hat = fit_result.theta.to_array()
    lmax = surface.value(theta_hat)
    tracer = ProfileTracer(surface, j, theta_hat, lmax)
    lp = tracer.value(null_value)
    d = max(2.0 * (lmax - lp), 0.0)
    return float(chi2.sf(d, 1))

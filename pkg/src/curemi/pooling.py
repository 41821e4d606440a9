"""Pooled inference across multiply imputed datasets.

CLIP averages the per-imputation standard-normal CDFs of the signed-root
likelihood-ratio statistic, F_bar(v) = mean_k Phi(sign(v - est_k) *
sqrt(D_k(v))), and reads CI endpoints off the quantile roots F_bar = a/2 and
1 - a/2. Rubin's Rules pooling of point estimates and Wald variances is kept
as the classical comparator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, t as student_t

from .data import SurvivalDataset
from .model import FitResult, McKernel
from .profile import McSurface, ProfileError, ProfileTracer


class PoolingError(RuntimeError):
    pass


@dataclass
class PooledInference:
    parameter: int
    estimate: float
    lo: float
    hi: float
    p_value: float
    method: str
    m: int
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "estimate": self.estimate,
            "lo": self.lo,
            "hi": self.hi,
            "p": self.p_value,
            "method": self.method,
            "m": self.m,
            **({"notes": self.notes} if self.notes else {}),
        }

    def to_csv_row(self, name: str | None = None) -> str:
        label = name if name is not None else str(self.parameter)
        return (
            f"{label},{self.estimate!r},{self.lo!r},{self.hi!r},"
            f"{self.p_value!r},{self.method},{self.m}"
        )


class ClipPool:
    """Shared per-imputation surfaces for pooling across many parameters.

    Building the likelihood surfaces (and their penalty-curvature stores) is
    the expensive part, so one pool serves the CLIP curves of every
    parameter of the same set of imputed fits.
    """

    def __init__(self, fits: list[FitResult], datasets: list[SurvivalDataset]):
        if len(fits) != len(datasets) or not fits:
            raise PoolingError("need one fit per imputed dataset")
        self.excluded = [k for k, f in enumerate(fits) if not f.converged]
        self.kept = [k for k, f in enumerate(fits) if f.converged]
        if not self.kept:
            raise PoolingError("no converged imputation fits to pool")
        self.surfaces = []
        self.theta_hat = []
        self.lmax = []
        for k in self.kept:
            kernel = McKernel(
                datasets[k].analysis_matrix(), datasets[k].time, datasets[k].event
            )
            surface = McSurface(kernel, fits[k].method)
            arr = fits[k].theta.to_array()
            self.surfaces.append(surface)
            self.theta_hat.append(arr)
            self.lmax.append(surface.value(arr))

    def curve(self, j: int) -> "ClipCurve":
        return ClipCurve(pool=self, j=j)


class ClipCurve:
    """Averaged profile CDF for one parameter over imputed fits.

    Profile solves are lazy and cached along each imputation's traced
    profile curve. Non-converged fits are excluded up front and recorded.
    """

    def __init__(self, fits: list[FitResult] = None,
                 datasets: list[SurvivalDataset] = None, j: int = 0,
                 pool: ClipPool | None = None):
        if pool is None:
            pool = ClipPool(fits, datasets)
        self.j = j
        self.excluded = pool.excluded
        self.kept = pool.kept
        self._theta_hat = pool.theta_hat
        self._lmax = pool.lmax
        self._tracers = [
            ProfileTracer(surface, j, arr, lmax)
            for surface, arr, lmax in zip(pool.surfaces, pool.theta_hat, pool.lmax)
        ]

    @property
    def m(self) -> int:
        return len(self._tracers)

    @property
    def estimate(self) -> float:
        return float(np.mean([th[self.j] for th in self._theta_hat]))

    def wald_scale(self) -> float:
        ses = [tr.se for tr in self._tracers if np.isfinite(tr.se) and tr.se > 0]
        return float(np.mean(ses)) if ses else 1.0

    def component(self, k: int, value: float) -> float:
        """F^(k)(value) = Phi(signed root of the profile LR statistic)."""
        value = float(value)
        try:
            lp = self._tracers[k].value(value)
        except ProfileError as exc:
            raise PoolingError(
                f"profile failure in imputation {self.kept[k]} at value {value:.6g}"
            ) from exc
        d = max(2.0 * (self._lmax[k] - lp), 0.0)
        r = np.sign(value - self._theta_hat[k][self.j]) * np.sqrt(d)
        return float(norm.cdf(r))

    def cdf(self, value: float) -> float:
        return float(np.mean([self.component(k, value) for k in range(self.m)]))


def clip_cdf(fits: list[FitResult], datasets: list[SurvivalDataset], j: int,
             value: float) -> float:
    """Pooled profile CDF F_bar at one parameter value."""
    return ClipCurve(fits, datasets, j).cdf(value)


def clip_ci(fits: list[FitResult], datasets: list[SurvivalDataset], j: int,
            level: float = 0.95, bound: float = 30.0,
            curve: ClipCurve | None = None) -> PooledInference:
    """CLIP confidence interval and two-sided test for parameter j."""
    if curve is None:
        curve = ClipCurve(fits, datasets, j)
    alpha = 1.0 - level
    center = curve.estimate
    scale = max(curve.wald_scale(), 1e-3)

    def cdf_safe(s: float) -> float:
        # beyond a profile wall the LR statistic diverges, so the pooled CDF
        # limit is 0 on the left of the estimates and 1 on the right
        try:
            return curve.cdf(s)
        except PoolingError:
            return 0.0 if s < center else 1.0

    endpoints = []
    open_flags = []
    for target, sign in ((alpha / 2.0, -1.0), (1.0 - alpha / 2.0, 1.0)):
        width = 1.9 * scale
        inner = center
        outer = None
        while True:
            s = center + sign * width
            if sign * s > bound:
                s = sign * bound
                val = cdf_safe(s)
                if (sign < 0 and val > target) or (sign > 0 and val < target):
                    outer = None  # open endpoint: F_bar never crosses in the box
                else:
                    outer = s
                break
            val = cdf_safe(s)
            if (sign < 0 and val <= target) or (sign > 0 and val >= target):
                outer = s
                break
            inner = s
            width *= 2.0
        if outer is None:
            endpoints.append(sign * np.inf)
            open_flags.append(True)
            continue
        lo_s, hi_s = (inner, outer) if inner < outer else (outer, inner)
        for _ in range(200):
            if hi_s - lo_s < 1e-6:
                break
            mid = 0.5 * (lo_s + hi_s)
            if cdf_safe(mid) < target:
                lo_s = mid
            else:
                hi_s = mid
        endpoints.append(0.5 * (lo_s + hi_s))
        open_flags.append(False)
    f0 = cdf_safe(0.0)
    p = float(np.clip(2.0 * min(f0, 1.0 - f0), 0.0, 1.0))
    notes = {}
    if curve.excluded:
        notes["excluded_imputations"] = curve.excluded
    if any(open_flags):
        notes["open_endpoint"] = True
    return PooledInference(
        parameter=j,
        estimate=center,
        lo=endpoints[0],
        hi=endpoints[1],
        p_value=p,
        method="CLIP",
        m=curve.m,
        notes=notes,
    )


def rubin_pool(estimates, variances, level: float = 0.95,
               parameter: int = 0) -> PooledInference:
    """Rubin's Rules pooling of per-imputation estimates and Wald variances."""
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if estimates.shape != variances.shape or estimates.ndim != 1 or len(estimates) == 0:
        raise PoolingError("estimates and variances must be equal-length vectors")
    m = len(estimates)
    qbar = float(estimates.mean())
    w = float(variances.mean())
    if m == 1:
        se = np.sqrt(w)
        z = norm.ppf(0.5 + level / 2.0)
        p = 2.0 * norm.sf(abs(qbar) / se) if se > 0 else (0.0 if qbar else 1.0)
        return PooledInference(parameter, qbar, qbar - z * se, qbar + z * se,
                               float(p), "RubinRules", 1)
    b = float(estimates.var(ddof=1))
    t_var = w + (1.0 + 1.0 / m) * b
    se = np.sqrt(t_var)
    if b == 0.0:
        quantile = norm.ppf(0.5 + level / 2.0)
        p = 2.0 * norm.sf(abs(qbar) / se) if se > 0 else (0.0 if qbar else 1.0)
    else:
        df = (m - 1) * (1.0 + w / ((1.0 + 1.0 / m) * b)) ** 2
        quantile = student_t.ppf(0.5 + level / 2.0, df)
        p = 2.0 * student_t.sf(abs(qbar) / se, df) if se > 0 else (0.0 if qbar else 1.0)
    return PooledInference(
        parameter, qbar, qbar - quantile * se, qbar + quantile * se,
        float(p), "RubinRules", m,
    )

"""Fully conditional specification (chained equations) imputation engine.

Each incomplete column gets a conditional model; a Gibbs-style sweep cycles
through the targets, refitting the conditional model on rows where the target
is observed, drawing model parameters from their asymptotic normal
approximation, and drawing imputations for the missing rows. Derived columns
(subtype indicators, interactions, cumulative-hazard terms) are deterministic
and recomputed after every update. Chains are independent; all randomness
derives from (base seed, chain, iteration, target) substreams so results do
not depend on scheduling or worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr
from scipy.special import expit

from .data import SurvivalDataset


class ImputationError(RuntimeError):
    pass


# RNG substream tags for non-target stages
INIT_STREAM = 100_000
PRESTEP_STREAM = 100_001


def substream(base_seed: int, chain: int, iteration: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((base_seed, chain, iteration, stage))
    )


@dataclass
class DerivedRule:
    """Deterministic column recomputed from current values.

    kind 'product' multiplies the input columns; 'cum-hazard' is time**gamma;
    'subtype' evaluates a boolean formula over biomarkers (inside chains all
    cells are filled, so three-valued logic degenerates to plain boolean).
    """

    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    gamma: float | None = None
    expr: object = None

    def compute(self, columns: dict[str, np.ndarray]) -> np.ndarray:
        if self.kind == "product":
            out = np.ones_like(columns[self.inputs[0]])
            for c in self.inputs:
                out = out * columns[c]
            return out
        if self.kind == "cum-hazard":
            return np.power(columns[self.inputs[0]], self.gamma)
        if self.kind == "subtype":
            from .schema import eval_bool

            return eval_bool(self.expr, columns)
        raise ImputationError(f"unknown derived-rule kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "inputs": self.inputs}
        if self.gamma is not None:
            d["gamma"] = self.gamma
        if self.expr is not None:
            d["expr"] = self.expr
        return d


@dataclass
class TargetSpec:
    name: str
    method: str  # bernoulli-logistic | pmm | multinomial | a custom sampler
    predictors: list[str]
    sampler: object = None  # custom draw hook, e.g. the exact-posterior sampler

    def to_dict(self) -> dict:
        return {"name": self.name, "method": self.method, "predictors": self.predictors}


@dataclass
class ImputationPlan:
    targets: list[TargetSpec]
    derived: list[DerivedRule] = field(default_factory=list)
    iterations: int = 10
    m: int = 20
    gamma_hat: float | None = None
    base_seed: int = 0
    variant: str = "regression"  # or "exact"
    prestep: object = None  # per-cycle hook (e.g. cure-status imputation)
    pmm_donors: int = 5

    def validate(self, data: SurvivalDataset) -> None:
        known = set(data.covariates.columns) | {"time", "event"}
        known |= {r.name for r in self.derived}
        if self.prestep is not None:
            known |= set(getattr(self.prestep, "provides", ()))
        for t in self.targets:
            if t.name not in data.covariates.columns:
                raise ImputationError(f"target {t.name!r} not in data")
            for p in t.predictors:
                if p not in known:
                    raise ImputationError(
                        f"predictor {p!r} of target {t.name!r} is neither a "
                        "column, a derived rule, nor supplied by the prestep"
                    )
        if self.gamma_hat is not None and self.gamma_hat <= 0:
            raise ImputationError("gamma_hat must be positive")

    def to_dict(self) -> dict:
        return {
            "targets": [t.to_dict() for t in self.targets],
            "derived": [r.to_dict() for r in self.derived],
            "iterations": self.iterations,
            "m": self.m,
            "gamma_hat": self.gamma_hat,
            "base_seed": self.base_seed,
            "variant": self.variant,
            "prestep": getattr(self.prestep, "to_dict", lambda: None)(),
            "pmm_donors": self.pmm_donors,
        }


@dataclass
class ConditionalFit:
    """Drawn coefficients of one conditional model.

    ``coefficients`` has intercept first then one entry per predictor; columns
    dropped as degenerate keep coefficient zero. ``cov_factor`` maps standard
    normals onto the coefficient scale for the draw that produced it.
    """

    coefficients: np.ndarray
    kept: np.ndarray
    cov_factor: np.ndarray
    train_rows: int
    fallback: str = ""


@dataclass
class ChainState:
    columns: dict[str, np.ndarray]
    observed: dict[str, np.ndarray]  # original non-missing masks per target
    chain: int
    iteration: int = 0
    extras: dict = field(default_factory=dict)
    log: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Conditional models
# ---------------------------------------------------------------------------


def _standardize(z: np.ndarray):
    """Center/scale columns for fitting; returns (zs, transform) where
    theta_original = transform @ theta_standardized."""
    mean = z.mean(axis=0)
    scale = z.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    zs = (z - mean) / scale
    p = z.shape[1]
    transform = np.zeros((p + 1, p + 1))
    transform[0, 0] = 1.0
    transform[0, 1:] = -mean / scale
    transform[1:, 1:] = np.diag(1.0 / scale)
    return zs, transform


def _design(z: np.ndarray):
    """Intercept-augmented design with degenerate columns dropped.

    Constant columns and columns collinear with the preceding ones (pivoted
    QR) are excluded from the fit; they keep zero coefficients.
    """
    n, p = z.shape
    keep = z.std(axis=0) > 1e-12
    zs, transform = _standardize(z[:, keep])
    x = np.column_stack([np.ones(n), zs])
    if x.shape[1] > 1:
        r = qr(x, mode="r", pivoting=True)
        rmat, piv = r[0], r[1]
        diag = np.abs(np.diag(rmat))
        tol = diag.max() * max(n, x.shape[1]) * np.finfo(float).eps * 100
        rank = int((diag > tol).sum())
        if rank < x.shape[1]:
            drop_std = sorted(piv[rank:])
            keep_idx = np.flatnonzero(keep)
            for i_std in drop_std:
                if i_std == 0:
                    continue  # never drop the intercept
                keep[keep_idx[i_std - 1]] = False
            zs, transform = _standardize(z[:, keep])
            x = np.column_stack([np.ones(n), zs])
    return x, keep, transform


def _expand(coef_std: np.ndarray, cov_std: np.ndarray, keep: np.ndarray,
            transform: np.ndarray, p_full: int):
    """Map standardized-fit results back to original scale and full length."""
    coef_orig = transform @ coef_std
    cov_orig = transform @ cov_std @ transform.T
    full = np.zeros(p_full + 1)
    full[0] = coef_orig[0]
    full[1 + np.flatnonzero(keep)] = coef_orig[1:]
    return full, cov_orig


def _logistic_ml(x: np.ndarray, y: np.ndarray, max_iter: int = 30, tol: float = 1e-8):
    """Plain logistic ML Newton; returns (coef, info, converged)."""
    coef = np.zeros(x.shape[1])
    converged = False
    info = np.eye(x.shape[1])
    for _ in range(max_iter):
        p = expit(x @ coef)
        w = p * (1.0 - p)
        u = x.T @ (y - p)
        info = x.T @ (x * w[:, None])
        try:
            step = np.linalg.solve(info, u)
        except np.linalg.LinAlgError:
            return coef, info, False
        coef = coef + step
        if not np.all(np.isfinite(coef)) or np.max(np.abs(coef)) > 1e3:
            return coef, info, False
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    p = expit(x @ coef)
    info = x.T @ (x * (p * (1.0 - p))[:, None])
    return coef, info, converged


def _logistic_firth(x: np.ndarray, y: np.ndarray, max_iter: int = 60, tol: float = 1e-6):
    """Firth-penalized logistic fit via the hat-diagonal modified score."""
    coef = np.zeros(x.shape[1])
    for _ in range(max_iter):
        p = expit(x @ coef)
        w = p * (1.0 - p)
        rootw = np.sqrt(np.maximum(w, 1e-12))
        xw = x * rootw[:, None]
        info = xw.T @ xw
        try:
            hat = np.einsum("ij,ij->i", xw, np.linalg.solve(info, xw.T).T)
            step = np.linalg.solve(info, x.T @ (y - p + hat * (0.5 - p)))
        except np.linalg.LinAlgError:
            info = info + 1e-8 * np.eye(x.shape[1])
            hat = np.einsum("ij,ij->i", xw, np.linalg.solve(info, xw.T).T)
            step = np.linalg.solve(info, x.T @ (y - p + hat * (0.5 - p)))
        sup = np.max(np.abs(step))
        if sup > 5.0:
            step = step * (5.0 / sup)
        coef = coef + step
        if np.max(np.abs(step)) < tol:
            break
    p = expit(x @ coef)
    info = x.T @ (x * (p * (1.0 - p))[:, None])
    return coef, info


def _draw_factor(info: np.ndarray) -> np.ndarray:
    """Cholesky factor of the inverse information, jittered if needed."""
    p = info.shape[0]
    for jitter in (0.0, 1e-8, 1e-6, 1e-4):
        try:
            cov = np.linalg.inv(info + jitter * np.eye(p))
            return np.linalg.cholesky(0.5 * (cov + cov.T))
        except np.linalg.LinAlgError:
            continue
    raise ImputationError("conditional-model covariance factorization failed")


def fit_and_draw_logistic(z: np.ndarray, y: np.ndarray,
                          rng: np.random.Generator) -> ConditionalFit:
    """Logistic conditional model with a posterior-style parameter draw.

    Maximum-likelihood fit on training rows; the draw is MLE + L z with L L'
    the inverse observed information. Separation or non-convergence falls
    back to the Firth-penalized fit and its curvature.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ImputationError("logistic target must be binary on training rows")
    x, keep, transform = _design(z)
    if x.shape[0] < x.shape[1] + 1:
        raise ImputationError("too few training rows for the conditional model")
    fallback = ""
    coef, info, ok = _logistic_ml(x, y)
    if not ok or np.max(np.abs(coef)) > 15.0 or not np.all(np.isfinite(coef)):
        coef, info = _logistic_firth(x, y)
        fallback = "firth"
    factor_std = _draw_factor(info)
    draw_std = coef + factor_std @ rng.standard_normal(len(coef))
    full, cov_orig = _expand(draw_std, factor_std @ factor_std.T, keep,
                             transform, z.shape[1])
    cov_factor = transform @ factor_std
    return ConditionalFit(
        coefficients=full, kept=keep, cov_factor=cov_factor,
        train_rows=len(y), fallback=fallback,
    )


def impute_bernoulli(fit: ConditionalFit, z_mis: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    z_mis = np.asarray(z_mis, dtype=float)
    eta = fit.coefficients[0] + z_mis @ fit.coefficients[1:]
    return (rng.random(len(eta)) < expit(eta)).astype(float)


def fit_and_draw_pmm(z_obs: np.ndarray, y_obs: np.ndarray, z_mis: np.ndarray,
                     rng: np.random.Generator, donors: int = 5) -> np.ndarray:
    """Predictive mean matching with a Bayesian linear-regression draw.

    Residual variance is drawn from its scaled inverse chi-square; the
    coefficient draw uses that variance. Each missing row picks uniformly
    among the `donors` training rows with the nearest drawn predictions and
    copies the donor's observed value; ties break uniformly at random.
    """
    z_obs = np.asarray(z_obs, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    z_mis = np.asarray(z_mis, dtype=float)
    n = len(y_obs)
    if n == 0:
        raise ImputationError("predictive mean matching has no donors")
    x, keep, transform = _design(z_obs)
    coef, *_ = np.linalg.lstsq(x, y_obs, rcond=None)
    fitted = x @ coef
    rss = float(np.sum((y_obs - fitted) ** 2))
    df = max(n - x.shape[1], 1)
    sigma2 = rss / max(rng.chisquare(df), 1e-12)
    xtx = x.T @ x
    try:
        cov = sigma2 * np.linalg.inv(xtx + 1e-10 * np.eye(x.shape[1]))
        factor = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError:
        factor = np.zeros((x.shape[1], x.shape[1]))
    coef_star = coef + factor @ rng.standard_normal(x.shape[1])
    # map the drawn coefficients back to the original scale, then predict
    orig = transform @ coef_star
    full = np.zeros(z_obs.shape[1] + 1)
    full[0] = orig[0]
    full[1 + np.flatnonzero(keep)] = orig[1:]
    pred_obs = full[0] + z_obs @ full[1:]
    pred_mis = full[0] + z_mis @ full[1:]
    k = min(donors, n)
    tie_break = rng.random(n)
    out = np.empty(len(z_mis))
    for i, pm in enumerate(pred_mis):
        dist = np.abs(pred_obs - pm)
        order = np.lexsort((tie_break, dist))
        pick = order[rng.integers(0, k)]
        out[i] = y_obs[pick]
    return out


def fit_and_draw_multinomial(z_obs: np.ndarray, y_obs: np.ndarray,
                             z_mis: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Baseline-category multinomial conditional model with parameter draw.

    Two observed categories reduce to the Bernoulli-logistic path. Categories
    unobserved in training are dropped from the support.
    """
    z_obs = np.asarray(z_obs, dtype=float)
    y_obs = np.asarray(y_obs)
    cats = np.unique(y_obs)
    if len(cats) < 2:
        raise ImputationError("multinomial target needs at least 2 observed categories")
    if len(cats) == 2:
        fit = fit_and_draw_logistic(z_obs, (y_obs == cats[1]).astype(float), rng)
        ind = impute_bernoulli(fit, z_mis, rng)
        return np.where(ind == 1.0, cats[1], cats[0])
    x, keep, transform = _design(z_obs)
    n, p = x.shape
    c = len(cats)
    ymat = np.column_stack([(y_obs == cat).astype(float) for cat in cats[1:]])
    coef = np.zeros((c - 1) * p)

    def probs(cf):
        eta = x @ cf.reshape(c - 1, p).T
        ex = np.exp(eta - eta.max(axis=1, keepdims=True))
        denom = np.exp(-eta.max(axis=1, keepdims=True)) + ex.sum(axis=1, keepdims=True)
        return ex / denom

    for _ in range(50):
        pr = probs(coef)
        grad = (x.T @ (ymat - pr)).T.ravel()
        hess = np.zeros(((c - 1) * p, (c - 1) * p))
        for a in range(c - 1):
            for b in range(c - 1):
                w = pr[:, a] * ((a == b) - pr[:, b])
                hess[a * p:(a + 1) * p, b * p:(b + 1) * p] = x.T @ (x * w[:, None])
        try:
            step = np.linalg.solve(hess + 1e-10 * np.eye(len(coef)), grad)
        except np.linalg.LinAlgError:
            break
        coef = coef + step
        if np.max(np.abs(step)) < 1e-8:
            break
    pr = probs(coef)
    hess = np.zeros(((c - 1) * p, (c - 1) * p))
    for a in range(c - 1):
        for b in range(c - 1):
            w = pr[:, a] * ((a == b) - pr[:, b])
            hess[a * p:(a + 1) * p, b * p:(b + 1) * p] = x.T @ (x * w[:, None])
    factor = _draw_factor(hess)
    draw = coef + factor @ rng.standard_normal(len(coef))
    # map each category's drawn coefficients back to the original scale
    z_mis_arr = np.asarray(z_mis, dtype=float)
    eta = np.empty((len(z_mis_arr), c - 1))
    for a in range(c - 1):
        orig = transform @ draw[a * p:(a + 1) * p]
        full = np.zeros(z_obs.shape[1] + 1)
        full[0] = orig[0]
        full[1 + np.flatnonzero(keep)] = orig[1:]
        eta[:, a] = full[0] + z_mis_arr @ full[1:]
    ex = np.exp(eta - eta.max(axis=1, keepdims=True))
    base = np.exp(-eta.max(axis=1, keepdims=True))
    pmat = np.column_stack([base, ex])
    pmat = pmat / pmat.sum(axis=1, keepdims=True)
    cum = np.cumsum(pmat, axis=1)
    u = rng.random(len(z_mis))
    idx = (u[:, None] > cum).sum(axis=1)
    return cats[idx]


# ---------------------------------------------------------------------------
# Gibbs cycling
# ---------------------------------------------------------------------------


def recompute_derived(state: ChainState, plan: ImputationPlan) -> None:
    for rule in plan.derived:
        state.columns[rule.name] = rule.compute(state.columns)


def _predictor_matrix(state: ChainState, names: list[str]) -> np.ndarray:
    return np.column_stack([state.columns[p] for p in names])


def gibbs_cycle(state: ChainState, plan: ImputationPlan,
                base_seed: int | None = None) -> ChainState:
    """One sweep over the visit sequence, mutating and returning the state."""
    seed = plan.base_seed if base_seed is None else base_seed
    state.iteration += 1
    if plan.prestep is not None:
        rng = substream(seed, state.chain, state.iteration, PRESTEP_STREAM)
        plan.prestep.run(state, plan, rng)
    for t_index, tspec in enumerate(plan.targets):
        recompute_derived(state, plan)
        obs = state.observed[tspec.name]
        mis = ~obs
        if not mis.any():
            continue
        rng = substream(seed, state.chain, state.iteration, t_index)
        col = state.columns[tspec.name]
        z = _predictor_matrix(state, tspec.predictors)
        try:
            if tspec.sampler is not None:
                col[mis] = tspec.sampler.draw(state, tspec, mis, rng)
            elif tspec.method == "bernoulli-logistic":
                cfit = fit_and_draw_logistic(z[obs], col[obs], rng)
                if cfit.fallback:
                    state.log.append(
                        f"chain {state.chain} it {state.iteration} "
                        f"{tspec.name}: {cfit.fallback} fallback"
                    )
                col[mis] = impute_bernoulli(cfit, z[mis], rng)
            elif tspec.method == "pmm":
                col[mis] = fit_and_draw_pmm(
                    z[obs], col[obs], z[mis], rng, plan.pmm_donors
                )
            elif tspec.method == "multinomial":
                col[mis] = fit_and_draw_multinomial(z[obs], col[obs], z[mis], rng)
            else:
                raise ImputationError(f"unknown method {tspec.method!r}")
        except ImputationError as exc:
            raise ImputationError(f"target {tspec.name!r}: {exc}") from exc
        recompute_derived(state, plan)
    return state


def _init_state(data: SurvivalDataset, plan: ImputationPlan, chain: int) -> ChainState:
    columns: dict[str, np.ndarray] = {
        "time": data.time.copy(),
        "event": data.event.copy(),
    }
    for c in data.covariates.columns:
        columns[c] = data.covariates[c].to_numpy(dtype=float).copy()
    observed = {}
    rng = substream(plan.base_seed, chain, 0, INIT_STREAM)
    for tspec in plan.targets:
        col = columns[tspec.name]
        obs = ~np.isnan(col)
        observed[tspec.name] = obs
        if (~obs).any():
            pool = col[obs]
            if pool.size == 0:
                raise ImputationError(f"target {tspec.name!r} has no observed values")
            col[~obs] = rng.choice(pool, size=int((~obs).sum()), replace=True)
    state = ChainState(columns=columns, observed=observed, chain=chain)
    if plan.prestep is not None:
        plan.prestep.initialize(state, plan)
    recompute_derived(state, plan)
    return state


def _run_single_chain(args) -> dict[str, np.ndarray]:
    data, plan, chain = args
    state = _init_state(data, plan, chain)
    for _ in range(plan.iterations):
        gibbs_cycle(state, plan)
    recompute_derived(state, plan)
    return {c: state.columns[c] for c in data.covariates.columns}


def run_chains(data: SurvivalDataset, plan: ImputationPlan,
               workers: int = 1) -> list[SurvivalDataset]:
    """Run m independent chains and return the completed datasets."""
    plan.validate(data)
    tasks = [(data, plan, chain) for chain in range(plan.m)]
    if workers > 1 and plan.m > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_single_chain, tasks))
    else:
        results = [_run_single_chain(t) for t in tasks]
    completed = []
    for cols in results:
        ds = data.copy()
        for name, values in cols.items():
            ds.covariates[name] = values
        ds.refresh_derived()
        completed.append(ds)
    return completed

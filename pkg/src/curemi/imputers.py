"""Analysis-model-aware imputation plans for incomplete biomarkers.

Four conditional-model families for a binary biomarker X_j:

  ECD   logit P(X_j=1) ~ Y + H00(T) + X_k*H00(T) + Y*X_k + X_k   (k != j)
  cECD  ~ C + C*Y + C*H00(T) + C*H00(T)*X_k + C*X_k + X_k, with the latent
        cure status C redrawn each cycle consistently with the event flag
  CS    ~ X_k + T + Y
  MIS   ~ biomarkers-only + T + Y

ECD's exp(X_k)*H00(T) term is encoded on the equivalent basis {H00, X_k*H00}
for binary X_k. The exact-posterior variant replaces the ECD regression with
direct Bernoulli draws from the analysis-model likelihood ratio times prior
odds, and doubles as the compatibility oracle for the regression form.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .fcs import (
    ChainState,
    DerivedRule,
    ImputationError,
    ImputationPlan,
    TargetSpec,
    fit_and_draw_logistic,
)
from .model import (
    FitControls,
    McKernel,
    ParamVector,
    fit_kernel,
    posterior_cure_prob,
)
from .schema import CovariateSchema

CROSS_PRODUCT_ORDER = (
    ("PR", "Her2"),
    ("ER", "Her2"),
    ("ER", "PR"),
    ("ER", "PR", "Her2"),
    ("PR", "Ki67"),
    ("Ki67", "ER"),
    ("Ki67", "ER", "PR"),
    ("Ki67", "PR", "Her2"),
    ("Ki67", "ER", "Her2"),
    ("Ki67", "ER", "PR", "Her2"),
)


def derive_subtypes(biomarkers: dict[str, np.ndarray],
                    schema: CovariateSchema):
    """Subtype labels and three-valued indicator columns from biomarkers.

    Indicators follow the schema's boolean formulas under Kleene logic, so a
    single decisive constituent (e.g. Her2 positive) resolves every indicator
    even when other biomarkers are missing. The label is 'undetermined' only
    when no indicator can be pinned to 1.
    """
    from .schema import eval_bool

    cols = {k: np.asarray(v, dtype=float) for k, v in biomarkers.items()}
    indicators = {
        name: eval_bool(rule, cols) for name, rule in schema.subtype_rules.items()
    }
    names = list(indicators)
    n = len(next(iter(indicators.values())))
    labels = np.full(n, "undetermined", dtype=object)
    for name in names:
        labels[indicators[name] == 1.0] = name.removeprefix("W_")
    return labels, indicators


def build_cross_products(biomarkers: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """The ten biomarker cross-product columns, in their canonical order."""
    out = {}
    for combo in CROSS_PRODUCT_ORDER:
        col = np.ones_like(np.asarray(biomarkers[combo[0]], dtype=float))
        for b in combo:
            col = col * np.asarray(biomarkers[b], dtype=float)
        out["_x_".join(combo)] = col
    return out


def _subtype_rules(schema: CovariateSchema) -> list[DerivedRule]:
    return [
        DerivedRule(name=name, kind="subtype", inputs=schema.constituents(name),
                    expr=rule)
        for name, rule in schema.subtype_rules.items()
    ]


def _incomplete_biomarkers(schema: CovariateSchema) -> list[str]:
    return schema.biomarkers()


def build_cs_plan(schema: CovariateSchema, m: int = 20, iterations: int = 10,
                  base_seed: int = 0) -> ImputationPlan:
    """Comprehensive-simple plan: other biomarkers, fully observed
    covariates, raw time, and the event flag as first-order predictors."""
    targets = []
    fully = schema.fully_observed()
    for j in _incomplete_biomarkers(schema):
        others = [b for b in schema.biomarkers() if b != j]
        targets.append(
            TargetSpec(
                name=j,
                method="bernoulli-logistic",
                predictors=others + fully + ["time", "event"],
            )
        )
    return ImputationPlan(
        targets=targets, derived=_subtype_rules(schema), m=m,
        iterations=iterations, base_seed=base_seed,
    )


def build_mis_plan(schema: CovariateSchema, m: int = 20, iterations: int = 10,
                   base_seed: int = 0) -> ImputationPlan:
    """Mis-specified plan: biomarkers plus outcomes only (no other covariates)."""
    targets = []
    for j in _incomplete_biomarkers(schema):
        others = [b for b in schema.biomarkers() if b != j]
        targets.append(
            TargetSpec(
                name=j,
                method="bernoulli-logistic",
                predictors=others + ["time", "event"],
            )
        )
    return ImputationPlan(
        targets=targets, derived=_subtype_rules(schema), m=m,
        iterations=iterations, base_seed=base_seed,
    )


def _ecd_derived(schema: CovariateSchema, gamma_hat: float,
                 with_cure: bool) -> list[DerivedRule]:
    rules = _subtype_rules(schema)
    rules.append(DerivedRule(name="H00", kind="cum-hazard", inputs=["time"],
                             gamma=gamma_hat))
    covs = schema.biomarkers() + schema.fully_observed()
    for k in covs:
        rules.append(DerivedRule(name=f"{k}_x_H00", kind="product",
                                 inputs=[k, "H00"]))
        rules.append(DerivedRule(name=f"event_x_{k}", kind="product",
                                 inputs=["event", k]))
    if with_cure:
        rules.append(DerivedRule(name="C_x_event", kind="product",
                                 inputs=["C", "event"]))
        rules.append(DerivedRule(name="C_x_H00", kind="product",
                                 inputs=["C", "H00"]))
        for k in covs:
            rules.append(DerivedRule(name=f"C_x_{k}", kind="product",
                                     inputs=["C", k]))
            rules.append(DerivedRule(name=f"C_x_H00_x_{k}", kind="product",
                                     inputs=["C", "H00", k]))
    return rules


def build_ecd_plan(
    schema: CovariateSchema,
    gamma_hat: float,
    m: int = 20,
    iterations: int = 10,
    base_seed: int = 0,
    active_cross_products: bool = False,
    variant: str = "regression",
    theta0: ParamVector | None = None,
) -> ImputationPlan:
    """Exact-conditional-distribution plan (regression encoding by default).

    Per target j: the event flag, the cumulative baseline hazard H00(T) =
    T**gamma_hat, hazard and event interactions with every other covariate,
    and the other covariates' main effects. With ``active_cross_products``
    the biomarker cross-products not involving j join the covariate set.
    ``variant='exact'`` swaps the regression for the exact posterior sampler.
    """
    if gamma_hat <= 0:
        raise ImputationError("gamma_hat must be positive")
    targets = []
    fully = schema.fully_observed()
    derived = _ecd_derived(schema, gamma_hat, with_cure=False)
    if active_cross_products:
        for combo in CROSS_PRODUCT_ORDER:
            name = "_x_".join(combo)
            derived.append(DerivedRule(name=name, kind="product",
                                       inputs=list(combo)))
            derived.append(DerivedRule(name=f"{name}_x_H00", kind="product",
                                       inputs=list(combo) + ["H00"]))
            derived.append(DerivedRule(name=f"event_x_{name}", kind="product",
                                       inputs=["event"] + list(combo)))
    prestep = None
    for j in _incomplete_biomarkers(schema):
        others = [b for b in schema.biomarkers() if b != j] + fully
        if active_cross_products:
            others = others + [
                "_x_".join(combo) for combo in CROSS_PRODUCT_ORDER if j not in combo
            ]
        if variant == "exact":
            targets.append(
                TargetSpec(
                    name=j,
                    method="exact-ecd",
                    predictors=others,
                    sampler=ExactPosteriorSampler(j, schema),
                )
            )
        else:
            predictors = (
                ["event", "H00"]
                + [f"{k}_x_H00" for k in others]
                + [f"event_x_{k}" for k in others]
                + others
            )
            targets.append(
                TargetSpec(name=j, method="bernoulli-logistic", predictors=predictors)
            )
    if variant == "exact":
        prestep = AnalysisModelPrestep(schema, theta0=theta0)
    return ImputationPlan(
        targets=targets, derived=derived, m=m, iterations=iterations,
        gamma_hat=gamma_hat, base_seed=base_seed, variant=variant,
        prestep=prestep,
    )


def build_cecd_plan(
    schema: CovariateSchema,
    gamma_hat: float,
    m: int = 20,
    iterations: int = 10,
    base_seed: int = 0,
    theta0: ParamVector | None = None,
) -> ImputationPlan:
    """Cure-augmented ECD plan: the latent cure status C (redrawn every cycle
    from its posterior, forced to 0 on event rows) and its interactions
    replace the outcome-likelihood terms of the ECD form."""
    if gamma_hat <= 0:
        raise ImputationError("gamma_hat must be positive")
    targets = []
    fully = schema.fully_observed()
    for j in _incomplete_biomarkers(schema):
        others = [b for b in schema.biomarkers() if b != j] + fully
        predictors = (
            ["C", "C_x_event"]
            + others
            + [f"C_x_{k}" for k in others]
            + ["C_x_H00"]
            + [f"C_x_H00_x_{k}" for k in others]
        )
        targets.append(
            TargetSpec(name=j, method="bernoulli-logistic", predictors=predictors)
        )
    return ImputationPlan(
        targets=targets,
        derived=_ecd_derived(schema, gamma_hat, with_cure=True),
        m=m,
        iterations=iterations,
        gamma_hat=gamma_hat,
        base_seed=base_seed,
        prestep=CureStatusPrestep(schema, theta0=theta0),
    )


def impute_cure_status(
    time: np.ndarray,
    event: np.ndarray,
    x: np.ndarray,
    theta: ParamVector,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw the latent cure indicator: 0 on event rows, else Bernoulli with
    the posterior cure probability given survival to the observed time."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    x = np.asarray(x, dtype=float)
    pi = expit(theta.alpha0 + x @ theta.alpha)
    rate = np.exp(theta.beta0 + x @ theta.beta)
    s0 = np.exp(-rate * np.power(time, theta.gamma))
    post = pi / (pi + (1.0 - pi) * s0)
    draws = (rng.random(len(time)) < post).astype(float)
    draws[event == 1.0] = 0.0
    return draws


class AnalysisModelPrestep:
    """Refreshes the analysis-model parameters at the start of each cycle.

    The refresh is a capped penalized fit on the chain's current working
    data, warm-started from the previous cycle (initially from a
    complete-case fit the caller must supply as theta0).
    """

    provides: tuple[str, ...] = ()

    def __init__(self, schema: CovariateSchema, theta0: ParamVector | None = None,
                 max_iter: int = 25):
        self.schema = schema
        self.theta0 = theta0
        self.max_iter = max_iter

    def initialize(self, state: ChainState, plan: ImputationPlan) -> None:
        if self.theta0 is None:
            raise ImputationError(
                "analysis-model parameters unavailable; seed the plan with a "
                "complete-case fit (theta0)"
            )
        state.extras["theta"] = self.theta0

    def _analysis_matrix(self, state: ChainState) -> np.ndarray:
        cols = self.schema.analysis_covariates()
        return np.column_stack([state.columns[c] for c in cols])

    def refresh_theta(self, state: ChainState) -> ParamVector:
        from .fcs import recompute_derived  # subtypes must reflect current draws

        kernel = McKernel(
            self._analysis_matrix(state), state.columns["time"], state.columns["event"]
        )
        init = state.extras["theta"].to_array()
        result = fit_kernel(
            kernel, "FTPL", init=init, controls=FitControls(max_iter=self.max_iter)
        )
        theta = result.theta
        if not np.all(np.isfinite(theta.to_array())) or theta.gamma <= 0:
            theta = state.extras["theta"]
            state.log.append(
                f"chain {state.chain} it {state.iteration}: theta refresh failed, reused"
            )
        state.extras["theta"] = theta
        return theta

    def run(self, state: ChainState, plan: ImputationPlan,
            rng: np.random.Generator) -> None:
        from .fcs import recompute_derived

        recompute_derived(state, plan)
        self.refresh_theta(state)

    def to_dict(self) -> dict:
        return {"kind": "analysis-refresh", "max_iter": self.max_iter}


class CureStatusPrestep(AnalysisModelPrestep):
    """Analysis refresh plus a posterior redraw of the latent cure column."""

    provides = ("C",)

    def initialize(self, state: ChainState, plan: ImputationPlan) -> None:
        super().initialize(state, plan)
        state.columns["C"] = np.zeros_like(state.columns["event"])

    def run(self, state: ChainState, plan: ImputationPlan,
            rng: np.random.Generator) -> None:
        from .fcs import recompute_derived

        recompute_derived(state, plan)
        theta = self.refresh_theta(state)
        state.columns["C"] = impute_cure_status(
            state.columns["time"], state.columns["event"],
            self._analysis_matrix(state), theta, rng,
        )

    def to_dict(self) -> dict:
        return {"kind": "cure-status", "max_iter": self.max_iter}


# ---------------------------------------------------------------------------
# Exact posterior machinery
# ---------------------------------------------------------------------------


def _row_loglik(theta: ParamVector, y, t, x) -> np.ndarray:
    """Vectorized per-row log-likelihood contributions of the analysis model."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eta_a = theta.alpha0 + x @ theta.alpha
    eta_b = theta.beta0 + x @ theta.beta
    g = theta.gamma
    with np.errstate(divide="ignore"):
        logt = np.where(t > 0, np.log(np.maximum(t, 1e-300)), 0.0)
    lam = np.where(t > 0, np.exp(np.minimum(eta_b + g * logt, 700.0)), 0.0)
    log_pi = -np.logaddexp(0.0, -eta_a)
    log_1mpi = -np.logaddexp(0.0, eta_a)
    ev = np.log(g) + (g - 1.0) * logt + eta_b - lam + log_1mpi
    ce = np.logaddexp(log_pi, log_1mpi - lam)
    return np.where(y == 1.0, ev, ce)


def exact_posterior_logit(
    theta: ParamVector,
    prior_coeffs: tuple[float, float, np.ndarray],
    row: tuple[float, float, np.ndarray],
) -> float:
    """Exact conditional log-odds that an incomplete binary covariate is 1.

    The likelihood ratio is evaluated through the A/B intermediates
    A = exp(alpha0 + alpha_{-j}'x_{-j}) and B = exp(beta0 + beta_{-j}'x_{-j}),
    with the prior log-odds sigma'x + sigma_j + sigma0 added. The covariate's
    own coefficients must occupy the first position of theta's alpha/beta.
    """
    sigma0, sigma_j, sigma = prior_coeffs
    y, t, x_minus = row
    x_minus = np.asarray(x_minus, dtype=float)
    alpha_j, beta_j = theta.alpha[0], theta.beta[0]
    log_a = theta.alpha0 + float(theta.alpha[1:] @ x_minus)
    log_b = theta.beta0 + float(theta.beta[1:] @ x_minus)
    g = theta.gamma
    log_h00 = g * math.log(t) if t > 0 else -math.inf
    # cumulative hazards with X_j = 1 and X_j = 0
    lam1 = math.exp(min(log_b + beta_j + log_h00, 700.0)) if t > 0 else 0.0
    lam0 = math.exp(min(log_b + log_h00, 700.0)) if t > 0 else 0.0
    prior = sigma0 + sigma_j + float(np.asarray(sigma) @ x_minus)
    if y == 1.0:
        # log h0 ratio + log S0 ratio + log(1-pi) ratio
        out = beta_j - lam1 + lam0
        out += -np.logaddexp(0.0, log_a + alpha_j) + np.logaddexp(0.0, log_a)
    else:
        num = np.logaddexp(log_a + alpha_j, -lam1) - np.logaddexp(0.0, log_a + alpha_j)
        den = np.logaddexp(log_a, -lam0) - np.logaddexp(0.0, log_a)
        out = num - den
    return float(out + prior)


class ExactPosteriorSampler:
    """Draws an incomplete biomarker from its exact conditional distribution.

    Per missing row the analysis-model likelihood is evaluated with the
    biomarker set to 1 and to 0 (derived subtypes recomputed under each), a
    drawn logistic prior supplies the covariate's conditional odds, and the
    imputation is Bernoulli in the combined posterior probability.
    """

    def __init__(self, target: str, schema: CovariateSchema):
        self.target = target
        self.schema = schema

    def draw(self, state: ChainState, tspec: TargetSpec, mis: np.ndarray,
             rng: np.random.Generator) -> np.ndarray:
        theta = state.extras.get("theta")
        if theta is None:
            raise ImputationError(
                "exact posterior sampler needs analysis-model parameters; seed "
                "the plan with a complete-case fit (theta0)"
            )
        obs = ~mis
        prior_z = np.column_stack([state.columns[p] for p in tspec.predictors])
        prior_fit = fit_and_draw_logistic(
            prior_z[obs], state.columns[self.target][obs], rng
        )
        prior_logit = prior_fit.coefficients[0] + prior_z[mis] @ prior_fit.coefficients[1:]
        loglik = {}
        for value in (0.0, 1.0):
            cols = {
                k: (v[mis].copy() if isinstance(v, np.ndarray) else v)
                for k, v in state.columns.items()
            }
            cols[self.target] = np.full(int(mis.sum()), value)
            bio = {b: cols[b] for b in self.schema.biomarkers()}
            _, indicators = derive_subtypes(bio, self.schema)
            cols.update(indicators)
            x = np.column_stack(
                [cols[c] for c in self.schema.analysis_covariates()]
            )
            loglik[value] = _row_loglik(theta, cols["event"], cols["time"], x)
        logit = loglik[1.0] - loglik[0.0] + prior_logit
        return (rng.random(int(mis.sum())) < expit(logit)).astype(float)


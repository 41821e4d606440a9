"""Covariate schemas and derived-indicator boolean rules.

Binary covariates are stored as float arrays with ``nan`` marking a missing
value. Derived indicator columns (tumour subtypes) are defined by boolean
formulas over constituent biomarkers and evaluated under Kleene three-valued
logic, so an indicator is ``nan`` only when its value genuinely cannot be
resolved from the observed constituents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROLE_BIOMARKER = "biomarker"
ROLE_SUBTYPE = "derived-subtype"
ROLE_TPF = "tpf"
ROLE_OTHER = "fully-observed-other"

_ROLES = (ROLE_BIOMARKER, ROLE_SUBTYPE, ROLE_TPF, ROLE_OTHER)

# A boolean expression is a nested list: a bare string is a variable,
# ["not", expr], ["and", expr, ...], ["or", expr, ...].
BoolExpr = str | list


def eval_bool(expr: BoolExpr, columns: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate a boolean expression under three-valued logic.

    Inputs are float arrays over {0, 1, nan}. ``and`` returns 0 whenever any
    operand is 0 (even if others are nan); ``or`` returns 1 whenever any
    operand is 1. nan is returned only when the result is undetermined.
    """
    if isinstance(expr, str):
        return np.asarray(columns[expr], dtype=float)
    op, *args = expr
    if op == "not":
        (arg,) = args
        return 1.0 - eval_bool(arg, columns)
    vals = np.column_stack([eval_bool(a, columns) for a in args])
    if op == "and":
        out = np.where(np.any(vals == 0.0, axis=1), 0.0, np.prod(vals, axis=1))
    elif op == "or":
        out = np.where(
            np.any(vals == 1.0, axis=1), 1.0, 1.0 - np.prod(1.0 - vals, axis=1)
        )
    else:
        raise ValueError(f"unknown boolean operator: {op!r}")
    return out


def expr_variables(expr: BoolExpr) -> list[str]:
    """Variables referenced by an expression, in first-appearance order."""
    if isinstance(expr, str):
        return [expr]
    out: list[str] = []
    for a in expr[1:]:
        for v in expr_variables(a):
            if v not in out:
                out.append(v)
    return out


@dataclass(frozen=True)
class CovariateSchema:
    """Declares covariate columns, their roles, and subtype derivation rules.

    ``names`` lists every covariate column (constituent biomarkers, derived
    subtype indicators, and fully observed covariates). ``subtype_rules`` maps
    each derived indicator to its boolean formula over biomarkers. The
    ``reference_category`` indicator is omitted from the analysis model.
    Columns in ``analysis_excluded`` stay available to imputation models but
    are not analysis-model covariates (e.g. TPFs in the subtype-only model).
    """

    names: tuple[str, ...]
    roles: dict[str, str] = field(hash=False)
    subtype_rules: dict[str, BoolExpr] = field(hash=False)
    reference_category: str = ""
    analysis_excluded: tuple[str, ...] = ()

    def __post_init__(self):
        for name in self.names:
            role = self.roles.get(name)
            if role not in _ROLES:
                raise ValueError(f"column {name!r} has invalid role {role!r}")
        for ind, rule in self.subtype_rules.items():
            if self.roles.get(ind) != ROLE_SUBTYPE:
                raise ValueError(f"subtype rule given for non-subtype {ind!r}")
            for v in expr_variables(rule):
                if self.roles.get(v) != ROLE_BIOMARKER:
                    raise ValueError(
                        f"rule for {ind!r} references non-biomarker {v!r}"
                    )
        if self.reference_category and self.reference_category not in self.subtype_rules:
            raise ValueError("reference category has no subtype rule")

    def biomarkers(self) -> list[str]:
        return [n for n in self.names if self.roles[n] == ROLE_BIOMARKER]

    def subtypes(self) -> list[str]:
        return [n for n in self.names if self.roles[n] == ROLE_SUBTYPE]

    def tpfs(self) -> list[str]:
        return [n for n in self.names if self.roles[n] == ROLE_TPF]

    def fully_observed(self) -> list[str]:
        """Covariates guaranteed complete (TPFs and other observed columns)."""
        return [n for n in self.names if self.roles[n] in (ROLE_TPF, ROLE_OTHER)]

    def analysis_covariates(self) -> list[str]:
        """Analysis-model design columns: non-reference subtypes then TPFs."""
        subs = [s for s in self.subtypes() if s != self.reference_category]
        rest = [c for c in self.fully_observed() if c not in self.analysis_excluded]
        return subs + rest

    def constituents(self, indicator: str) -> list[str]:
        return expr_variables(self.subtype_rules[indicator])

    def to_dict(self) -> dict:
        return {
            "covariates": [{"name": n, "role": self.roles[n]} for n in self.names],
            "subtype_rules": self.subtype_rules,
            "reference_category": self.reference_category,
            "analysis_excluded": list(self.analysis_excluded),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSchema":
        names = tuple(c["name"] for c in d["covariates"])
        roles = {c["name"]: c["role"] for c in d["covariates"]}
        return cls(
            names=names,
            roles=roles,
            subtype_rules=d.get("subtype_rules", {}),
            reference_category=d.get("reference_category", ""),
            analysis_excluded=tuple(d.get("analysis_excluded", ())),
        )


BIOMARKERS = ("Her2", "ER", "PR", "Ki67")
SUBTYPES = ("W_Her2", "W_LuminalA", "W_LuminalB", "W_TN")

SUBTYPE_RULES: dict[str, BoolExpr] = {
    "W_Her2": "Her2",
    "W_TN": ["and", ["not", "Her2"], ["not", "ER"], ["not", "PR"]],
    "W_LuminalA": ["and", ["not", "Her2"], ["or", "ER", "PR"], ["not", "Ki67"]],
    "W_LuminalB": ["and", ["not", "Her2"], ["or", "ER", "PR"], "Ki67"],
}


def breast_schema(tpfs: tuple[str, ...] = ("MENS0", "TUMCT"),
                  reference: str = "W_LuminalB",
                  analysis_excluded: tuple[str, ...] = ()) -> CovariateSchema:
    """The standard four-biomarker / four-subtype schema with optional TPFs."""
    names = BIOMARKERS + SUBTYPES + tuple(tpfs)
    roles = {b: ROLE_BIOMARKER for b in BIOMARKERS}
    roles.update({s: ROLE_SUBTYPE for s in SUBTYPES})
    roles.update({t: ROLE_TPF for t in tpfs})
    return CovariateSchema(
        names=names,
        roles=roles,
        subtype_rules=dict(SUBTYPE_RULES),
        reference_category=reference,
        analysis_excluded=analysis_excluded,
    )

"""Survival dataset container with missingness-aware covariates and CSV I/O.

Missing entries are ``nan`` in the covariate frame. CSV files use an empty
field or ``NA`` for missing values and must carry ``time`` and ``event``
columns; covariate roles come from a schema JSON document.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .schema import CovariateSchema, eval_bool


class DataError(ValueError):
    """Raised when a dataset violates its declared schema."""


@dataclass
class SurvivalDataset:
    time: np.ndarray
    event: np.ndarray
    covariates: pd.DataFrame
    schema: CovariateSchema

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event, dtype=float)
        if self.time.shape != self.event.shape or self.time.ndim != 1:
            raise DataError("time and event must be 1-d arrays of equal length")
        if len(self.covariates) != self.n:
            raise DataError("covariate row count does not match time/event")

    @property
    def n(self) -> int:
        return self.time.shape[0]

    def validate(self) -> None:
        if np.any(self.time < 0) or np.any(~np.isfinite(self.time)):
            raise DataError("time must be finite and nonnegative")
        if not np.all(np.isin(self.event, (0.0, 1.0))):
            raise DataError("event must be 0/1")
        for name in self.schema.names:
            if name not in self.covariates.columns:
                raise DataError(f"schema column {name!r} missing from data")
        for name in self.schema.fully_observed():
            if self.covariates[name].isna().any():
                raise DataError(f"fully observed column {name!r} has missing entries")
        cols = {b: self.covariates[b].to_numpy(float) for b in self.schema.biomarkers()}
        for ind, rule in self.schema.subtype_rules.items():
            if ind not in self.covariates.columns:
                continue
            expected = eval_bool(rule, cols)
            actual = self.covariates[ind].to_numpy(float)
            ok = np.isnan(expected) | np.isnan(actual) | (expected == actual)
            if not np.all(ok):
                raise DataError(f"derived column {ind!r} inconsistent with constituents")

    def is_complete(self, columns: list[str] | None = None) -> bool:
        cols = columns if columns is not None else list(self.schema.names)
        return not self.covariates[cols].isna().any().any()

    def analysis_matrix(self) -> np.ndarray:
        """Design matrix of analysis covariates (no intercept column)."""
        cols = self.schema.analysis_covariates()
        x = self.covariates[cols].to_numpy(dtype=float)
        if np.isnan(x).any():
            raise DataError("analysis covariates contain missing entries")
        return x

    def refresh_derived(self) -> None:
        """Recompute subtype indicators from current biomarker values."""
        cols = {b: self.covariates[b].to_numpy(float) for b in self.schema.biomarkers()}
        for ind, rule in self.schema.subtype_rules.items():
            self.covariates[ind] = eval_bool(rule, cols)

    def subset(self, mask: np.ndarray) -> "SurvivalDataset":
        mask = np.asarray(mask, dtype=bool)
        return SurvivalDataset(
            time=self.time[mask],
            event=self.event[mask],
            covariates=self.covariates.loc[mask].reset_index(drop=True),
            schema=self.schema,
        )

    def copy(self) -> "SurvivalDataset":
        return SurvivalDataset(
            time=self.time.copy(),
            event=self.event.copy(),
            covariates=self.covariates.copy(),
            schema=self.schema,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"time": self.time, "event": self.event})
        return pd.concat([frame, self.covariates.reset_index(drop=True)], axis=1)

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, na_rep="NA")

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: CovariateSchema) -> "SurvivalDataset":
        for required in ("time", "event"):
            if required not in frame.columns:
                raise DataError(f"required column {required!r} absent")
        cov_cols = [c for c in frame.columns if c not in ("time", "event")]
        ds = cls(
            time=frame["time"].to_numpy(float),
            event=frame["event"].to_numpy(float),
            covariates=frame[cov_cols].astype(float).reset_index(drop=True),
            schema=schema,
        )
        missing_inds = [s for s in schema.subtypes() if s not in ds.covariates.columns]
        if missing_inds:
            for ind in missing_inds:
                ds.covariates[ind] = np.nan
            ds.refresh_derived()
        return ds

    @classmethod
    def from_csv(cls, path: str | Path, schema: CovariateSchema) -> "SurvivalDataset":
        frame = pd.read_csv(path, na_values=["NA"], keep_default_na=True)
        return cls.from_frame(frame, schema)


def load_schema(path: str | Path) -> CovariateSchema:
    with open(path) as fh:
        return CovariateSchema.from_dict(json.load(fh))


def save_schema(schema: CovariateSchema, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(schema.to_dict(), fh, indent=2)

"""Censored-survival evaluation statistics"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import stats as sps

from .defaults import PREDICTION_COLUMNS, logger
from .errors import DataError, PreconditionError

RISK_GROUPS = ("low", "high")
MIDDLE = "middle"


@dataclass(frozen=True, eq=False)
class RiskTable:
    """Out-of-sample risks with the survival outcome of each patient

    `fold` is filled by cross-validation and left out otherwise.
    """

    patient_ids: tuple
    risk: np.ndarray
    t_cont: np.ndarray
    censored: np.ndarray
    fold: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "patient_ids", tuple(map(str, self.patient_ids)))
        for name in ("risk", "t_cont"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=np.float64)
            )
        object.__setattr__(self, "censored", np.asarray(self.censored, dtype=int))
        if self.fold is not None:
            object.__setattr__(self, "fold", np.asarray(self.fold, dtype=int))

        n = len(self.patient_ids)
        sizes = {self.risk.size, self.t_cont.size, self.censored.size}
        if self.fold is not None:
            sizes.add(self.fold.size)
        if sizes != {n}:
            raise DataError("Risk table columns have different lengths")
        if len(set(self.patient_ids)) != n:
            raise DataError("Risk table patient ids must be unique")
        if not np.all(np.isfinite(self.risk)):
            raise DataError("Risk table contains non-finite risks")
        if not np.all(np.isin(self.censored, (0, 1))):
            raise DataError("Censorship flags must be 0 or 1")

    def __len__(self) -> int:
        return len(self.patient_ids)

    @property
    def events(self) -> int:
        return int(np.sum(self.censored == 0))

    def take(self, indices: Sequence[int] | np.ndarray) -> RiskTable:
        """Rows by position; repeated positions get suffixed ids"""
        indices = np.asarray(indices, dtype=int)
        ids = [self.patient_ids[i] for i in indices]
        if len(set(ids)) != len(ids):
            ids = [f"{pid}#{k}" for k, pid in enumerate(ids)]
        return RiskTable(
            tuple(ids),
            self.risk[indices],
            self.t_cont[indices],
            self.censored[indices],
            None if self.fold is None else self.fold[indices],
        )

    def where(self, mask: np.ndarray) -> RiskTable:
        return self.take(np.flatnonzero(mask))

    def with_risk(self, risk: np.ndarray) -> RiskTable:
        return replace(self, risk=np.asarray(risk, dtype=np.float64))

    @classmethod
    def concat(cls, tables: Sequence[RiskTable]) -> RiskTable:
        folds = [t.fold for t in tables]
        return cls(
            tuple(pid for t in tables for pid in t.patient_ids),
            np.concatenate([t.risk for t in tables]),
            np.concatenate([t.t_cont for t in tables]),
            np.concatenate([t.censored for t in tables]),
            None if any(f is None for f in folds) else np.concatenate(folds),
        )

    def to_frame(self) -> pd.DataFrame:
        columns = {
            "patient_id": list(self.patient_ids),
            "fold": self.fold,
            "risk": self.risk,
            "t_cont": self.t_cont,
            "censored": self.censored,
        }
        return pd.DataFrame(
            {
                name: columns[name]
                for name in PREDICTION_COLUMNS
                if columns[name] is not None
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> RiskTable:
        return cls(
            tuple(frame["patient_id"].astype(str)),
            frame["risk"].to_numpy(),
            frame["t_cont"].to_numpy(),
            frame["censored"].to_numpy(),
            frame["fold"].to_numpy() if "fold" in frame else None,
        )

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: str | Path) -> RiskTable:
        try:
            frame = pd.read_csv(path, dtype={"patient_id": str})
        except FileNotFoundError:
            raise DataError("File not found", path=str(path)) from None
        missing = set(PREDICTION_COLUMNS) - {"fold"} - set(frame.columns)
        if missing:
            raise DataError(f"Missing columns {sorted(missing)}", path=str(path))
        return cls.from_frame(frame)


# Concordance
def c_index(table: RiskTable) -> float:
    """Harrell's concordance index

    A pair (i, j) is comparable when i had an event and t_i < t_j. It scores
    1 when risk_i > risk_j and 0.5 when the risks tie.
    """
    t, risk = table.t_cont, table.risk
    event = table.censored == 0
    comparable = event[:, None] & (t[:, None] < t[None, :])
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise DataError("No comparable pairs, the c-index is undefined")
    concordant = np.sum(comparable & (risk[:, None] > risk[None, :]))
    tied = np.sum(comparable & (risk[:, None] == risk[None, :]))
    return float((concordant + 0.5 * tied) / n_comparable)


# Kaplan-Meier
@dataclass(frozen=True, eq=False)
class KmCurve:
    """Product-limit estimate at every distinct observed time"""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def survival_at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "time": self.times,
                "survival": self.survival,
                "at_risk": self.at_risk,
                "events": self.events,
            }
        )


def km_estimator(times: Sequence[float], censored: Sequence[int]) -> KmCurve:
    times = np.asarray(times, dtype=np.float64)
    censored = np.asarray(censored, dtype=int)
    if times.size == 0:
        raise PreconditionError("Kaplan-Meier needs at least one observation")
    if times.shape != censored.shape:
        raise DataError("times and censored differ in length")

    distinct = np.unique(times)
    at_risk = np.array([np.sum(times >= u) for u in distinct])
    events = np.array([np.sum((times == u) & (censored == 0)) for u in distinct])
    survival = np.cumprod(1.0 - events / at_risk)
    return KmCurve(distinct, survival, at_risk, events)


def km_median_survival(curve: KmCurve) -> float | None:
    """First time the estimate reaches 0.5 or below"""
    below = np.flatnonzero(curve.survival <= 0.5)
    return float(curve.times[below[0]]) if below.size else None


# Tests
def chi2_pvalue(x: float, dof: int) -> float:
    return float(sps.chi2.sf(x, dof))


def t_pvalue(t: float, dof: float) -> float:
    """Two-sided"""
    return float(2.0 * sps.t.sf(abs(t), dof))


def logrank_test(group_a: RiskTable, group_b: RiskTable) -> tuple[float, float]:
    """Two-group logrank chi-square with hypergeometric variance"""
    times = np.concatenate([group_a.t_cont, group_b.t_cont])
    event = np.concatenate([group_a.censored, group_b.censored]) == 0
    in_a = np.r_[np.ones(len(group_a), bool), np.zeros(len(group_b), bool)]
    if not event.any():
        raise DataError("The logrank test needs at least one event")

    observed = expected = variance = 0.0
    for u in np.unique(times[event]):
        risk_set = times >= u
        n = risk_set.sum()
        n_a = (risk_set & in_a).sum()
        dead = event & (times == u)
        d = dead.sum()
        observed += (dead & in_a).sum()
        expected += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)

    if variance <= 0:
        raise DataError("Degenerate logrank test, the variance is zero")
    chi2 = (observed - expected) ** 2 / variance
    return float(chi2), chi2_pvalue(chi2, 1)


def two_sample_t(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Welch's unequal-variance t-test"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 2 or ys.size < 2:
        raise DataError(
            f"t-test needs two samples of size >= 2, got {xs.size} and {ys.size}"
        )
    if np.var(xs, ddof=1) == 0 and np.var(ys, ddof=1) == 0:
        raise DataError("t-test is degenerate, both samples have zero variance")
    result = sps.ttest_ind(xs, ys, equal_var=False)
    return float(result.statistic), float(result.pvalue)


# Bootstrap
def bootstrap_ci(
    table: RiskTable,
    statistic: Callable[[RiskTable], float] = c_index,
    replicates: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile interval from row resamples

    Resamples where the statistic is undefined are drawn again, up to ten
    times the number of replicates in total.
    """
    if replicates < 2:
        raise PreconditionError(f"Need at least 2 replicates, got {replicates}")
    if not 0 < level < 1:
        raise PreconditionError(f"level must be in (0, 1), got {level}")

    rng = np.random.default_rng(seed)
    n = len(table)
    values = []
    draws = 0
    while len(values) < replicates:
        if draws >= 10 * replicates:
            raise DataError(
                f"Statistic undefined on too many resamples "
                f"({draws} draws for {len(values)} replicates)"
            )
        draws += 1
        sample = table.take(rng.integers(0, n, size=n))
        try:
            values.append(statistic(sample))
        except DataError:
            continue

    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


# Risk groups
def risk_groups(table: RiskTable, scheme: str = "median") -> np.ndarray:
    """'low'/'high' per row; 'middle' for the rows the quartile scheme drops"""
    if len(table) == 0:
        raise PreconditionError("Cannot split an empty risk table")
    risk = table.risk
    if scheme == "median":
        return np.where(risk <= np.median(risk), "low", "high")
    if scheme == "quartile":
        q1, q3 = np.quantile(risk, [0.25, 0.75])
        return np.where(risk < q1, "low", np.where(risk > q3, "high", MIDDLE))
    raise PreconditionError(f"Unknown risk scheme {scheme!r}")


@dataclass
class StratificationReport:
    scheme: str
    sizes: dict
    events: dict
    median_survival: dict
    logrank_chi2: float | None
    logrank_p: float | None
    curves: dict = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "sizes": self.sizes,
            "events": self.events,
            "median_survival": self.median_survival,
            "logrank_chi2": self.logrank_chi2,
            "logrank_p": self.logrank_p,
        }


def stratification_report(
    table: RiskTable,
    scheme: str = "median",
) -> StratificationReport:
    """Risk groups, their KM curves and the logrank test between them"""
    labels = risk_groups(table, scheme)
    groups = {name: table.where(labels == name) for name in RISK_GROUPS}
    curves = {
        name: km_estimator(group.t_cont, group.censored)
        for name, group in groups.items()
        if len(group)
    }

    chi2 = pvalue = None
    if all(len(group) for group in groups.values()):
        try:
            chi2, pvalue = logrank_test(groups["low"], groups["high"])
        except DataError as exc:
            logger.warning("Logrank test skipped: %s", exc)
    else:
        logger.warning("Logrank test skipped: one risk group is empty")

    return StratificationReport(
        scheme=scheme,
        sizes={name: len(group) for name, group in groups.items()},
        events={name: group.events for name, group in groups.items()},
        median_survival={
            name: km_median_survival(curve) for name, curve in curves.items()
        },
        logrank_chi2=chi2,
        logrank_p=pvalue,
        curves=curves,
    )

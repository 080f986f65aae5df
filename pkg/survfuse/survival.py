"""Time discretization and the discrete-time survival likelihood"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .defaults import LOG_FLOOR, N_BINS
from .errors import ContractError, DataError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class SurvivalLabel:
    """Follow-up time in months and censorship (1 = alive at last follow-up)"""

    t_cont: float
    censored: int
    y_bin: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.t_cont) or self.t_cont < 0:
            raise DataError(f"Survival time must be finite and >= 0, got {self.t_cont}")
        if self.censored not in (0, 1):
            raise DataError(f"Censorship must be 0 or 1, got {self.censored}")
        if self.y_bin is not None and not 0 <= self.y_bin < N_BINS:
            raise DataError(f"Bin index must be in [0, {N_BINS}), got {self.y_bin}")

    def with_bins(self, bins: TimeBins) -> SurvivalLabel:
        return replace(self, y_bin=discretize(self.t_cont, bins))


@dataclass(frozen=True)
class TimeBins:
    """Interior cut points t1 < t2 < t3; t0 = 0 and t4 = inf are implicit"""

    cuts: tuple

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        object.__setattr__(self, "cuts", cuts)
        if len(cuts) != N_BINS - 1:
            raise DataError(f"Expected {N_BINS - 1} cut points, got {len(cuts)}")
        if not cuts[0] > 0 or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise DataError(f"Cut points must satisfy 0 < t1 < t2 < t3, got {cuts}")


def make_bins(labels: Sequence[SurvivalLabel]) -> TimeBins:
    """Quartiles (linear interpolation) of the uncensored event times"""
    events = np.array([lab.t_cont for lab in labels if lab.censored == 0])
    if np.unique(events).size < N_BINS:
        raise DataError(
            f"Need at least {N_BINS} distinct uncensored event times to build "
            f"bins, got {np.unique(events).size}"
        )
    cuts = np.quantile(events, np.arange(1, N_BINS) / N_BINS)
    return TimeBins(tuple(cuts))


def discretize(t: float, bins: TimeBins) -> int:
    """The r such that t lies in [t_r, t_{r+1})"""
    if not t >= 0:
        raise DataError(f"Survival time must be >= 0, got {t}")
    return int(np.searchsorted(bins.cuts, t, side="right"))


def _check_hazards(h: Tensor) -> None:
    """Model hazards lie in (0, 1), but a float64 sigmoid rounds to exactly 0
    or 1 for logits beyond about -745 and 37, so the closed interval is
    accepted; the loss clamps its logs at LOG_FLOOR.
    """
    if h.ndim != 1 or not np.all((h.values >= 0) & (h.values <= 1)):
        raise ContractError(f"Hazards must be a vector in [0, 1], got {h.values}")


def hazard_to_survival(h: Tensor) -> Tensor:
    """S(r) = prod_{u <= r} (1 - h(u)); S(-1) = 1 is implied"""
    _check_hazards(h)
    return T.cumprod(1.0 - h)


def _terms(h: Tensor, label: SurvivalLabel) -> tuple[Tensor, Tensor]:
    """(censored term, uncensored term) of the likelihood, unweighted"""
    if label.y_bin is None:
        raise ContractError("The label has no bin assigned, call with_bins first")
    surv = hazard_to_survival(h)
    y = label.y_bin
    censored_term = -T.log(T.take(surv, y), floor=LOG_FLOOR)
    hazard_term = -T.log(T.take(h, y), floor=LOG_FLOOR)
    if y == 0:
        # -log S(-1) = -log 1
        uncensored_term = hazard_term
    else:
        uncensored_term = hazard_term - T.log(T.take(surv, y - 1), floor=LOG_FLOOR)
    return censored_term, uncensored_term


def nll_loss(h: Tensor, label: SurvivalLabel) -> Tensor:
    """-c log S(Y) - (1 - c) log S(Y - 1) - (1 - c) log h(Y)"""
    censored_term, uncensored_term = _terms(h, label)
    c = float(label.censored)
    return censored_term * c + uncensored_term * (1.0 - c)


def uncensored_loss(h: Tensor, label: SurvivalLabel) -> Tensor:
    """The (1 - c)-weighted terms only"""
    _, uncensored_term = _terms(h, label)
    return uncensored_term * (1.0 - float(label.censored))


def combined_loss(h: Tensor, label: SurvivalLabel, beta: float = 0.0) -> Tensor:
    """(1 - beta) L + beta L_uncensored"""
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must be in [0, 1], got {beta}")
    loss = nll_loss(h, label) * (1.0 - beta)
    if beta == 0.0:
        return loss
    return loss + uncensored_loss(h, label) * beta

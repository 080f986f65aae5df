"""Integrated Gradients, attention maps, modality shares and TIL scoring"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from . import tensor as T
from .defaults import (
    DEFAULT_IG_STEPS,
    DEFAULT_TOP_FRAC,
    TIL_MIN_CELLS,
    TIL_MIN_LYMPHOCYTES,
    TIL_MIN_TUMOR,
    logger,
)
from .errors import (
    DataError,
    DegenerateModelError,
    NumericError,
    ParameterError,
    PreconditionError,
)
from .models import AmilModel, MmfModel, Model, SnnModel, risk_tensor
from .stats import RiskTable, risk_groups, two_sample_t
from .tensor import Tape, Tensor

DIRECTIONS = ("high_risk", "low_risk", "neutral")
# ops whose derivative jumps where their input crosses 0
KINKED_OPS = ("relu", "selu")
BREAKPOINT_XTOL = 1e-13
MIN_SEGMENT = 1e-12


# Integrated Gradients
@dataclass
class AttributionReport:
    """Signed IG per feature; positive values push towards high risk"""

    feature_names: list
    values: np.ndarray
    ig: np.ndarray
    output: float
    baseline_output: float
    completeness_gap: float
    segments: int = 1

    @property
    def relative_gap(self) -> float:
        delta = abs(self.output - self.baseline_output)
        return self.completeness_gap / max(1e-8, delta)

    @property
    def directions(self) -> list[str]:
        return [
            DIRECTIONS[0] if v > 0 else DIRECTIONS[1] if v < 0 else DIRECTIONS[2]
            for v in self.ig
        ]

    def to_dict(self) -> dict:
        return {
            "output": self.output,
            "baseline_output": self.baseline_output,
            "completeness_gap": self.completeness_gap,
            "relative_gap": self.relative_gap,
            "segments": self.segments,
            "features": [
                {
                    "feature": name,
                    "value": float(value),
                    "ig": float(ig),
                    "direction": direction,
                }
                for name, value, ig, direction in zip(
                    self.feature_names, self.values, self.ig, self.directions
                )
            ],
        }


def _evaluate(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> float:
    value = fn(Tensor(point)).item()
    if not np.isfinite(value):
        raise NumericError(f"Attribution target is not finite ({value})")
    return value


def _kink_inputs(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    """Pre-activations of every unit that depends on the input and whose
    activation has a derivative jump at 0"""
    var = Tensor(point, requires_grad=True)
    with Tape() as tape:
        fn(var)
    parts = [
        node.inputs[0].values.reshape(-1)
        for node in tape.nodes
        if node.op in KINKED_OPS
    ]
    return np.concatenate(parts) if parts else np.zeros(0)


def path_breakpoints(
    fn: Callable[[Tensor], Tensor],
    baseline: np.ndarray,
    path: np.ndarray,
    steps: int,
) -> list[float]:
    """Interpolation coefficients in (0, 1) where a kinked unit changes side

    Sign changes are bracketed on a grid of 4 * steps intervals and each
    one is refined with Brent's method.
    """
    grid = np.linspace(0.0, 1.0, 4 * steps + 1)
    pre = np.stack([_kink_inputs(fn, baseline + a * path) for a in grid])
    if pre.shape[1] == 0:
        return []
    positive = pre > 0
    cuts = []
    for i in np.flatnonzero((positive[:-1] != positive[1:]).any(axis=1)):
        lo, hi = grid[i], grid[i + 1]
        for unit in np.flatnonzero(positive[i] != positive[i + 1]):
            if pre[i, unit] == 0:
                cuts.append(lo)
            elif pre[i + 1, unit] == 0:
                cuts.append(hi)
            else:
                cuts.append(
                    brentq(
                        lambda a: _kink_inputs(fn, baseline + a * path)[unit],
                        lo,
                        hi,
                        xtol=BREAKPOINT_XTOL,
                    )
                )
    return sorted(c for c in set(cuts) if 0.0 < c < 1.0)


def composite_nodes(
    breakpoints: Sequence[float],
    steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1], one rule per segment

    A segment of length L gets max(3, ceil(steps * L)) nodes; without
    breakpoints this is the plain `steps`-node rule.
    """
    edges = np.unique(np.concatenate([[0.0], breakpoints, [1.0]]))
    alphas, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo < MIN_SEGMENT:
            continue
        n = steps if len(edges) == 2 else max(3, math.ceil(steps * (hi - lo)))
        nodes, w = np.polynomial.legendre.leggauss(n)
        alphas.append(lo + (nodes + 1.0) * (hi - lo) / 2.0)
        weights.append(w * (hi - lo) / 2.0)
    return np.concatenate(alphas), np.concatenate(weights)


def integrated_gradients(
    fn: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    baseline: Tensor | np.ndarray | None = None,
    steps: int = DEFAULT_IG_STEPS,
    feature_names: Sequence[str] | None = None,
) -> AttributionReport:
    """Path integral of the gradient from `baseline` (zeros by default) to
    `x`, by composite Gauss-Legendre quadrature on [0, 1]

    The path is split where a ReLU or SeLU pre-activation crosses zero, so
    every segment integrates a smooth function.

    Args:
        fn: Scalar function of a vector, built from tensor ops
        steps: The number of quadrature nodes over the whole path
    """
    if steps < 2:
        raise ParameterError(f"steps must be >= 2, got {steps}")
    x = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    if baseline is None:
        baseline = np.zeros_like(x)
    baseline = np.asarray(
        baseline.values if isinstance(baseline, Tensor) else baseline,
        dtype=np.float64,
    )
    if baseline.shape != x.shape:
        raise PreconditionError(
            f"Baseline shape {baseline.shape} differs from input {x.shape}"
        )

    path = x - baseline
    breakpoints = path_breakpoints(fn, baseline, path, steps)
    alphas, weights = composite_nodes(breakpoints, steps)
    avg_grad = np.zeros_like(x)
    for alpha, weight in zip(alphas, weights):
        var = Tensor(baseline + alpha * path, requires_grad=True)
        with Tape() as tape:
            out = fn(var)
            if not np.isfinite(out.item()):
                raise NumericError(f"Attribution target is not finite at alpha={alpha}")
            tape.backward(out)
        avg_grad += weight * var.grad

    ig = path * avg_grad
    fx, fb = _evaluate(fn, x), _evaluate(fn, baseline)
    names = (
        list(feature_names)
        if feature_names is not None
        else [f"x{i}" for i in range(x.size)]
    )
    return AttributionReport(
        feature_names=names,
        values=x,
        ig=ig,
        output=fx,
        baseline_output=fb,
        completeness_gap=float(abs(ig.sum() - (fx - fb))),
        segments=len(breakpoints) + 1,
    )


def molecular_attribution(
    model: Model,
    patient,
    feature_names: Sequence[str],
    steps: int = DEFAULT_IG_STEPS,
) -> AttributionReport:
    """IG of the risk score with respect to the molecular input"""
    if isinstance(model, AmilModel):
        raise PreconditionError("AMIL has no molecular input to attribute")
    if isinstance(model, SnnModel):

        def fn(x: Tensor) -> Tensor:
            return risk_tensor(model(x).hazards)

    else:
        bag = patient.bag

        def fn(x: Tensor) -> Tensor:
            return risk_tensor(model(bag, x).hazards)

    return integrated_gradients(
        fn, patient.molecular, steps=steps, feature_names=feature_names
    )


def fusion_attribution(
    mmf: MmfModel,
    h_wsi: Tensor,
    h_mol: Tensor,
    steps: int = DEFAULT_IG_STEPS,
) -> AttributionReport:
    """IG of the risk score over [h_wsi, h_mol] against a zero baseline"""
    k = h_wsi.size

    def fn(z: Tensor) -> Tensor:
        return risk_tensor(mmf.fuse(T.slice_(z, 0, k), T.slice_(z, k, z.size)))

    joint = np.concatenate([h_wsi.values, h_mol.values])
    names = [f"wsi_{i}" for i in range(k)] + [f"mol_{i}" for i in range(h_mol.size)]
    return integrated_gradients(fn, joint, steps=steps, feature_names=names)


def modality_contribution(
    mmf: MmfModel,
    bag: Tensor,
    x: Tensor,
    steps: int = DEFAULT_IG_STEPS,
) -> tuple[float, float]:
    """Shares of the summed |IG| that fall on each modality"""
    out = mmf(bag, x)
    report = fusion_attribution(mmf, out.h_wsi, out.h_mol, steps)
    k = out.h_wsi.size
    wsi = float(np.abs(report.ig[:k]).sum())
    mol = float(np.abs(report.ig[k:]).sum())
    total = wsi + mol
    if total < 1e-12:
        raise DegenerateModelError(
            f"Total attribution {total:.3g} is too small to split by modality"
        )
    return wsi / total, mol / total


def gene_attribution_tests(
    reports: Sequence[AttributionReport],
) -> pd.DataFrame:
    """Per feature, Welch t-test of the attributions of patients with low
    (<= median) against high (> median) values of that feature

    Sorted by mean |IG| descending.
    """
    if not reports:
        raise PreconditionError("No attribution reports to test")
    names = reports[0].feature_names
    values = np.stack([r.values for r in reports])
    igs = np.stack([r.ig for r in reports])

    rows = []
    for j, name in enumerate(names):
        col, ig = values[:, j], igs[:, j]
        high = col > np.median(col)
        t = p = np.nan
        reason = ""
        try:
            t, p = two_sample_t(ig[~high], ig[high])
        except DataError as exc:
            reason = str(exc)
        rows.append((name, np.abs(ig).mean(), ig.mean(), t, p, reason))

    frame = pd.DataFrame(
        rows, columns=["feature", "mean_abs_ig", "mean_ig", "t", "p", "reason"]
    )
    return frame.sort_values(
        ["mean_abs_ig", "feature"], ascending=[False, True], kind="mergesort"
    ).reset_index(drop=True)


# Attention
def attention_percentiles(
    scores: Sequence[float],
    reference: Sequence[float] | None = None,
) -> np.ndarray:
    """Mid-rank percentile of each score within `reference` (the scores
    themselves by default), rescaled so the smallest is 0 and the largest 1

    When all percentiles coincide they are returned unscaled.
    """
    scores = np.asarray(scores, dtype=np.float64)
    reference = np.sort(
        np.asarray(scores if reference is None else reference, dtype=np.float64)
    )
    if reference.size == 0:
        raise PreconditionError("The reference distribution is empty")
    less = np.searchsorted(reference, scores, side="left")
    equal = np.searchsorted(reference, scores, side="right") - less
    pct = (less + 0.5 * equal) / reference.size
    if pct.size and pct.max() > pct.min():
        pct = (pct - pct.min()) / (pct.max() - pct.min())
    return pct


@dataclass
class AttentionMap:
    patch_ids: np.ndarray
    coords: np.ndarray
    raw: np.ndarray
    percentile: np.ndarray

    def __len__(self) -> int:
        return self.raw.size

    @classmethod
    def from_scores(
        cls,
        raw: Sequence[float],
        coords: np.ndarray | None = None,
        reference: Sequence[float] | None = None,
    ) -> AttentionMap:
        raw = np.asarray(raw, dtype=np.float64)
        if coords is None:
            coords = np.full((raw.size, 2), np.nan)
        return cls(
            np.arange(raw.size),
            np.asarray(coords, dtype=np.float64),
            raw,
            attention_percentiles(raw, reference) if raw.size else raw,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "patch_id": self.patch_ids,
                "x": self.coords[:, 0],
                "y": self.coords[:, 1],
                "raw": self.raw,
                "percentile": self.percentile,
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> AttentionMap:
        return cls(
            frame["patch_id"].to_numpy(dtype=int),
            frame[["x", "y"]].to_numpy(dtype=np.float64),
            frame["raw"].to_numpy(dtype=np.float64),
            frame["percentile"].to_numpy(dtype=np.float64),
        )


def attention_map(model: Model, patient) -> AttentionMap:
    """Raw attention of the slide branch over a patient's bag"""
    if isinstance(model, SnnModel):
        raise PreconditionError("SNN has no attention to export")
    branch = model.amil if isinstance(model, MmfModel) else model
    _, attention = branch.encode(patient.bag)
    return AttentionMap.from_scores(attention.values, patient.patch_coords)


def top_attention_patches(
    amap: AttentionMap,
    frac: float = DEFAULT_TOP_FRAC,
) -> list[int]:
    """The ceil(frac * M) highest-scoring patch ids, ties by id ascending"""
    if len(amap) == 0:
        raise PreconditionError("Empty attention map")
    if not 0 < frac <= 1:
        raise ParameterError(f"frac must be in (0, 1], got {frac}")
    # rounding keeps 0.01 * 100 from becoming 2 patches
    k = math.ceil(round(frac * len(amap), 9))
    order = np.lexsort((amap.patch_ids, -amap.raw))
    return [int(pid) for pid in amap.patch_ids[order[:k]]]


# TIL
@dataclass(frozen=True)
class PatchCellCounts:
    patch_id: int
    total: int
    lymphocytes: int
    tumor: int

    def __post_init__(self):
        if min(self.total, self.lymphocytes, self.tumor) < 0:
            raise DataError(f"Patch {self.patch_id}: negative cell count")
        if self.lymphocytes + self.tumor > self.total:
            raise DataError(
                f"Patch {self.patch_id}: lymphocytes + tumor exceed the total"
            )


def til_positive(counts: PatchCellCounts) -> bool:
    return (
        counts.total > TIL_MIN_CELLS
        and counts.lymphocytes > TIL_MIN_LYMPHOCYTES
        and counts.tumor > TIL_MIN_TUMOR
    )


def til_fraction(counts: Sequence[PatchCellCounts]) -> float:
    if not counts:
        raise PreconditionError("No patches to score")
    return sum(map(til_positive, counts)) / len(counts)


def cell_fractions(counts: Sequence[PatchCellCounts]) -> tuple[float, float]:
    """(lymphocyte, tumor) share of all counted cells; 0 when none counted"""
    total = sum(c.total for c in counts)
    if total == 0:
        return 0.0, 0.0
    return (
        sum(c.lymphocytes for c in counts) / total,
        sum(c.tumor for c in counts) / total,
    )


def read_cell_counts(frame: pd.DataFrame) -> dict[str, dict[int, PatchCellCounts]]:
    out: dict[str, dict[int, PatchCellCounts]] = {}
    for row in frame.itertuples(index=False):
        out.setdefault(str(row.patient_id), {})[int(row.patch_id)] = PatchCellCounts(
            int(row.patch_id), int(row.total), int(row.lymphocytes), int(row.tumor)
        )
    return out


TIL_MEASURES = ("til_fraction", "lymphocyte_fraction", "tumor_fraction")


def til_report(
    attention: Mapping[str, AttentionMap],
    counts: Mapping[str, Mapping[int, PatchCellCounts]],
    table: RiskTable,
    frac: float = DEFAULT_TOP_FRAC,
) -> tuple[pd.DataFrame, dict]:
    """Per-patient TIL and cell fractions over top-attention patches, and
    Welch t-tests between the quartile risk groups

    Returns:
        The per-patient table and a JSON-ready summary
    """
    in_table = set(table.patient_ids)
    common = sorted(set(attention) & set(counts) & in_table)
    mismatches = {
        "attention_only": len(set(attention) - set(common)),
        "cellcounts_only": len(set(counts) - set(common)),
        "risk_table_only": len(in_table - set(common)),
    }
    if any(mismatches.values()):
        logger.warning("Patient id mismatches between inputs: %s", mismatches)
    if not common:
        raise DataError("No patient is present in attention, cell counts and risks")

    rows = []
    missing_patches = 0
    for pid in common:
        top = top_attention_patches(attention[pid], frac)
        patches = [counts[pid][i] for i in top if i in counts[pid]]
        missing_patches += len(top) - len(patches)
        if not patches:
            continue
        lym, tum = cell_fractions(patches)
        rows.append((pid, len(patches), til_fraction(patches), lym, tum))
    if missing_patches:
        logger.warning(
            "%s top-attention patch(es) have no cell counts", missing_patches
        )

    frame = pd.DataFrame(
        rows, columns=["patient_id", "n_patches", *TIL_MEASURES]
    )
    position = {pid: i for i, pid in enumerate(table.patient_ids)}
    sub = table.take([position[pid] for pid in frame["patient_id"]])
    frame["risk"] = sub.risk
    frame["group"] = risk_groups(sub, "quartile") if len(sub) else []

    tests = {}
    low, high = frame[frame.group == "low"], frame[frame.group == "high"]
    for measure in TIL_MEASURES:
        try:
            t, p = two_sample_t(low[measure], high[measure])
            tests[measure] = {"t": t, "p": p}
        except DataError as exc:
            tests[measure] = {"t": None, "p": None, "error": str(exc)}

    summary = {
        "thresholds": {
            "min_cells": TIL_MIN_CELLS,
            "min_lymphocytes": TIL_MIN_LYMPHOCYTES,
            "min_tumor": TIL_MIN_TUMOR,
            "strict": True,
        },
        "top_frac": frac,
        "patients": len(frame),
        "group_sizes": {"low": len(low), "high": len(high)},
        "mismatches": mismatches,
        "tests": tests,
    }
    return frame, summary

"""Seeded synthetic cohorts with a controllable cross-modal interaction

Each patient draws two latent scalars, s_w carried by the first quarter of
the embedding coordinates of half the bag's patches and s_m carried by
half of the RNA-Seq block. The last embedding coordinate flags the
carrying patches. The true log-hazard is w_wsi s_w + w_mol s_m +
w_inter s_w s_m, so with only the interaction weight set neither modality
alone ranks patients.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from .data_io import Cohort, FeatureMeta, PatientRecord
from .defaults import CELLCOUNT_COLUMNS, logger
from .errors import ParameterError, PreconditionError
from .survival import SurvivalLabel
from .tensor import Tensor

INFORMATIVE_FRAC = 0.5
MUTATION_RATE = 0.2
# months per unit of the exponential time scale
TIME_SCALE = 24.0
PATCH_STRIDE = 256
TRUTH_COLUMNS = ["patient_id", "s_wsi", "s_mol", "log_hazard"]


class EffectWeights(NamedTuple):
    w_wsi: float = 0.0
    w_mol: float = 0.0
    w_inter: float = 1.5


def _calibrate_censoring(rates: np.ndarray, censor_frac: float) -> float:
    """Censoring rate c with mean(c / (c + rate)) = censor_frac"""

    def gap(log_c: float) -> float:
        c = np.exp(log_c)
        return float(np.mean(c / (c + rates))) - censor_frac

    return float(np.exp(brentq(gap, -30.0, 30.0, xtol=1e-12)))


def _molecular_layout(p: int) -> list[FeatureMeta]:
    n_cnv = n_mut = p // 4
    n_rna = p - n_cnv - n_mut
    return (
        [FeatureMeta(f"rnaseq_{i:04d}", "rnaseq") for i in range(n_rna)]
        + [FeatureMeta(f"cnv_{i:04d}", "cnv") for i in range(n_cnv)]
        + [FeatureMeta(f"mutation_{i:04d}", "mutation") for i in range(n_mut)]
    )


def _n_signal_coords(d: int) -> int:
    """Embedding coordinates carrying s_w, leaving the last one free"""
    return max(1, min(d // 4, d - 1))


def _bag(
    rng: np.random.Generator,
    s_w: float,
    bag_size: int,
    d: int,
) -> tuple[np.ndarray, tuple, np.ndarray]:
    """Rows ordered by (slide, x, y), the order the loader sorts into"""
    informative = rng.random(bag_size) < INFORMATIVE_FRAC
    informative[rng.integers(bag_size)] = True
    bag = rng.normal(0.0, 1.0, size=(bag_size, d))
    k = _n_signal_coords(d)
    carried = s_w + 0.1 * rng.normal(size=(bag_size, k))
    bag[:, :k] = np.where(informative[:, None], carried, bag[:, :k])
    bag[:, -1] = informative + 0.1 * rng.normal(size=bag_size)

    n_slides = 2 if bag_size > 1 and rng.random() < 0.3 else 1
    slide = rng.integers(n_slides, size=bag_size)
    grid = int(np.ceil(np.sqrt(bag_size))) * 2
    cells = rng.choice(grid * grid, size=bag_size, replace=False)
    x = (cells % grid) * PATCH_STRIDE
    y = (cells // grid) * PATCH_STRIDE

    order = np.lexsort((y, x, slide))
    slides = tuple(f"S{s}" for s in slide[order])
    coords = np.column_stack([x[order], y[order]]).astype(np.float64)
    return bag[order], slides, coords


def gen_synthetic(
    n_patients: int,
    bag_size: int,
    d: int,
    p: int,
    effect_weights: EffectWeights | tuple = EffectWeights(),
    censor_frac: float = 0.4,
    seed: int = 0,
) -> Cohort:
    """Draw a cohort; every draw comes from one stream seeded with `seed`

    The returned cohort carries the latent truth (`cohort.truth`).
    """
    w_wsi, w_mol, w_inter = (float(w) for w in effect_weights)
    if n_patients < 20:
        raise ParameterError(f"n_patients must be >= 20, got {n_patients}")
    if bag_size < 1:
        raise ParameterError(f"bag_size must be >= 1, got {bag_size}")
    if d < 2:
        raise ParameterError(f"d must be >= 2, got {d}")
    if p < 4:
        raise ParameterError(f"p must be >= 4, got {p}")
    if not np.all(np.isfinite([w_wsi, w_mol, w_inter])):
        raise ParameterError("Effect weights must be finite")
    if not 0.0 <= censor_frac < 1.0:
        raise ParameterError(f"censor_frac must be in [0, 1), got {censor_frac}")

    rng = np.random.default_rng(seed)
    s_w = rng.normal(size=n_patients)
    s_m = rng.normal(size=n_patients)
    log_hazard = w_wsi * s_w + w_mol * s_m + w_inter * s_w * s_m
    rates = np.exp(log_hazard)

    event_t = rng.exponential(1.0 / rates)
    if censor_frac > 0:
        censor_rate = _calibrate_censoring(rates, censor_frac)
        censor_t = rng.exponential(1.0 / censor_rate, size=n_patients)
    else:
        censor_t = np.full(n_patients, np.inf)
    censored = (censor_t < event_t).astype(int)
    t_cont = np.minimum(event_t, censor_t) * TIME_SCALE

    features = _molecular_layout(p)
    kinds = np.array([f.kind for f in features])
    n_rna = int(np.sum(kinds == "rnaseq"))
    n_signal = max(1, n_rna // 2)
    molecular = np.empty((n_patients, p))
    molecular[:, :n_rna] = rng.normal(size=(n_patients, n_rna))
    molecular[:, :n_signal] = s_m[:, None] + 0.5 * rng.normal(
        size=(n_patients, n_signal)
    )
    cnv = kinds == "cnv"
    molecular[:, cnv] = np.clip(
        np.round(rng.normal(size=(n_patients, cnv.sum()))), -2, 2
    )
    mut = kinds == "mutation"
    molecular[:, mut] = rng.random((n_patients, mut.sum())) < MUTATION_RATE

    width = max(4, len(str(n_patients - 1)))
    ids = [f"P{i:0{width}d}" for i in range(n_patients)]
    patients = []
    for i, pid in enumerate(ids):
        bag, slides, coords = _bag(rng, s_w[i], bag_size, d)
        patients.append(
            PatientRecord(
                patient_id=pid,
                bag=Tensor(bag),
                molecular=Tensor(molecular[i]),
                label=SurvivalLabel(float(t_cont[i]), int(censored[i])),
                slide_ids=slides,
                patch_coords=coords,
            )
        )

    truth = pd.DataFrame(
        {
            "patient_id": ids,
            "s_wsi": s_w,
            "s_mol": s_m,
            "log_hazard": log_hazard,
        }
    )
    logger.info(
        "[bold][yellow]SYNTH[/yellow][/bold] %s patients, %.1f%% censored, "
        "weights (wsi=%s, mol=%s, inter=%s)",
        n_patients,
        100.0 * censored.mean(),
        w_wsi,
        w_mol,
        w_inter,
    )
    return Cohort(tuple(patients), tuple(features), truth)


def gen_cell_counts(cohort: Cohort, seed: int = 0) -> pd.DataFrame:
    """Per-patch cell counts in which informative patches of low-risk
    patients hold more lymphocytes

    Patch ids are row positions in the patient's bag.
    """
    if cohort.truth is None:
        raise PreconditionError("Cell counts need a synthetic cohort with truth")
    truth = cohort.truth.set_index("patient_id")["log_hazard"]
    rng = np.random.default_rng(seed)

    rows = []
    for patient in cohort.patients:
        m = patient.bag_size
        informative = patient.bag.values[:, -1] > 0.5
        share = 0.05 + 0.6 * informative * expit(-2.0 * truth[patient.patient_id])
        total = rng.poisson(30, size=m)
        tumor = rng.binomial(total, 0.3)
        lymphocytes = rng.binomial(total - tumor, share)
        for patch in range(m):
            rows.append(
                (
                    patient.patient_id,
                    patch,
                    int(total[patch]),
                    int(lymphocytes[patch]),
                    int(tumor[patch]),
                )
            )
    return pd.DataFrame(rows, columns=CELLCOUNT_COLUMNS)

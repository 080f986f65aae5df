"""Adam with L1/L2 penalties, the batch-size-1 loop and cross-validation"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .config import MODEL_KINDS, RunConfig, TrainConfig
from .data_io import Cohort, PatientRecord, Standardizer, standardize_molecular
from .defaults import logger
from .errors import ConfigError, DataError, DimensionError
from .models import Model, build_model, patient_hazards, risk_score
from .stats import RiskTable, c_index
from .survival import TimeBins, combined_loss, make_bins
from .tensor import Tape, Tensor


@dataclass
class AdamState:
    """Flat first/second moment buffers over all parameters, and the step count"""

    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shapes: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> AdamState:
        size = sum(p.size for p in params)
        return cls(np.zeros(size), np.zeros(size), [p.shape for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """One bias-corrected Adam update, in place

    The penalties enter the gradient: g' = g + l2 w + l1 sign(w).
    """
    if len(params) != len(grads) or len(params) != len(state.shapes):
        raise DimensionError(
            f"{len(params)} parameters, {len(grads)} gradients and "
            f"{len(state.shapes)} moment buffers"
        )
    for param, grad, shape in zip(params, grads, state.shapes):
        if grad.shape != param.shape or param.shape != shape:
            raise DimensionError(
                f"Gradient shape {grad.shape} != parameter shape {param.shape}"
            )
    if not params:
        return
    state.t += 1
    correct1 = 1.0 - cfg.beta1 ** state.t
    correct2 = 1.0 - cfg.beta2 ** state.t

    w = np.concatenate([p.values.reshape(-1) for p in params])
    g = np.concatenate([grad.reshape(-1) for grad in grads])
    g += cfg.l2 * w + cfg.l1 * np.sign(w)
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * g
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * g * g
    step = cfg.lr * (state.m / correct1) / (np.sqrt(state.v / correct2) + cfg.adam_eps)

    offset = 0
    for param in params:
        n = param.size
        param.values -= step[offset : offset + n].reshape(param.shape)
        offset += n


@dataclass
class TrainResult:
    model: Model
    loss_trace: list = field(default_factory=list)
    bins: TimeBins | None = None


def train(
    model: Model,
    patients: Sequence[PatientRecord],
    bins: TimeBins,
    cfg: TrainConfig,
) -> TrainResult:
    """Fit `model` in place, one patient per step

    The visiting order of every epoch and the dropout masks come from two
    streams spawned from `cfg.seed`. With `grad_accum` > 1 the gradients
    of that many consecutive patients are averaged before an update.

    Returns:
        The model with the mean loss of every epoch
    """
    if not patients:
        raise DataError("Cannot train on an empty cohort")
    patients = [patient.with_bins(bins) for patient in patients]
    params = model.parameters()
    state = AdamState.for_params(params)
    order_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
    )

    trace = []
    for epoch in range(cfg.epochs):
        losses = []
        accum = [np.zeros_like(p.values) for p in params]
        pending = 0
        for idx in order_rng.permutation(len(patients)):
            patient = patients[idx]
            for param in params:
                param.zero_grad()
            with Tape() as tape:
                hazards = patient_hazards(model, patient, True, dropout_rng)
                loss = combined_loss(hazards, patient.label, cfg.beta_loss)
                tape.backward(loss)
            losses.append(loss.item())
            if cfg.grad_accum == 1:
                adam_step(params, [param.grad for param in params], state, cfg)
                continue
            for buf, param in zip(accum, params):
                buf += param.grad
            pending += 1
            if pending == cfg.grad_accum:
                adam_step(params, [buf / pending for buf in accum], state, cfg)
                for buf in accum:
                    buf[...] = 0.0
                pending = 0
        if pending:
            adam_step(params, [buf / pending for buf in accum], state, cfg)

        trace.append(float(np.mean(losses)))
        logger.debug(
            "[bold][yellow]TRAIN[/yellow][/bold] Epoch %s/%s: loss %.6f",
            epoch + 1,
            cfg.epochs,
            trace[-1],
        )
    return TrainResult(model, trace, bins)


def predict_risks(model: Model, patients: Sequence[PatientRecord]) -> list[float]:
    """Inference-mode risk scores, dropout off"""
    return [risk_score(patient_hazards(model, patient)) for patient in patients]


def risk_table(
    model: Model,
    patients: Sequence[PatientRecord],
    fold: int | None = None,
) -> RiskTable:
    return RiskTable(
        tuple(p.patient_id for p in patients),
        predict_risks(model, patients),
        [p.label.t_cont for p in patients],
        [p.label.censored for p in patients],
        None if fold is None else [fold] * len(patients),
    )


# Cross-validation
@dataclass
class FoldSplit:
    """Validation fold of every patient and the index lists of each fold"""

    assignments: dict
    folds: list

    @property
    def n_folds(self) -> int:
        return len(self.folds)


def make_folds(cohort: Cohort, n_folds: int, seed: int) -> FoldSplit:
    """Folds stratified by censorship"""
    censored = np.array([lab.censored for lab in cohort.labels()])
    events = int(np.sum(censored == 0))
    if events < n_folds:
        raise DataError(
            f"Cannot stratify {n_folds} folds with {events} uncensored patient(s)"
        )
    if len(cohort) - events < n_folds:
        logger.warning(
            "Only %s censored patient(s) for %s folds",
            len(cohort) - events,
            n_folds,
        )

    splitter = StratifiedKFold(
        n_splits=n_folds,
        shuffle=True,
        random_state=seed % 2**32,
    )
    folds = []
    assignments = {}
    for k, (train_idx, val_idx) in enumerate(
        splitter.split(np.zeros(len(cohort)), censored)
    ):
        folds.append((train_idx.tolist(), val_idx.tolist()))
        for i in val_idx:
            assignments[cohort.patients[i].patient_id] = k
    return FoldSplit(assignments, folds)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def prepare_fold(
    cohort: Cohort,
    train_idx: Sequence[int],
    standardize: bool,
) -> tuple[Cohort, Standardizer | None]:
    """Standardize with training-row statistics when asked to"""
    if not standardize or cohort.p == 0:
        return cohort, None
    matrix, standardizer = standardize_molecular(
        cohort.molecular_matrix(), cohort.feature_kinds, train_idx
    )
    return cohort.with_molecular(matrix), standardizer


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_val: int
    c_index: float
    bins: TimeBins
    loss_trace: list


@dataclass
class CvResult:
    kind: str
    folds: list
    predictions: RiskTable

    @property
    def c_index_mean(self) -> float:
        return float(np.mean([f.c_index for f in self.folds]))

    @property
    def c_index_pooled(self) -> float:
        return c_index(self.predictions)


def cross_validate(cohort: Cohort, config: RunConfig, kind: str) -> CvResult:
    """k-fold CV: per fold, bins and standardization from the training rows,
    training, then risks on the validation rows"""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"Unknown model kind {kind!r}, expected one of {MODEL_KINDS}")
    seed = config.train.seed
    split = make_folds(cohort, config.eval.n_folds, seed)

    results, tables = [], []
    for k, (train_idx, val_idx) in enumerate(split.folds):
        fold_cohort, _ = prepare_fold(cohort, train_idx, config.data.standardize)
        train_patients = [fold_cohort.patients[i] for i in train_idx]
        val_patients = [fold_cohort.patients[i] for i in val_idx]
        bins = make_bins([p.label for p in train_patients])

        seed_k = fold_seed(seed, k)
        model = build_model(kind, cohort.d, cohort.p, config.model, seed_k)
        fold_cfg = TrainConfig(**{**vars(config.train), "seed": seed_k})
        fitted = train(model, train_patients, bins, fold_cfg)

        table = risk_table(fitted.model, val_patients, fold=k)
        cindex = c_index(table)
        logger.info(
            "[bold][yellow]CV[/yellow][/bold] %s fold %s: c-index %.4f "
            "(train %s, validation %s)",
            kind.upper(),
            k,
            cindex,
            len(train_patients),
            len(val_patients),
        )
        results.append(
            FoldResult(
                k, len(train_patients), len(val_patients), cindex, bins,
                fitted.loss_trace,
            )
        )
        tables.append(table)

    # pooled rows in cohort order
    pooled = RiskTable.concat(tables)
    position = {pid: i for i, pid in enumerate(pooled.patient_ids)}
    pooled = pooled.take([position[pid] for pid in cohort.ids])
    return CvResult(kind, results, pooled)

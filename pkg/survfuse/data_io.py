"""Cohort ingestion, modality alignment and molecular feature preparation"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .defaults import (
    BAG_MAGIC,
    BAG_VERSION,
    EMBEDDING_KEYS,
    LABEL_COLUMNS,
    META_COLUMNS,
    MOLECULAR_KINDS,
    SCALE_FLOOR,
    logger,
)
from .errors import DataError, DimensionError
from .survival import SurvivalLabel, TimeBins
from .tensor import Tensor


@dataclass(frozen=True)
class FeatureMeta:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in MOLECULAR_KINDS:
            raise DataError(
                f"Feature {self.name!r} has kind {self.kind!r}, "
                f"expected one of {MOLECULAR_KINDS}"
            )


@dataclass(frozen=True, eq=False)
class PatientRecord:
    """One patient: the bag of patch embeddings [M x d], the molecular
    vector [p] and the survival label"""

    patient_id: str
    bag: Tensor
    molecular: Tensor
    label: SurvivalLabel
    slide_ids: tuple = ()
    patch_coords: np.ndarray | None = None

    def __post_init__(self):
        if self.bag.ndim != 2 or self.bag.shape[0] < 1:
            raise DataError(
                f"Patient {self.patient_id}: bag must be a non-empty matrix, "
                f"got {self.bag.shape}"
            )
        if self.molecular.ndim != 1:
            raise DataError(f"Patient {self.patient_id}: molecular must be a vector")

    @property
    def bag_size(self) -> int:
        return self.bag.shape[0]

    def with_bins(self, bins: TimeBins) -> PatientRecord:
        return replace(self, label=self.label.with_bins(bins))


@dataclass(frozen=True, eq=False)
class Cohort:
    patients: tuple
    features: tuple
    truth: pd.DataFrame | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise DataError("Patient ids must be unique within a cohort")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("Feature names must be unique")
        for patient in self.patients:
            if patient.bag.shape[1] != self.d:
                raise DataError(
                    f"Patient {patient.patient_id}: embedding dim "
                    f"{patient.bag.shape[1]} != {self.d}"
                )
            if patient.molecular.shape[0] != self.p:
                raise DataError(
                    f"Patient {patient.patient_id}: molecular dim "
                    f"{patient.molecular.shape[0]} != {self.p}"
                )

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def d(self) -> int:
        return self.patients[0].bag.shape[1] if self.patients else 0

    @property
    def p(self) -> int:
        return len(self.features)

    @property
    def ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def feature_kinds(self) -> list[str]:
        return [f.kind for f in self.features]

    def labels(self) -> list[SurvivalLabel]:
        return [p.label for p in self.patients]

    def molecular_matrix(self) -> np.ndarray:
        if not self.patients:
            return np.zeros((0, self.p))
        return np.stack([p.molecular.values for p in self.patients])

    def with_molecular(self, matrix: np.ndarray) -> Cohort:
        if matrix.shape != (len(self), self.p):
            raise DimensionError(
                f"Molecular matrix must be {(len(self), self.p)}, got {matrix.shape}"
            )
        patients = tuple(
            replace(p, molecular=Tensor(row))
            for p, row in zip(self.patients, matrix)
        )
        return replace(self, patients=patients)

    def select_features(self, names: Sequence[str]) -> Cohort:
        """Reorder/restrict molecular columns to `names`, e.g. a model's"""
        index = {name: i for i, name in enumerate(self.feature_names)}
        missing = [name for name in names if name not in index]
        if missing:
            shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
            raise DataError(f"{len(missing)} model feature(s) missing: {shown}")
        cols = [index[name] for name in names]
        matrix = self.molecular_matrix()[:, cols]
        patients = tuple(
            replace(p, molecular=Tensor(row))
            for p, row in zip(self.patients, matrix)
        )
        features = tuple(self.features[i] for i in cols)
        return replace(self, patients=patients, features=features)

    def subset(self, indices: Sequence[int]) -> Cohort:
        return replace(self, patients=tuple(self.patients[i] for i in indices))

    def patient(self, patient_id: str) -> PatientRecord:
        for patient in self.patients:
            if patient.patient_id == patient_id:
                return patient
        raise DataError(f"Unknown patient id {patient_id!r}")


# Reading
def _read_csv(path: str | Path, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError("File not found", path=str(path))
    try:
        df = pd.read_csv(path, dtype={"patient_id": str, "slide_id": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"Cannot parse CSV: {exc}", path=str(path)) from None
    missing = [col for col in required if col not in df.columns]
    if missing:
        raise DataError(f"Missing columns {missing}", path=str(path), line=1)
    return df


def _numeric(df: pd.DataFrame, columns: Sequence[str], path) -> np.ndarray:
    """Columns as float64, failing on the first non-numeric or missing cell"""
    values = df[list(columns)].apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.argmax(bad))
        raise DataError(
            "Non-numeric or missing value",
            path=str(path),
            line=row + 2,
        )
    return values.to_numpy(dtype=np.float64)


def _check_duplicates(df: pd.DataFrame, keys: Sequence[str], path) -> None:
    dups = df.duplicated(subset=list(keys)).to_numpy()
    if dups.any():
        row = int(np.argmax(dups))
        key = tuple(df.iloc[row][list(keys)])
        raise DataError(f"Duplicate key {key}", path=str(path), line=row + 2)


def read_embeddings(path: str | Path) -> dict[str, tuple]:
    """Bags by patient id, each as (bag, slide_ids, coords)

    Rows are sorted by (patient_id, slide_id, patch_x, patch_y) before the
    bags are assembled; all slides of a patient form one bag.
    """
    df = _read_csv(path, EMBEDDING_KEYS)
    feats = list(df.columns[len(EMBEDDING_KEYS):])
    expected = [f"f{i}" for i in range(len(feats))]
    if not feats or feats != expected:
        raise DataError(
            f"Embedding columns must be f0..f{{d-1}} after {EMBEDDING_KEYS}",
            path=str(path),
            line=1,
        )
    values = _numeric(df, feats + ["patch_x", "patch_y"], path)
    missing_ids = df[["patient_id", "slide_id"]].isna().any(axis=1).to_numpy()
    if missing_ids.any():
        row = int(np.argmax(missing_ids))
        raise DataError("Missing patient or slide id", path=str(path), line=row + 2)
    _check_duplicates(df, EMBEDDING_KEYS, path)

    frame = pd.DataFrame(
        values,
        columns=feats + ["patch_x", "patch_y"],
    )
    frame.insert(0, "slide_id", df["slide_id"].to_numpy())
    frame.insert(0, "patient_id", df["patient_id"].to_numpy())
    frame = frame.sort_values(EMBEDDING_KEYS, kind="mergesort")

    out = {}
    for pid, group in frame.groupby("patient_id", sort=True):
        out[pid] = (
            group[feats].to_numpy(dtype=np.float64),
            tuple(group["slide_id"]),
            group[["patch_x", "patch_y"]].to_numpy(dtype=np.float64),
        )
    logger.debug(
        "Read %s patch rows for %s patients from %s", len(frame), len(out), path
    )
    return out


def read_meta(path: str | Path) -> list[FeatureMeta]:
    df = _read_csv(path, META_COLUMNS)
    _check_duplicates(df, ["feature"], path)
    out = []
    for i, (name, kind) in enumerate(zip(df["feature"], df["kind"])):
        try:
            out.append(FeatureMeta(str(name), str(kind)))
        except DataError as exc:
            raise DataError(exc.msg, path=str(path), line=i + 2) from None
    return out


def read_molecular(
    path: str | Path,
    meta: Sequence[FeatureMeta],
) -> dict[str, np.ndarray]:
    df = _read_csv(path, ["patient_id"])
    columns = list(df.columns[1:])
    names = [f.name for f in meta]
    if set(columns) != set(names) or len(columns) != len(names):
        extra = sorted(set(columns) - set(names))
        missing = sorted(set(names) - set(columns))
        raise DataError(
            f"Molecular columns do not match the feature meta "
            f"(no meta for: {extra}; not in matrix: {missing})",
            path=str(path),
            line=1,
        )
    _check_duplicates(df, ["patient_id"], path)
    # Missing modalities are not supported, so NaN is an error here
    values = _numeric(df, names, path)
    return dict(zip(df["patient_id"], values))


def read_labels(path: str | Path) -> dict[str, SurvivalLabel]:
    df = _read_csv(path, LABEL_COLUMNS)
    _check_duplicates(df, ["patient_id"], path)
    values = _numeric(df, ["time_months", "censored"], path)
    out = {}
    for i, (pid, (time, cens)) in enumerate(zip(df["patient_id"], values)):
        if cens not in (0.0, 1.0):
            raise DataError(
                f"censored must be 0 or 1, got {cens}",
                path=str(path),
                line=i + 2,
            )
        try:
            out[pid] = SurvivalLabel(float(time), int(cens))
        except DataError as exc:
            raise DataError(exc.msg, path=str(path), line=i + 2) from None
    return out


def _report_excluded(table: str, ids: set, kept: set) -> None:
    excluded = sorted(ids - kept)
    if excluded:
        shown = ", ".join(excluded[:5]) + (" ..." if len(excluded) > 5 else "")
        logger.warning(
            "Excluding %s patient(s) only present in %s: %s",
            len(excluded),
            table,
            shown,
        )


def load_cohort(
    embeddings_path: str | Path,
    molecular_path: str | Path,
    labels_path: str | Path,
    meta_path: str | Path,
) -> Cohort:
    """Assemble patients present in all of embeddings, molecular and labels"""
    meta = read_meta(meta_path)
    bags = read_embeddings(embeddings_path)
    molecular = read_molecular(molecular_path, meta)
    labels = read_labels(labels_path)

    kept = set(bags) & set(molecular) & set(labels)
    _report_excluded("embeddings", set(bags), kept)
    _report_excluded("molecular", set(molecular), kept)
    _report_excluded("labels", set(labels), kept)
    if not kept:
        raise DataError(
            "No patient is present in all of embeddings, molecular and labels"
        )

    patients = []
    for pid in sorted(kept):
        bag, slides, coords = bags[pid]
        patients.append(
            PatientRecord(
                patient_id=pid,
                bag=Tensor(bag),
                molecular=Tensor(molecular[pid]),
                label=labels[pid],
                slide_ids=slides,
                patch_coords=coords,
            )
        )
    logger.info(
        "[bold][yellow]DATA[/yellow][/bold] Loaded %s patients "
        "(%s patch rows, d=%s, p=%s)",
        len(patients),
        sum(p.bag_size for p in patients),
        patients[0].bag.shape[1],
        len(meta),
    )
    return Cohort(tuple(patients), tuple(meta))


def load_cohort_dir(datadir: str | Path, data_config) -> Cohort:
    """load_cohort with file names from a DataConfig"""
    datadir = Path(datadir)
    return load_cohort(
        datadir / data_config.embeddings,
        datadir / data_config.molecular,
        datadir / data_config.labels,
        datadir / data_config.meta,
    )


# Writing
def write_cohort(cohort: Cohort, outdir: str | Path) -> dict[str, Path]:
    """Write the canonical CSVs, floats with full precision"""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    fmt = "%.17g"
    feats = [f"f{i}" for i in range(cohort.d)]

    rows = []
    for patient in cohort.patients:
        frame = pd.DataFrame(patient.bag.values, columns=feats)
        coords = (
            patient.patch_coords
            if patient.patch_coords is not None
            else np.column_stack(
                [np.arange(patient.bag_size), np.zeros(patient.bag_size)]
            )
        )
        slides = patient.slide_ids or ("S0",) * patient.bag_size
        frame.insert(0, "patch_y", coords[:, 1])
        frame.insert(0, "patch_x", coords[:, 0])
        frame.insert(0, "slide_id", list(slides))
        frame.insert(0, "patient_id", patient.patient_id)
        rows.append(frame)

    paths = {
        "embeddings": outdir / "embeddings.csv",
        "molecular": outdir / "molecular.csv",
        "labels": outdir / "labels.csv",
        "meta": outdir / "meta.csv",
    }
    pd.concat(rows, ignore_index=True).to_csv(
        paths["embeddings"], index=False, float_format=fmt
    )

    molecular = pd.DataFrame(cohort.molecular_matrix(), columns=cohort.feature_names)
    molecular.insert(0, "patient_id", cohort.ids)
    molecular.to_csv(paths["molecular"], index=False, float_format=fmt)

    pd.DataFrame(
        {
            "patient_id": cohort.ids,
            "time_months": [lab.t_cont for lab in cohort.labels()],
            "censored": [lab.censored for lab in cohort.labels()],
        }
    ).to_csv(paths["labels"], index=False, float_format=fmt)

    pd.DataFrame(
        {"feature": cohort.feature_names, "kind": cohort.feature_kinds}
    ).to_csv(paths["meta"], index=False)
    return paths


def write_bags_binary(path: str | Path, bags: Mapping[str, np.ndarray]) -> None:
    """Compact container: magic, version, count, then per bag
    id length, id, M, d and little-endian float64 values"""
    with open(path, "wb") as fh:
        fh.write(BAG_MAGIC)
        fh.write(struct.pack("<HI", BAG_VERSION, len(bags)))
        for pid, bag in bags.items():
            bag = np.asarray(bag, dtype="<f8")
            if bag.ndim != 2:
                raise DimensionError(f"Bag of {pid} must be a matrix, got {bag.shape}")
            key = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<II", *bag.shape))
            fh.write(np.ascontiguousarray(bag).tobytes())


def read_bags_binary(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(BAG_MAGIC):
        raise DataError("Not a bag container (bad magic bytes)", path=str(path))
    offset = len(BAG_MAGIC)
    try:
        version, count = struct.unpack_from("<HI", data, offset)
        offset += struct.calcsize("<HI")
        if version != BAG_VERSION:
            raise DataError(f"Unsupported container version {version}", path=str(path))
        out = {}
        for _ in range(count):
            (keylen,) = struct.unpack_from("<I", data, offset)
            offset += 4
            pid = data[offset:offset + keylen].decode("utf-8")
            offset += keylen
            m, d = struct.unpack_from("<II", data, offset)
            offset += 8
            nbytes = m * d * 8
            if offset + nbytes > len(data):
                raise DataError("Truncated bag container", path=str(path))
            out[pid] = np.frombuffer(
                data, dtype="<f8", count=m * d, offset=offset
            ).reshape(m, d).astype(np.float64)
            offset += nbytes
    except struct.error:
        raise DataError("Truncated bag container", path=str(path)) from None
    return out


# Molecular preparation
def median_abs_deviation(values: np.ndarray) -> np.ndarray:
    """Column-wise median absolute deviation"""
    med = np.median(values, axis=0)
    return np.median(np.abs(values - med), axis=0)


def filter_genes(
    matrix: pd.DataFrame,
    meta: pd.DataFrame,
    freq_threshold: float = 0.05,
    rna_top_k: int = 2000,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Keep mutation/CNV columns altered in more than `freq_threshold` of
    patients and the `rna_top_k` RNA-Seq columns with the largest MAD

    Args:
        matrix: Patients x features
        meta: With columns `feature` and `kind`, one row per matrix column

    Returns:
        The reduced matrix and meta, in the original column order
    """
    if list(matrix.columns) != list(meta["feature"]):
        raise DimensionError("Matrix columns must match meta features in order")

    kinds = dict(zip(meta["feature"], meta["kind"]))
    keep = set()
    for col in matrix.columns:
        if kinds[col] in ("mutation", "cnv"):
            if (matrix[col].to_numpy() != 0).mean() > freq_threshold:
                keep.add(col)

    rna = [col for col in matrix.columns if kinds[col] == "rnaseq"]
    if rna and rna_top_k > 0:
        mads = median_abs_deviation(matrix[rna].to_numpy(dtype=np.float64))
        ranked = sorted(zip(rna, mads), key=lambda item: (-item[1], item[0]))
        keep.update(name for name, _ in ranked[:rna_top_k])

    columns = [col for col in matrix.columns if col in keep]
    if not columns:
        logger.warning("Gene filtering removed every molecular feature")
    reduced_meta = meta[meta["feature"].isin(keep)].reset_index(drop=True)
    return matrix[columns], reduced_meta


@dataclass(frozen=True)
class Standardizer:
    """Training-split column statistics; mutation columns pass through"""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        return (np.asarray(matrix, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping) -> Standardizer:
        return cls(np.asarray(data["mean"]), np.asarray(data["scale"]))


def standardize_molecular(
    matrix: np.ndarray,
    kinds: Sequence[str],
    train_indices: Sequence[int],
) -> tuple[np.ndarray, Standardizer]:
    """z-score rnaseq/cnv columns with statistics of the training rows"""
    matrix = np.asarray(matrix, dtype=np.float64)
    train_indices = np.asarray(train_indices, dtype=int)
    if train_indices.size == 0:
        raise DataError("Standardization needs at least one training row")
    if matrix.shape[1] != len(kinds):
        raise DimensionError(
            f"{matrix.shape[1]} columns but {len(kinds)} feature kinds"
        )

    train = matrix[train_indices]
    continuous = np.array([kind != "mutation" for kind in kinds])
    mean = np.where(continuous, train.mean(axis=0), 0.0)
    scale = np.where(
        continuous,
        np.maximum(train.std(axis=0), SCALE_FLOOR),
        1.0,
    )
    standardizer = Standardizer(mean, scale)
    return standardizer.apply(matrix), standardizer


def filter_cohort_genes(
    cohort: Cohort,
    freq_threshold: float = 0.05,
    rna_top_k: int = 2000,
) -> Cohort:
    """filter_genes applied to a loaded cohort

    The rules use no label, so filtering the whole cohort before splitting
    leaks nothing.
    """
    matrix = pd.DataFrame(cohort.molecular_matrix(), columns=cohort.feature_names)
    meta = pd.DataFrame(
        {"feature": cohort.feature_names, "kind": cohort.feature_kinds}
    )
    reduced, reduced_meta = filter_genes(matrix, meta, freq_threshold, rna_top_k)
    logger.info(
        "[bold][yellow]DATA[/yellow][/bold] Gene filtering kept %s of %s features",
        reduced.shape[1],
        matrix.shape[1],
    )
    values = reduced.to_numpy(dtype=np.float64)
    patients = tuple(
        replace(p, molecular=Tensor(row)) for p, row in zip(cohort.patients, values)
    )
    features = tuple(
        FeatureMeta(name, kind)
        for name, kind in zip(reduced_meta["feature"], reduced_meta["kind"])
    )
    return replace(cohort, patients=patients, features=features)

"""AMIL (slides), SNN (molecular) and MMF (fusion) survival networks"""

from __future__ import annotations

import json
from dataclasses import asdict
from typing import Any, Mapping, NamedTuple, Union

import numpy as np
from panpath import PanPath

from . import tensor as T
from .config import MODEL_KINDS, ModelConfig
from .defaults import CHECKPOINT_FORMAT, CHECKPOINT_VERSION, N_BINS
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    PreconditionError,
)
from .layers import (
    GatedAttention,
    LinearLayer,
    ModalityGate,
    Module,
    alpha_dropout,
    attention_pool,
    kron_fusion,
    selu,
)
from .survival import hazard_to_survival
from .tensor import Tensor


class AmilOutput(NamedTuple):
    hazards: Tensor
    h_wsi: Tensor
    attention: Tensor


class SnnOutput(NamedTuple):
    hazards: Tensor
    h_mol: Tensor


class MmfOutput(NamedTuple):
    hazards: Tensor
    h_wsi: Tensor
    h_mol: Tensor
    attention: Tensor


class AmilModel(Module):
    """Projection, gated attention pooling and a sigmoid hazard head

    The hazard head reads the pooled [proj_dim] bag representation; the
    [rep_dim] representation is only used by the fusion model.
    """

    kind = "amil"

    def __init__(self, d_in: int, config: ModelConfig, rng: np.random.Generator):
        self.d_in = d_in
        self.config = config
        self.projection = LinearLayer(d_in, config.proj_dim, rng)
        self.attention = GatedAttention(config.proj_dim, config.attn_dim, rng)
        self.rep_head = LinearLayer(config.proj_dim, config.rep_dim, rng)
        self.hazard_head = LinearLayer(
            config.proj_dim, config.n_bins, rng, init_scheme="lecun_normal"
        )

    def encode(self, bag: Tensor) -> tuple[Tensor, Tensor]:
        """(pooled bag representation, attention scores)"""
        if bag.ndim != 2 or bag.shape[0] < 1:
            raise PreconditionError(f"AMIL needs a non-empty bag, got {bag.shape}")
        if bag.shape[1] != self.d_in:
            raise DimensionError(
                f"AMIL expects {self.d_in} embedding features, got {bag.shape[1]}"
            )
        projected = T.relu(self.projection(bag))
        attention = self.attention(projected)
        return attention_pool(attention, projected), attention

    def representation(self, h_bag: Tensor) -> Tensor:
        return T.relu(self.rep_head(h_bag))

    def forward(
        self,
        bag: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> AmilOutput:
        h_bag, attention = self.encode(bag)
        hazards = T.sigmoid(self.hazard_head(h_bag))
        return AmilOutput(hazards, self.representation(h_bag), attention)

    __call__ = forward


class SnnModel(Module):
    """Two SeLU + alpha-dropout hidden layers and a sigmoid hazard head"""

    kind = "snn"

    def __init__(self, p_in: int, config: ModelConfig, rng: np.random.Generator):
        self.p_in = p_in
        self.config = config
        self.hidden1 = LinearLayer(
            p_in, config.snn_hidden, rng, init_scheme="lecun_normal"
        )
        self.hidden2 = LinearLayer(
            config.snn_hidden, config.snn_hidden, rng, init_scheme="lecun_normal"
        )
        self.rep_head = LinearLayer(
            config.snn_hidden, config.rep_dim, rng, init_scheme="lecun_normal"
        )
        self.hazard_head = LinearLayer(
            config.snn_hidden, config.n_bins, rng, init_scheme="lecun_normal"
        )

    def encode(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        if x.shape != (self.p_in,):
            raise DimensionError(
                f"SNN expects {self.p_in} molecular features, got {x.shape}"
            )
        q = self.config.keep_prob
        hidden = alpha_dropout(selu(self.hidden1(x)), q, training, rng)
        return alpha_dropout(selu(self.hidden2(hidden)), q, training, rng)

    def representation(self, hidden: Tensor) -> Tensor:
        return selu(self.rep_head(hidden))

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> SnnOutput:
        hidden = self.encode(x, training, rng)
        hazards = T.sigmoid(self.hazard_head(hidden))
        return SnnOutput(hazards, self.representation(hidden))

    __call__ = forward


class MmfModel(Module):
    """Both branches, modality gating, Kronecker fusion and a two-layer head"""

    kind = "mmf"

    def __init__(
        self,
        d_in: int,
        p_in: int,
        config: ModelConfig,
        rng: np.random.Generator,
    ):
        self.d_in = d_in
        self.p_in = p_in
        self.config = config
        self.amil = AmilModel(d_in, config, rng)
        self.snn = SnnModel(p_in, config, rng)
        self.gate = ModalityGate(config.rep_dim, config.rep_dim, rng)
        fused = (config.rep_dim + 1) ** 2
        self.fusion1 = LinearLayer(fused, config.fusion_hidden, rng)
        self.fusion2 = LinearLayer(config.fusion_hidden, config.fusion_hidden, rng)
        self.hazard_head = LinearLayer(
            config.fusion_hidden, config.n_bins, rng, init_scheme="lecun_normal"
        )

    def named_parameters(self, prefix: str = ""):
        # the unimodal hazard heads take no part in the fused prediction
        unused = (f"{prefix}amil.hazard_head.", f"{prefix}snn.hazard_head.")
        for name, param in super().named_parameters(prefix):
            if not name.startswith(unused):
                yield name, param

    def fuse(self, h_wsi: Tensor, h_mol: Tensor) -> Tensor:
        """Hazards from the two penultimate representations"""
        wsi, mol = self.gate(h_wsi, h_mol)
        fused = kron_fusion(wsi, mol)
        hidden = T.relu(self.fusion2(T.relu(self.fusion1(fused))))
        return T.sigmoid(self.hazard_head(hidden))

    def forward(
        self,
        bag: Tensor,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> MmfOutput:
        h_bag, attention = self.amil.encode(bag)
        h_wsi = self.amil.representation(h_bag)
        h_mol = self.snn.representation(self.snn.encode(x, training, rng))
        return MmfOutput(self.fuse(h_wsi, h_mol), h_wsi, h_mol, attention)

    __call__ = forward


Model = Union[AmilModel, SnnModel, MmfModel]


def build_model(
    kind: str,
    d_in: int,
    p_in: int,
    config: ModelConfig,
    seed: int,
) -> Model:
    rng = np.random.default_rng(seed)
    if kind == "amil":
        return AmilModel(d_in, config, rng)
    if kind == "snn":
        return SnnModel(p_in, config, rng)
    if kind == "mmf":
        return MmfModel(d_in, p_in, config, rng)
    raise ConfigError(f"Unknown model kind {kind!r}, expected one of {MODEL_KINDS}")


def patient_hazards(
    model: Model,
    patient,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hazards of one PatientRecord, whatever the model kind"""
    if isinstance(model, AmilModel):
        return model(patient.bag, training, rng).hazards
    if isinstance(model, SnnModel):
        return model(patient.molecular, training, rng).hazards
    return model(patient.bag, patient.molecular, training, rng).hazards


def risk_tensor(hazards: Tensor) -> Tensor:
    """sum_r (1 - S(r)), differentiable"""
    surv = hazard_to_survival(hazards)
    return T.sum(1.0 - surv)


def risk_score(hazards: Tensor | np.ndarray) -> float:
    """Cumulative incidence summed over the bins, in [0, n_bins]

    Strictly increasing in every hazard.
    """
    if not isinstance(hazards, Tensor):
        hazards = Tensor(hazards)
    if hazards.ndim != 1 or not np.all(np.isfinite(hazards.values)):
        raise ContractError(f"Hazards must be a finite vector, got {hazards.values}")
    return risk_tensor(hazards).item()


# Checkpoints
def save_checkpoint(
    path: str | PanPath,
    model: Model,
    extras: Mapping[str, Any] | None = None,
) -> None:
    """JSON container with every parameter, the config and free-form extras

    Python's float repr is the shortest round-tripping one, so float64
    values come back bitwise. The file is written whole, so local and cloud
    destinations behave the same.
    """
    tensors = {
        name: {"shape": list(param.shape), "values": param.values.reshape(-1).tolist()}
        for name, param in model.named_parameters()
    }
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "dims": {
            "d": getattr(model, "d_in", None),
            "p": getattr(model, "p_in", None),
        },
        "model_config": asdict(model.config),
        "tensors": tensors,
        "extras": dict(extras or {}),
    }
    PanPath(str(path)).write_text(json.dumps(payload))


def load_checkpoint(path: str | PanPath) -> tuple[Model, dict[str, Any]]:
    path = PanPath(str(path))
    if not path.is_file():
        raise DataError("Checkpoint not found", path=str(path))
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"Invalid checkpoint JSON: {exc}", path=str(path)) from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError("Not a survfuse checkpoint", path=str(path))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"Unsupported checkpoint version {payload.get('version')}",
            path=str(path),
        )

    config = ModelConfig(**payload["model_config"])
    config.validate()
    dims = payload["dims"]
    model = build_model(payload["kind"], dims["d"] or 0, dims["p"] or 0, config, 0)
    state = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["tensors"].items()
    }
    model.load_state_dict(state)
    return model, payload["extras"]


__all__ = [
    "AmilModel",
    "SnnModel",
    "MmfModel",
    "build_model",
    "patient_hazards",
    "risk_score",
    "risk_tensor",
    "save_checkpoint",
    "load_checkpoint",
    "N_BINS",
]

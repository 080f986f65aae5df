"""Layer primitives: linear layers, SeLU, alpha dropout, gated attention,
attention pooling, modality gating and Kronecker fusion"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .defaults import ALPHA_PRIME, SELU_ALPHA, SELU_LAMBDA
from .errors import DimensionError, ParameterError, PreconditionError
from .tensor import Tensor

INIT_SCHEMES = ("lecun_normal", "kaiming_normal")


@dataclass(frozen=True)
class SeluConstants:
    alpha: float = SELU_ALPHA
    lambda_: float = SELU_LAMBDA

    def __post_init__(self):
        if self.alpha <= 0 or self.lambda_ <= 0:
            raise ParameterError("SeLU constants must be positive")


class Module:
    """Anything holding parameters, possibly through sub-modules

    Parameters are discovered from the instance attributes, in assignment
    order, so the naming and ordering are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [param for _, param in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: param.numpy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise DimensionError(
                f"State mismatch, missing: {sorted(missing)}, "
                f"unexpected: {sorted(unexpected)}"
            )
        for name, param in params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != param.shape:
                raise DimensionError(
                    f"{name}: expected shape {param.shape}, got {values.shape}"
                )
            param.values[...] = values


class LinearLayer(Module):
    """y = W x + b with W of shape [out x in]

    Applies to a vector [in] or to a bag of rows [M x in].
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        init_scheme: str = "kaiming_normal",
    ) -> None:
        if init_scheme not in INIT_SCHEMES:
            raise ParameterError(
                f"Unknown init scheme {init_scheme!r}, expected one of {INIT_SCHEMES}"
            )
        if in_dim < 1 or out_dim < 1:
            raise ParameterError(f"Invalid linear dims {in_dim} -> {out_dim}")
        gain = 1.0 if init_scheme == "lecun_normal" else 2.0
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.init_scheme = init_scheme
        self.weight = Tensor(
            rng.normal(0.0, np.sqrt(gain / in_dim), size=(out_dim, in_dim)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1:] != (self.in_dim,) or x.ndim not in (1, 2):
            raise DimensionError(
                f"Linear layer expects [..., {self.in_dim}], got {x.shape}"
            )
        return T.affine(x, self.weight, self.bias)


def selu(x: Tensor, constants: SeluConstants = SeluConstants()) -> Tensor:
    lam, alpha = constants.lambda_, constants.alpha
    return T.unary(
        "selu",
        x,
        lambda v: np.where(v > 0, lam * v, lam * alpha * np.expm1(np.minimum(v, 0))),
        lambda v, y: np.where(v > 0, lam, lam * alpha * np.exp(np.minimum(v, 0))),
    )


def alpha_dropout_affine(
    q: float,
    mu: float = 0.0,
    nu: float = 1.0,
    alpha_prime: float = ALPHA_PRIME,
) -> tuple[float, float]:
    """The affine correction (a, b) that restores mean `mu`/variance `nu`

    After dropping with keep probability q to alpha', the moments are
    E = q mu + (1 - q) alpha' and Var = q ((1 - q)(alpha' - mu)^2 + nu).
    a (.) + b maps them back to (mu, nu).
    """
    mean = q * mu + (1.0 - q) * alpha_prime
    var = q * ((1.0 - q) * (alpha_prime - mu) ** 2 + nu)
    a = np.sqrt(nu / var)
    b = mu - a * mean
    return float(a), float(b)


def alpha_dropout(
    x: Tensor,
    keep_prob: float,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    if not 0 < keep_prob <= 1:
        raise ParameterError(f"keep probability must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1:
        return x
    if rng is None:
        raise ParameterError("alpha dropout in training mode needs an rng")

    keep = (rng.random(x.shape) < keep_prob).astype(np.float64)
    a, b = alpha_dropout_affine(keep_prob)
    dropped = x * Tensor._wrap(keep) + Tensor._wrap(ALPHA_PRIME * (1.0 - keep))
    return dropped * a + b


class GatedAttention(Module):
    """Scores a_m = softmax_m W_a (tanh(V_a h_m) * sigm(U_a h_m))"""

    def __init__(self, in_dim: int, attn_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.attn_dim = attn_dim
        self.U_a = LinearLayer(in_dim, attn_dim, rng)
        self.V_a = LinearLayer(in_dim, attn_dim, rng)
        self.W_a = LinearLayer(attn_dim, 1, rng)

    def __call__(self, H: Tensor) -> Tensor:
        return gated_attention_scores(H, self)


def gated_attention_scores(H: Tensor, params: GatedAttention) -> Tensor:
    if H.ndim != 2 or H.shape[0] < 1:
        raise PreconditionError(f"Attention needs a non-empty bag, got {H.shape}")
    if H.shape[1] != params.in_dim:
        raise DimensionError(
            f"Attention expects {params.in_dim} features, got {H.shape[1]}"
        )
    gated = T.tanh(params.V_a(H)) * T.sigmoid(params.U_a(H))
    logits = T.reshape(params.W_a(gated), (H.shape[0],))
    return T.softmax(logits)


def attention_pool(a: Tensor, H: Tensor) -> Tensor:
    """sum_m a_m h_m"""
    if a.ndim != 1 or H.ndim != 2 or a.shape[0] != H.shape[0]:
        raise DimensionError(
            f"Cannot pool {H.shape} bag with {a.shape} attention"
        )
    pooled = T.matmul(T.reshape(a, (1, a.shape[0])), H)
    return T.reshape(pooled, (H.shape[1],))


class ModalityGate(Module):
    """Gating of both unimodal representations

    h_i <- ReLU(W_i h_i); z_i = sigmoid(W_j [h_wsi, h_mol]); out_i = z_i * h_i
    """

    def __init__(self, wsi_dim: int, mol_dim: int, rng: np.random.Generator):
        self.wsi_dim = wsi_dim
        self.mol_dim = mol_dim
        joint = wsi_dim + mol_dim
        self.wsi_transform = LinearLayer(wsi_dim, wsi_dim, rng)
        self.mol_transform = LinearLayer(mol_dim, mol_dim, rng)
        self.wsi_score = LinearLayer(joint, wsi_dim, rng)
        self.mol_score = LinearLayer(joint, mol_dim, rng)

    def __call__(self, h_wsi: Tensor, h_mol: Tensor) -> tuple[Tensor, Tensor]:
        return modality_gate(h_wsi, h_mol, self)


def modality_gate(
    h_wsi: Tensor,
    h_mol: Tensor,
    params: ModalityGate,
) -> tuple[Tensor, Tensor]:
    if h_wsi.shape != (params.wsi_dim,) or h_mol.shape != (params.mol_dim,):
        raise DimensionError(
            f"Gate expects ({params.wsi_dim},) and ({params.mol_dim},), "
            f"got {h_wsi.shape} and {h_mol.shape}"
        )
    joint = T.concat([h_wsi, h_mol])
    wsi = T.relu(params.wsi_transform(h_wsi)) * T.sigmoid(params.wsi_score(joint))
    mol = T.relu(params.mol_transform(h_mol)) * T.sigmoid(params.mol_score(joint))
    return wsi, mol


def kron_fusion(u: Tensor, v: Tensor) -> Tensor:
    """Flattened [u; 1] (x) [v; 1], of length (n + 1)(m + 1)"""
    if u.ndim != 1 or v.ndim != 1 or u.size < 1 or v.size < 1:
        raise PreconditionError(
            f"Fusion needs two non-empty vectors, got {u.shape} and {v.shape}"
        )
    one = Tensor(np.ones(1))
    fused = T.outer(T.concat([u, one]), T.concat([v, one]))
    return T.reshape(fused, ((u.size + 1) * (v.size + 1),))

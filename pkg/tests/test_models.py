import json

import numpy as np
import pytest
from scipy.special import expit

from survfuse import models
from survfuse import tensor as T
from survfuse.config import ModelConfig
from survfuse.defaults import SELU_ALPHA, SELU_LAMBDA
from survfuse.errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    PreconditionError,
)
from survfuse.models import (
    AmilModel,
    MmfModel,
    SnnModel,
    build_model,
    load_checkpoint,
    patient_hazards,
    risk_score,
    risk_tensor,
    save_checkpoint,
)
from survfuse.tensor import Tensor, grad_check


def _relu(x):
    return np.maximum(x, 0.0)


def _linear(layer, x):
    return x @ layer.weight.values.T + layer.bias.values


def test_risk_score_examples():
    assert risk_score(np.array([0.5, 0.5, 0.5, 0.5])) == 3.0625
    assert risk_score(np.full(4, 1e-12)) == pytest.approx(0.0, abs=1e-10)
    assert risk_score(np.ones(4)) == pytest.approx(4.0)


def test_risk_score_increases_with_every_hazard():
    base = np.array([0.2, 0.3, 0.1, 0.4])
    for r in range(4):
        bumped = base.copy()
        bumped[r] += 0.05
        assert risk_score(bumped) > risk_score(base)


def test_risk_score_contract():
    with pytest.raises(ContractError):
        risk_score(np.array([0.5, np.nan, 0.5, 0.5]))
    with pytest.raises(ContractError):
        risk_score(np.array([0.5, 1.5, 0.5, 0.5]))


def test_amil_matches_numpy_reference(rng, small_model_config):
    model = AmilModel(5, small_model_config, rng)
    for layer in (model.projection, model.hazard_head):
        layer.bias.values[:] = rng.normal(size=layer.bias.shape)
    bag = rng.normal(size=(7, 5))

    hidden = _relu(_linear(model.projection, bag))
    gated = np.tanh(_linear(model.attention.V_a, hidden)) * expit(
        _linear(model.attention.U_a, hidden)
    )
    logits = _linear(model.attention.W_a, gated)[:, 0]
    a = np.exp(logits - logits.max())
    a /= a.sum()
    expected = expit(_linear(model.hazard_head, a @ hidden))

    out = model(Tensor(bag))
    np.testing.assert_allclose(out.hazards.values, expected, rtol=1e-12)
    np.testing.assert_allclose(out.attention.values, a, rtol=1e-12)
    assert out.h_wsi.shape == (small_model_config.rep_dim,)


def test_amil_bag_handling(rng, small_model_config):
    model = AmilModel(5, small_model_config, rng)
    out = model(Tensor(rng.normal(size=(1, 5))))
    np.testing.assert_array_equal(out.attention.values, [1.0])
    with pytest.raises(PreconditionError):
        model(Tensor(np.zeros((0, 5))))
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros((3, 4))))


def test_amil_permutation_invariant(rng, small_model_config):
    model = AmilModel(5, small_model_config, rng)
    bag = rng.normal(size=(9, 5))
    perm = rng.permutation(9)
    np.testing.assert_allclose(
        model(Tensor(bag)).hazards.values,
        model(Tensor(bag[perm])).hazards.values,
        rtol=1e-9,
    )


def test_amil_multi_slide_bag_is_concatenation(rng, small_model_config):
    model = AmilModel(5, small_model_config, rng)
    slide_a, slide_b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    joined = model(Tensor(np.vstack([slide_a, slide_b]))).hazards.values
    swapped = model(Tensor(np.vstack([slide_b, slide_a]))).hazards.values
    np.testing.assert_allclose(joined, swapped, rtol=1e-9)


def test_amil_multi_slide_bag_pools_across_slides(rng, small_model_config):
    model = AmilModel(5, small_model_config, rng)
    slide_a, slide_b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    pooled_a, attn_a = model.encode(Tensor(slide_a))
    pooled_b, attn_b = model.encode(Tensor(slide_b))
    pooled, attention = model.encode(Tensor(np.vstack([slide_a, slide_b])))

    # one softmax over both slides, restricted to a slide it renormalizes
    share_a = attention.values[:3].sum()
    np.testing.assert_allclose(attention.values[:3] / share_a, attn_a.values)
    np.testing.assert_allclose(
        attention.values[3:] / (1.0 - share_a), attn_b.values
    )
    np.testing.assert_allclose(
        pooled.values,
        share_a * pooled_a.values + (1.0 - share_a) * pooled_b.values,
        rtol=1e-10,
    )


def test_snn_inference_is_deterministic(rng, small_model_config):
    model = SnnModel(6, small_model_config, rng)
    x = Tensor(rng.normal(size=6))
    np.testing.assert_array_equal(model(x).hazards.values, model(x).hazards.values)
    np.testing.assert_allclose(
        model(Tensor(np.zeros(6))).hazards.values, np.full(4, 0.5)
    )
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros(5)))


def test_snn_dropout_only_in_training(rng, small_model_config):
    model = SnnModel(6, small_model_config, rng)
    x = Tensor(rng.normal(size=6))
    a = model(x, training=True, rng=np.random.default_rng(0)).hazards.values
    b = model(x, training=True, rng=np.random.default_rng(1)).hazards.values
    assert not np.array_equal(a, b)


def test_mmf_shapes_and_parameters(rng):
    model = MmfModel(5, 6, ModelConfig(proj_dim=8, attn_dim=4, snn_hidden=8), rng)
    assert model.fusion1.in_dim == 33 * 33
    names = [name for name, _ in model.named_parameters()]
    heads = ("amil.hazard_head.", "snn.hazard_head.")
    assert not any(n.startswith(heads) for n in names)
    assert "gate.wsi_score.weight" in names
    out = model(Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=6)))
    assert out.hazards.shape == (4,)
    assert ((out.hazards.values > 0) & (out.hazards.values < 1)).all()


def test_mmf_permutation_invariant(rng, small_model_config):
    model = MmfModel(5, 6, small_model_config, rng)
    bag, x = rng.normal(size=(8, 5)), Tensor(rng.normal(size=6))
    perm = rng.permutation(8)
    np.testing.assert_allclose(
        model(Tensor(bag), x).hazards.values,
        model(Tensor(bag[perm]), x).hazards.values,
        rtol=1e-9,
    )


def test_grad_check_through_models(rng, small_model_config):
    amil = AmilModel(5, small_model_config, rng)
    snn = SnnModel(6, small_model_config, rng)
    mmf = MmfModel(5, 6, small_model_config, rng)
    bag = Tensor(rng.normal(size=(4, 5)))
    x = Tensor(rng.normal(size=6))

    assert grad_check(lambda b: risk_tensor(amil(b).hazards), bag) < 1e-5
    assert grad_check(lambda v: risk_tensor(snn(v).hazards), x) < 1e-5
    assert grad_check(lambda v: risk_tensor(mmf(bag, v).hazards), x) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_random_instances(seed, small_model_config):
    rng = np.random.default_rng(seed)
    d, p = (int(v) for v in rng.integers(1, 17, size=2))
    amil = AmilModel(d, small_model_config, rng)
    snn = SnnModel(p, small_model_config, rng)
    mmf = MmfModel(d, p, small_model_config, rng)
    bag = Tensor(rng.normal(size=(int(rng.integers(1, 9)), d)))
    x = Tensor(rng.normal(size=p))
    assert grad_check(lambda b: risk_tensor(amil(b).hazards), bag) < 1e-5
    assert grad_check(lambda v: risk_tensor(snn(v).hazards), x) < 1e-5
    assert grad_check(lambda b: risk_tensor(mmf(b, x).hazards), bag) < 1e-5
    assert grad_check(lambda v: risk_tensor(mmf(bag, v).hazards), x) < 1e-5


@pytest.mark.parametrize(
    "param", ["hazard_head.weight", "gate.mol_score.weight", "snn.hidden1.bias"]
)
def test_grad_check_parameters(rng, small_model_config, param):
    model = MmfModel(5, 6, small_model_config, rng)
    bag, x = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=6))
    *path, attr = param.split(".")
    owner = model
    for part in path:
        owner = getattr(owner, part)
    original = getattr(owner, attr)

    def f(w):
        setattr(owner, attr, w)
        return risk_tensor(model(bag, x).hazards)

    try:
        assert grad_check(f, original) < 1e-5
    finally:
        setattr(owner, attr, original)


def test_build_model(small_model_config):
    assert isinstance(build_model("snn", 5, 6, small_model_config, 0), SnnModel)
    a = build_model("amil", 5, 6, small_model_config, 3)
    b = build_model("amil", 5, 6, small_model_config, 3)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.values, pb.values)
    with pytest.raises(ConfigError):
        build_model("cox", 5, 6, small_model_config, 0)


def test_patient_hazards_dispatch(cohort, small_model_config):
    patient = cohort.patients[0]
    for kind in ("snn", "amil", "mmf"):
        model = build_model(kind, cohort.d, cohort.p, small_model_config, 1)
        assert patient_hazards(model, patient).shape == (4,)


@pytest.mark.parametrize("kind", ["snn", "amil", "mmf"])
def test_checkpoint_round_trip(tmp_path, cohort, small_model_config, kind):
    model = build_model(kind, cohort.d, cohort.p, small_model_config, 5)
    path = tmp_path / "model.json"
    save_checkpoint(path, model, {"bins": [1.0, 2.0, 3.0]})
    loaded, extras = load_checkpoint(path)

    assert extras == {"bins": [1.0, 2.0, 3.0]}
    assert type(loaded) is type(model)
    for name, values in model.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[name], values)
    patient = cohort.patients[0]
    np.testing.assert_array_equal(
        patient_hazards(loaded, patient).values, patient_hazards(model, patient).values
    )


def test_checkpoint_errors(tmp_path, small_model_config):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataError):
        load_checkpoint(bad)
    bad.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(DataError):
        load_checkpoint(bad)

    path = tmp_path / "model.json"
    save_checkpoint(path, build_model("snn", 3, 6, small_model_config, 0))
    payload = json.loads(path.read_text())
    payload["version"] = 999
    path.write_text(json.dumps(payload))
    with pytest.raises(DataError, match="version"):
        load_checkpoint(path)


def test_risk_tensor_is_differentiable():
    h = Tensor([0.2, 0.3, 0.1, 0.4])
    assert grad_check(lambda v: risk_tensor(T.sigmoid(v)), h) < 1e-5


def _selu(v):
    return SELU_LAMBDA * np.where(v > 0, v, SELU_ALPHA * np.expm1(np.minimum(v, 0)))


def _snn_reference(model, x):
    hidden = _selu(_linear(model.hidden2, _selu(_linear(model.hidden1, x))))
    return expit(_linear(model.hazard_head, hidden)), _selu(
        _linear(model.rep_head, hidden)
    )


def _fuse_reference(model, h_wsi, h_mol):
    gate = model.gate
    joint = np.concatenate([h_wsi, h_mol])
    wsi = _relu(_linear(gate.wsi_transform, h_wsi)) * expit(
        _linear(gate.wsi_score, joint)
    )
    mol = _relu(_linear(gate.mol_transform, h_mol)) * expit(
        _linear(gate.mol_score, joint)
    )
    fused = np.outer(np.append(wsi, 1.0), np.append(mol, 1.0)).reshape(-1)
    hidden = _relu(_linear(model.fusion2, _relu(_linear(model.fusion1, fused))))
    return expit(_linear(model.hazard_head, hidden))


def _randomize_biases(model, rng):
    for _, param in model.named_parameters():
        if param.ndim == 1:
            param.values[:] = rng.normal(size=param.shape) * 0.5


def test_snn_matches_numpy_reference(rng, small_model_config):
    model = SnnModel(6, small_model_config, rng)
    _randomize_biases(model, rng)
    x = rng.normal(size=6)
    hazards, h_mol = _snn_reference(model, x)

    out = model(Tensor(x))
    np.testing.assert_allclose(out.hazards.values, hazards, rtol=1e-12)
    np.testing.assert_allclose(out.h_mol.values, h_mol, rtol=1e-12)


def test_mmf_matches_numpy_reference(rng, small_model_config):
    model = MmfModel(5, 6, small_model_config, rng)
    _randomize_biases(model, rng)
    bag, x = rng.normal(size=(7, 5)), rng.normal(size=6)

    hidden = _relu(_linear(model.amil.projection, bag))
    attention = model.amil.attention
    gated = np.tanh(_linear(attention.V_a, hidden)) * expit(
        _linear(attention.U_a, hidden)
    )
    logits = _linear(attention.W_a, gated)[:, 0]
    a = np.exp(logits - logits.max())
    a /= a.sum()
    h_wsi = _relu(_linear(model.amil.rep_head, a @ hidden))
    _, h_mol = _snn_reference(model.snn, x)
    expected = _fuse_reference(model, h_wsi, h_mol)

    out = model(Tensor(bag), Tensor(x))
    np.testing.assert_allclose(out.h_wsi.values, h_wsi, rtol=1e-12)
    np.testing.assert_allclose(out.h_mol.values, h_mol, rtol=1e-12)
    np.testing.assert_allclose(out.hazards.values, expected, rtol=1e-12)
    survival = np.cumprod(1.0 - expected)
    assert risk_score(out.hazards) == pytest.approx(
        np.sum(1.0 - survival), rel=1e-12
    )


def test_mmf_with_both_gated_representations_zero(rng, small_model_config):
    model = MmfModel(5, 6, small_model_config, rng)
    _randomize_biases(model, rng)
    for layer in (model.gate.wsi_transform, model.gate.mol_transform):
        layer.weight.values[:] = 0.0
        layer.bias.values[:] = 0.0

    # only the constant 1 x 1 entry of the fused vector survives
    n = small_model_config.rep_dim
    fused = np.zeros((n + 1) ** 2)
    fused[-1] = 1.0
    hidden = _relu(_linear(model.fusion2, _relu(_linear(model.fusion1, fused))))
    expected = expit(_linear(model.hazard_head, hidden))
    for _ in range(3):
        out = model(Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=6)))
        np.testing.assert_allclose(out.hazards.values, expected, rtol=1e-12)


def test_checkpoint_io_goes_through_panpath(
    tmp_path, monkeypatch, small_model_config
):
    opened = []
    real = models.PanPath

    def recording(value):
        opened.append(value)
        return real(value)

    monkeypatch.setattr(models, "PanPath", recording)
    path = str(tmp_path / "model.json")
    save_checkpoint(path, build_model("snn", 3, 6, small_model_config, 0))
    loaded, _ = load_checkpoint(path)
    assert opened == [path, path]
    assert isinstance(loaded, SnnModel)

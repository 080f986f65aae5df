import numpy as np
import pandas as pd
import pytest

from survfuse import tensor as T
from survfuse.config import TrainConfig
from survfuse.defaults import SELU_LAMBDA
from survfuse.errors import (
    DataError,
    DegenerateModelError,
    NumericError,
    ParameterError,
    PreconditionError,
)
from survfuse.interpret import (
    AttentionMap,
    AttributionReport,
    PatchCellCounts,
    attention_map,
    attention_percentiles,
    cell_fractions,
    composite_nodes,
    fusion_attribution,
    gene_attribution_tests,
    integrated_gradients,
    modality_contribution,
    molecular_attribution,
    path_breakpoints,
    read_cell_counts,
    til_fraction,
    til_positive,
    til_report,
    top_attention_patches,
)
from survfuse.models import AmilModel, MmfModel, SnnModel, build_model
from survfuse.stats import RiskTable
from survfuse.survival import make_bins
from survfuse.tensor import Tensor
from survfuse.training import train


# Integrated Gradients
def test_ig_linear_is_exact():
    w = np.array([0.5, -2.0, 3.0])
    x = np.array([1.0, 2.0, -1.0])
    report = integrated_gradients(lambda v: T.sum(v * Tensor(w)), x)
    np.testing.assert_allclose(report.ig, w * x, rtol=1e-12)
    assert report.completeness_gap < 1e-12
    assert report.directions == ["high_risk", "low_risk", "low_risk"]


def test_ig_quadratic():
    report = integrated_gradients(lambda v: T.sum(v * v), np.array([2.0]))
    assert report.ig[0] == pytest.approx(4.0, abs=1e-10)


def test_ig_completeness_on_smooth_function(rng):
    W = Tensor(rng.normal(size=(3, 5)))

    def fn(v):
        return T.sum(T.tanh(T.matmul(W, T.reshape(v, (5, 1)))))

    report = integrated_gradients(fn, rng.normal(size=5), steps=50)
    assert report.relative_gap < 1e-8


def test_ig_at_baseline_is_zero():
    x = np.array([0.3, 0.4])
    report = integrated_gradients(lambda v: T.sum(T.exp(v)), x, baseline=x)
    np.testing.assert_array_equal(report.ig, [0.0, 0.0])
    assert report.directions == ["neutral", "neutral"]


def test_ig_errors():
    with pytest.raises(ParameterError):
        integrated_gradients(lambda v: T.sum(v), np.ones(2), steps=1)
    with pytest.raises(PreconditionError):
        integrated_gradients(lambda v: T.sum(v), np.ones(2), baseline=np.ones(3))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            integrated_gradients(lambda v: T.sum(T.exp(v * 1000.0)), np.ones(1))


def test_ig_splits_path_at_relu_kinks():
    cuts = np.array([0.3, 0.55, 0.8])
    report = integrated_gradients(
        lambda v: T.sum(T.relu(v - Tensor(cuts))), np.ones(3), steps=8
    )
    assert report.segments == 4
    np.testing.assert_allclose(report.ig, 1.0 - cuts, atol=1e-10)
    assert report.completeness_gap < 1e-10


def test_composite_nodes():
    alphas, weights = composite_nodes([], 50)
    nodes, plain = np.polynomial.legendre.leggauss(50)
    np.testing.assert_allclose(alphas, (nodes + 1.0) / 2.0)
    np.testing.assert_allclose(weights, plain / 2.0)

    alphas, weights = composite_nodes([0.25, 0.26], 20)
    assert weights.sum() == pytest.approx(1.0)
    # 5 + 3 + 15 nodes
    assert alphas.size == 23
    assert (alphas[5:8] > 0.25).all() and (alphas[5:8] < 0.26).all()


def test_path_breakpoints_on_smooth_function_is_empty(rng):
    W = Tensor(rng.normal(size=(3, 5)))

    def fn(v):
        return T.sum(T.tanh(T.matmul(W, T.reshape(v, (5, 1)))))

    x = rng.normal(size=5)
    assert path_breakpoints(fn, np.zeros(5), x, 10) == []


def test_briefly_trained_mmf_attributions_are_complete(cohort, small_model_config):
    bins = make_bins(cohort.labels())
    model = build_model("mmf", cohort.d, cohort.p, small_model_config, 2)
    fitted = train(model, cohort.patients, bins, TrainConfig(epochs=3, lr=5e-3))
    for patient in cohort.patients[:15]:
        report = molecular_attribution(
            fitted.model, patient, cohort.feature_names, steps=50
        )
        assert report.completeness_gap < 1e-5


def test_attribution_report_dict():
    report = integrated_gradients(
        lambda v: T.sum(v), np.array([1.0, -1.0]), feature_names=["TP53", "EGFR"]
    )
    data = report.to_dict()
    assert [f["feature"] for f in data["features"]] == ["TP53", "EGFR"]
    assert data["features"][0]["direction"] == "high_risk"


def test_molecular_attribution(cohort, small_model_config, rng):
    patient = cohort.patients[0]
    snn = SnnModel(cohort.p, small_model_config, rng)
    report = molecular_attribution(snn, patient, cohort.feature_names)
    assert report.feature_names == cohort.feature_names
    assert report.ig.shape == (cohort.p,)

    mmf = MmfModel(cohort.d, cohort.p, small_model_config, rng)
    assert molecular_attribution(mmf, patient, cohort.feature_names).ig.shape == (
        cohort.p,
    )
    with pytest.raises(PreconditionError):
        molecular_attribution(
            AmilModel(cohort.d, small_model_config, rng), patient, []
        )


def test_fusion_attribution_names(cohort, small_model_config, rng):
    mmf = MmfModel(cohort.d, cohort.p, small_model_config, rng)
    patient = cohort.patients[1]
    out = mmf(patient.bag, patient.molecular)
    report = fusion_attribution(mmf, out.h_wsi, out.h_mol)
    assert report.feature_names[:2] == ["wsi_0", "wsi_1"]
    assert report.feature_names[-1] == f"mol_{small_model_config.rep_dim - 1}"


def _mol_only_mmf(cohort, config, rng):
    """MMF whose prediction ignores the slide representation entirely"""
    mmf = MmfModel(cohort.d, cohort.p, config, rng)
    n = m = config.rep_dim
    keep = np.zeros((n + 1) * (m + 1), dtype=bool)
    keep[n * (m + 1): n * (m + 1) + m] = True
    mmf.fusion1.weight.values[:, ~keep] = 0.0
    mmf.fusion1.bias.values[:] = 1.0
    mmf.fusion2.bias.values[:] = 1.0
    mmf.gate.mol_score.weight.values[:, :n] = 0.0
    mmf.gate.mol_transform.weight.values[:] = 0.0
    mmf.gate.mol_transform.bias.values[:] = 1.0
    return mmf


def test_modality_contribution(cohort, small_model_config, rng):
    mmf = _mol_only_mmf(cohort, small_model_config, rng)
    patient = cohort.patients[2]
    wsi, mol = modality_contribution(mmf, patient.bag, patient.molecular)
    assert wsi == pytest.approx(0.0, abs=1e-12)
    assert mol == pytest.approx(1.0)


def test_modality_contribution_shares_sum_to_one(cohort, small_model_config, rng):
    mmf = _mol_only_mmf(cohort, small_model_config, rng)
    mmf.fusion1.weight.values[:] = rng.normal(size=mmf.fusion1.weight.shape) * 0.1
    mmf.amil.rep_head.bias.values[:] = 1.0
    mmf.gate.wsi_transform.bias.values[:] = 1.0
    patient = cohort.patients[3]
    wsi, mol = modality_contribution(mmf, patient.bag, patient.molecular)
    assert wsi + mol == pytest.approx(1.0)
    assert 0 < wsi < 1


def _symmetric_mmf(cohort, config, rng):
    """MMF with f(h_wsi, h_mol) = f(h_mol, h_wsi) and both representations
    equal to the same constant vector"""
    mmf = MmfModel(cohort.d, cohort.p, config, rng)
    n = config.rep_dim
    gate = mmf.gate
    gate.mol_transform.load_state_dict(gate.wsi_transform.state_dict())
    score = gate.wsi_score.weight.values
    gate.mol_score.weight.values[:] = np.hstack([score[:, n:], score[:, :n]])
    gate.mol_score.bias.values[:] = gate.wsi_score.bias.values
    w = mmf.fusion1.weight.values.reshape(-1, n + 1, n + 1)
    w[:] = (w + w.transpose(0, 2, 1)) / 2.0

    level = np.linspace(0.2, 1.0, n)
    mmf.amil.rep_head.weight.values[:] = 0.0
    mmf.amil.rep_head.bias.values[:] = SELU_LAMBDA * level
    mmf.snn.rep_head.weight.values[:] = 0.0
    mmf.snn.rep_head.bias.values[:] = level
    return mmf


def test_modality_contribution_symmetric_model_splits_evenly(
    cohort, small_model_config, rng
):
    mmf = _symmetric_mmf(cohort, small_model_config, rng)
    patient = cohort.patients[4]
    out = mmf(patient.bag, patient.molecular)
    np.testing.assert_allclose(out.h_wsi.values, out.h_mol.values)

    wsi, mol = modality_contribution(mmf, patient.bag, patient.molecular)
    assert wsi == pytest.approx(0.5, abs=1e-9)
    assert mol == pytest.approx(0.5, abs=1e-9)


def test_modality_contribution_degenerate(cohort, small_model_config, rng):
    mmf = MmfModel(cohort.d, cohort.p, small_model_config, rng)
    mmf.hazard_head.weight.values[:] = 0.0
    patient = cohort.patients[0]
    with pytest.raises(DegenerateModelError):
        modality_contribution(mmf, patient.bag, patient.molecular)


def _report(values, ig):
    values, ig = np.asarray(values, float), np.asarray(ig, float)
    return AttributionReport(["a", "b"], values, ig, 0.0, 0.0, 0.0)


def test_gene_attribution_tests():
    reports = [
        _report([1.0, 1.0], [0.1, 0.01]),
        _report([2.0, 1.0], [0.2, 0.01]),
        _report([3.0, 1.0], [0.1, 0.01]),
        _report([4.0, 1.0], [1.0, 0.01]),
        _report([5.0, 1.0], [1.1, 0.01]),
        _report([6.0, 1.0], [0.9, 0.01]),
    ]
    frame = gene_attribution_tests(reports)
    assert list(frame.feature) == ["a", "b"]
    a, b = frame.iloc[0], frame.iloc[1]
    assert a.t < 0 and a.p < 0.01
    assert np.isnan(b.p) and b.reason
    with pytest.raises(PreconditionError):
        gene_attribution_tests([])


# Attention
def test_attention_percentiles():
    np.testing.assert_allclose(
        attention_percentiles([0.4, 0.1, 0.3, 0.2]), [1.0, 0.0, 2 / 3, 1 / 3]
    )
    np.testing.assert_allclose(attention_percentiles([1.0, 1.0, 2.0]), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(attention_percentiles([0.5, 0.5]), [0.5, 0.5])
    with pytest.raises(PreconditionError):
        attention_percentiles([0.1], reference=[])


def test_attention_percentiles_against_reference():
    scores = [0.2, 0.4, 0.9]
    reference = [0.1, 0.3, 0.5, 0.7]
    # raw percentiles 1/4, 2/4 and 4/4 before rescaling
    np.testing.assert_allclose(
        attention_percentiles(scores, reference), [0.0, 1 / 3, 1.0]
    )
    np.testing.assert_allclose(attention_percentiles(scores), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(
        attention_percentiles([0.3, 0.6], [0.3, 0.3, 0.5, 0.6]), [0.0, 1.0]
    )


def test_attention_percentiles_monotone(rng):
    raw = rng.random(50)
    pct = attention_percentiles(raw)
    order = np.argsort(raw)
    assert np.all(np.diff(pct[order]) >= 0)
    assert pct.min() == 0.0 and pct.max() == 1.0


def test_attention_map(cohort, small_model_config, rng):
    patient = cohort.patients[0]
    amap = attention_map(AmilModel(cohort.d, small_model_config, rng), patient)
    assert len(amap) == patient.bag_size
    assert amap.raw.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(amap.coords, patient.patch_coords)

    frame = amap.to_frame()
    assert list(frame.columns) == ["patch_id", "x", "y", "raw", "percentile"]
    back = AttentionMap.from_frame(frame)
    np.testing.assert_array_equal(back.raw, amap.raw)

    mmf = MmfModel(cohort.d, cohort.p, small_model_config, rng)
    assert len(attention_map(mmf, patient)) == patient.bag_size
    with pytest.raises(PreconditionError):
        attention_map(SnnModel(cohort.p, small_model_config, rng), patient)


@pytest.mark.parametrize("m,expected", [(13487, 135), (100, 1), (50, 1), (101, 2)])
def test_top_patch_count(m, expected):
    amap = AttentionMap.from_scores(np.linspace(0, 1, m))
    assert len(top_attention_patches(amap, 0.01)) == expected


def test_top_patches_order_and_ties():
    amap = AttentionMap.from_scores([0.1, 0.3, 0.3, 0.2, 0.1])
    assert top_attention_patches(amap, 0.6) == [1, 2, 3]
    assert top_attention_patches(amap, 1.0) == [1, 2, 3, 0, 4]
    with pytest.raises(ParameterError):
        top_attention_patches(amap, 0.0)
    with pytest.raises(PreconditionError):
        top_attention_patches(AttentionMap.from_scores([]), 0.5)


# TIL
@pytest.mark.parametrize(
    "counts,expected",
    [
        ((21, 11, 6), True),
        ((20, 11, 6), False),
        ((21, 10, 6), False),
        ((21, 11, 5), False),
        ((100, 50, 40), True),
    ],
)
def test_til_positive(counts, expected):
    assert til_positive(PatchCellCounts(0, *counts)) is expected


def test_til_fraction_and_cells():
    patches = [PatchCellCounts(i, 21, 11, 6) for i in range(2)]
    patches += [PatchCellCounts(i, 10, 1, 1) for i in range(2, 8)]
    assert til_fraction(patches) == 0.25
    lym, tum = cell_fractions(patches)
    assert lym == pytest.approx(28 / 102)
    assert tum == pytest.approx(18 / 102)
    assert cell_fractions([PatchCellCounts(0, 0, 0, 0)]) == (0.0, 0.0)
    with pytest.raises(PreconditionError):
        til_fraction([])


def test_cell_count_validation():
    with pytest.raises(DataError):
        PatchCellCounts(0, 10, 8, 5)
    with pytest.raises(DataError):
        PatchCellCounts(0, 10, -1, 5)


def test_til_report_three_patients():
    raw = [0.4, 0.3, 0.2, 0.1]
    attention = {pid: AttentionMap.from_scores(raw) for pid in ("A", "B", "C")}
    frame = pd.DataFrame(
        [
            ("A", 0, 25, 12, 6), ("A", 1, 25, 10, 6), ("A", 2, 30, 20, 8),
            ("B", 0, 20, 11, 6), ("B", 1, 21, 11, 6),
            ("C", 0, 0, 0, 0), ("C", 1, 0, 0, 0),
        ],
        columns=["patient_id", "patch_id", "total", "lymphocytes", "tumor"],
    )
    table = RiskTable(("A", "B", "C"), [1.0, 2.0, 3.0], [5.0, 6.0, 7.0], [0, 0, 1])
    result, summary = til_report(attention, read_cell_counts(frame), table, 0.5)

    assert list(result.patient_id) == ["A", "B", "C"]
    np.testing.assert_allclose(result.til_fraction, [0.5, 0.5, 0.0])
    np.testing.assert_allclose(result.lymphocyte_fraction, [22 / 50, 22 / 41, 0.0])
    np.testing.assert_allclose(result.tumor_fraction, [12 / 50, 12 / 41, 0.0])
    assert list(result.group) == ["low", "middle", "high"]
    assert summary["group_sizes"] == {"low": 1, "high": 1}
    assert summary["tests"]["til_fraction"]["p"] is None
    assert summary["thresholds"]["strict"] is True


def test_til_report_mismatches(caplog):
    attention = {"A": AttentionMap.from_scores([0.5, 0.5])}
    counts = {"B": {0: PatchCellCounts(0, 1, 0, 0)}}
    table = RiskTable(("A",), [1.0], [1.0], [0])
    with pytest.raises(DataError):
        til_report(attention, counts, table)
    assert "mismatches" in caplog.text

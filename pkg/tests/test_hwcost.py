import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import check_gradients
from mmnas import hwcost as H
from mmnas.searchspace import (
    FUSION_OPS,
    BackboneGenome,
    BlockConfig,
    FusionMacroConfig,
    MultimodalGenome,
    SearchSpace,
    sample_uniform,
)
from mmnas.tensor import Tensor

TINY = SearchSpace(n_blocks=1, depths=(1, 2), kernels=(3,), expands=(3,))


def tiny_lut():
    layers = {(0, 0, 3, 3): (1.0, 10.0), (0, 1, 3, 3): (2.0, 20.0)}
    fusion = {op: (0.1 * (i + 1), 0.01 * (i + 1)) for i, op in enumerate(FUSION_OPS)}
    return H.DeviceLUT("tiny", layers, fusion)


def test_backbone_cost_sums_active_layers():
    g = BackboneGenome((BlockConfig(2, (3, 3), (3, 3)),))
    assert H.backbone_cost(g, tiny_lut()) == (3.0, 30.0)
    g1 = BackboneGenome((BlockConfig(1, (3, 3), (3, 3)),))
    assert H.backbone_cost(g1, tiny_lut()) == (1.0, 10.0)


def test_overheads_added_once_per_backbone():
    lut = H.DeviceLUT("o", tiny_lut().layer_costs, tiny_lut().fusion_costs, overheads=(0.5, 0.25))
    g = BackboneGenome((BlockConfig(1, (3, 3), (3, 3)),))
    assert H.backbone_cost(g, lut) == (1.5, 10.25)


def test_candidate_cost_is_pipeline_sum():
    lut = tiny_lut()
    a = BackboneGenome((BlockConfig(2, (3, 3), (3, 3)),), "a")
    b = BackboneGenome((BlockConfig(1, (3, 3), (3, 3)),), "b")
    genome = MultimodalGenome((a, b), FusionMacroConfig(1, 2))
    lat, en = H.candidate_cost(genome, ["Sum", "ConcatMish"], lut)
    assert lat == pytest.approx(3.0 + 1.0 + 0.1 + 0.6)
    assert en == pytest.approx(30.0 + 10.0 + 0.01 + 0.06)


def test_missing_entry_raises():
    g = BackboneGenome((BlockConfig(2, (5, 3), (3, 3)),))
    with pytest.raises(H.MissingCostError, match="k=5"):
        H.backbone_cost(g, tiny_lut())
    with pytest.raises(H.MissingCostError):
        tiny_lut().fusion("Max")


@pytest.mark.parametrize("p,d", [(0, 0), (1, 2)])
def test_one_hot_gamma_equals_discrete_cost(p, d):
    lut = H.synth_device(0, "fast-gpu")
    macro = FusionMacroConfig(2, 3)
    rng = np.random.default_rng(p + d)
    choice = rng.integers(len(FUSION_OPS), size=(2, 3))
    gamma = np.where(np.arange(6) == choice[..., None], 1e3, 0.0)
    ops = [FUSION_OPS[i] for i in choice.ravel()]
    for col, metric in enumerate(H.METRICS):
        relaxed = H.fusion_relaxed_cost(Tensor(gamma), macro, lut, metric).item()
        assert relaxed == H.fusion_ops_cost(ops, lut)[col]


def test_uniform_gamma_is_mean_of_ops():
    lut = H.synth_device(3, "slow-edge")
    for col, metric in enumerate(H.METRICS):
        relaxed = H.fusion_relaxed_cost(Tensor(np.zeros((1, 1, 6))), FusionMacroConfig(1, 1), lut, metric).item()
        mean = np.mean([lut.fusion(op)[col] for op in FUSION_OPS])
        assert relaxed == pytest.approx(mean, rel=1e-15)


def test_relaxed_cost_shape_and_metric_checks():
    lut = H.synth_device(0, "fast-gpu")
    with pytest.raises(ValueError):
        H.fusion_relaxed_cost(Tensor(np.zeros((1, 2, 6))), FusionMacroConfig(1, 1), lut, "latency")
    with pytest.raises(ValueError):
        H.fusion_relaxed_cost(Tensor(np.zeros((1, 1, 6))), FusionMacroConfig(1, 1), lut, "power")


def test_relaxed_cost_gradient():
    lut = H.synth_device(0, "fast-gpu")
    gamma = Tensor(np.random.default_rng(0).standard_normal((2, 2, 6)), requires_grad=True)
    assert check_gradients(lambda: H.fusion_relaxed_cost(gamma, FusionMacroConfig(2, 2), lut, "energy"), [gamma]) < 1e-4


def test_dense_cost_counts_every_op_at_every_node():
    lut = H.synth_device(0, "fast-gpu")
    lat, en = H.dense_fusion_cost(FusionMacroConfig(2, 3), lut)
    assert lat == pytest.approx(6 * H.fusion_ops_cost(FUSION_OPS, lut)[0])
    assert en == pytest.approx(6 * H.fusion_ops_cost(FUSION_OPS, lut)[1])


def test_synth_device_complete_deterministic_and_monotone():
    space = SearchSpace()
    a, b = H.synth_device(5, "fast-gpu", space), H.synth_device(5, "fast-gpu", space)
    assert a == b
    assert len(a.layer_costs) == space.n_blocks * space.max_depth * len(space.kernels) * len(space.expands)
    for (j, s, k, e), cost in a.layer_costs.items():
        for k2 in space.kernels:
            if k2 > k:
                assert all(np.greater(a.layer(j, s, k2, e), cost))
        for e2 in space.expands:
            if e2 > e:
                assert all(np.greater(a.layer(j, s, k, e2), cost))


def test_profiles_differ_only_by_scale():
    fast, slow = H.synth_device(1, "fast-gpu"), H.synth_device(1, "slow-edge")
    pf, ps = H.PROFILES["fast-gpu"], H.PROFILES["slow-edge"]
    key = (0, 0, 3, 3)
    assert slow.layer(*key)[0] / fast.layer(*key)[0] == pytest.approx(ps.latency_scale / pf.latency_scale)
    assert slow.layer(*key)[1] / fast.layer(*key)[1] == pytest.approx(ps.energy_scale / pf.energy_scale)
    with pytest.raises(ValueError):
        H.synth_device(1, "tpu")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16))
def test_backbone_cost_positive_and_additive(seed):
    rng = np.random.default_rng(seed)
    lut = H.synth_device(0, "fast-gpu")
    g = sample_uniform(SearchSpace(), rng)
    lat, en = H.backbone_cost(g, lut)
    expected = sum(lut.layer(j, s, b.kernels[s], b.expands[s])[0] for j, b in enumerate(g.blocks) for s in range(b.depth))
    assert lat == pytest.approx(expected + lut.overheads[0])
    assert lat > 0 and en > 0


def test_validate_rejects_bad_luts():
    good = tiny_lut()
    H.validate_lut(good, TINY)
    bad_cost = H.DeviceLUT("x", {**good.layer_costs, (0, 0, 3, 3): (-1.0, 1.0)}, good.fusion_costs)
    with pytest.raises(H.LUTFormatError):
        H.validate_lut(bad_cost)
    missing_op = H.DeviceLUT("x", good.layer_costs, {"Sum": (1.0, 1.0)})
    with pytest.raises(H.LUTFormatError, match="lacks"):
        H.validate_lut(missing_op)
    with pytest.raises(H.LUTFormatError, match="incomplete"):
        H.validate_lut(good, SearchSpace(n_blocks=1, depths=(1, 2), kernels=(3, 5), expands=(3,)))


def test_save_load_roundtrip(tmp_path):
    lut = H.synth_device(2, "slow-edge")
    H.save_lut(lut, tmp_path / "lut.json")
    assert H.load_lut(tmp_path / "lut.json", SearchSpace()) == lut


def test_load_rejects_malformed(tmp_path):
    path = tmp_path / "lut.json"
    path.write_text("{not json")
    with pytest.raises(H.LUTFormatError):
        H.load_lut(path)
    d = H.lut_to_dict(tiny_lut())
    path.write_text(json.dumps({**d, "version": 99}))
    with pytest.raises(H.LUTFormatError, match="version"):
        H.load_lut(path)
    d2 = dict(d)
    d2["layer_costs"] = d["layer_costs"] + d["layer_costs"][:1]
    path.write_text(json.dumps(d2))
    with pytest.raises(H.LUTFormatError, match="duplicate"):
        H.load_lut(path)
    d3 = dict(d)
    del d3["overheads"]
    path.write_text(json.dumps(d3))
    with pytest.raises(H.LUTFormatError):
        H.load_lut(path)

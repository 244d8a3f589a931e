import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import check_gradients
from mmnas import supernet as S
from mmnas import tensor as T
from mmnas.data import SyntheticTaskSpec, generate
from mmnas.searchspace import BackboneGenome, BlockConfig, SearchSpace, max_subnet, min_subnet, sample_uniform
from mmnas.tensor import Tensor

SPACE = SearchSpace(n_blocks=2, depths=(1, 2), kernels=(3, 5), expands=(1, 2))


def reference_forward(net, genome, x):
    """Subnet forward over standalone copies of the sliced weights."""
    p = {k: t.data.copy() for k, t in net.params.items()}
    key = lambda b, l, r: S.param_key(net.modality, b, l, r)
    kmax, cmax = net.space.max_kernel, net.base * net.space.max_expand
    h = T.relu(T.conv1d(Tensor(x), Tensor(p[key("stem", "-", "weight")]), Tensor(p[key("stem", "-", "bias")])))
    c_in = net.base
    feats = []
    for j, block in enumerate(genome.blocks):
        for s in range(block.depth):
            c_out, k = net.base * block.expands[s], block.kernels[s]
            start = (kmax - k) // 2
            w = p[key(f"block{j}", f"layer{s}", "weight")][:c_out, :c_in, start : start + k].copy()
            w = T.scale(Tensor(w), S.fan_in_scale(c_in, k, cmax, kmax))
            b = Tensor(p[key(f"block{j}", f"layer{s}", "bias")][:c_out].copy())
            h = T.add(T.scale(T.relu(T.conv1d(h, w, b)), S.BRANCH_SCALE), S.shortcut(h, c_out))
            c_in = c_out
        feats.append(h)
    hw = Tensor(p[key("head", "-", "weight")][:, :c_in].copy())
    hw = T.scale(hw, S.fan_in_scale(c_in, 1, cmax, 1))
    logits = T.add(T.matmul(T.mean(h, axis=2), T.transpose(hw)), Tensor(p[key("head", "-", "bias")]))
    return [f.data for f in feats], logits.data


@pytest.fixture(scope="module")
def trained():
    ds = generate(SyntheticTaskSpec(n_train=256, n_val=64, n_test=64), seed=0)
    net = S.ElasticSupernet("image", SPACE, base=4, seed=0)
    trace = S.train_supernet(net, ds.train.x["image"], ds.train.y, 8, settings=S.TrainSettings(batch_size=32, lr=3e-2))
    return net, ds, trace


def test_subnets_match_sliced_copies(trained):
    net, ds, _ = trained
    rng = np.random.default_rng(1)
    x = ds.val.x["image"][:8]
    for _ in range(10):
        g = sample_uniform(SPACE, rng, "image")
        feats, logits = net.forward(g, Tensor(x))
        ref_feats, ref_logits = reference_forward(net, g, x)
        np.testing.assert_array_equal(logits.data, ref_logits)
        for a, b in zip(feats, ref_feats):
            np.testing.assert_array_equal(a.data, b)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([3, 5, 7, 9]), st.data())
def test_kernel_crop_nested_idempotent(kmax, data):
    k1 = data.draw(st.sampled_from([k for k in (1, 3, 5, 7, 9) if k <= kmax]))
    k2 = data.draw(st.sampled_from([k for k in (1, 3, 5, 7, 9) if k <= k1]))
    w = np.arange(2 * 2 * kmax, dtype=float).reshape(2, 2, kmax)
    once = w[..., S.kernel_crop(kmax, k2)]
    twice = w[..., S.kernel_crop(kmax, k1)][..., S.kernel_crop(k1, k2)]
    np.testing.assert_array_equal(once, twice)
    np.testing.assert_array_equal(w[..., S.kernel_crop(kmax, kmax)], w)


def test_kernel_crop_centre_example():
    assert S.kernel_crop(7, 3) == slice(2, 5)
    assert S.layer_index(4, 2, 5, 7) == (slice(0, 4), slice(0, 2), slice(1, 6))


def test_fan_in_scale_and_shortcut():
    assert S.fan_in_scale(6, 7, 6, 7) == 1.0
    assert S.fan_in_scale(2, 3, 6, 7) == pytest.approx(np.sqrt(7.0))
    h = Tensor(np.arange(12, dtype=float).reshape(1, 3, 4))
    np.testing.assert_array_equal(S.shortcut(h, 2).data, h.data[:, :2])
    padded = S.shortcut(h, 5).data
    np.testing.assert_array_equal(padded[:, :3], h.data)
    np.testing.assert_array_equal(padded[:, 3:], 0.0)


def test_gradients_only_touch_the_active_slice():
    net = S.ElasticSupernet("image", SPACE, base=2, seed=0)
    g = min_subnet(SPACE, "image")
    x = Tensor(np.random.default_rng(0).standard_normal((3, 1, 8)))
    _, logits = net.forward(g, x)
    T.cross_entropy(logits, np.array([0, 1, 2])).backward()
    w = net.layer_weight(0, 0)
    mask = np.zeros_like(w.data, dtype=bool)
    mask[S.layer_index(2, 2, 3, 5)] = True
    assert np.all(w.grad[~mask] == 0)
    assert np.any(w.grad[mask] != 0)
    assert net.layer_weight(0, 1).grad is None or not net.layer_weight(0, 1).grad.any()


def test_subnet_forward_gradients():
    space = SearchSpace(n_blocks=1, depths=(1, 2), kernels=(1, 3), expands=(1, 2))
    net = S.ElasticSupernet("a", space, base=2, seed=3)
    rng = np.random.default_rng(1)
    # zero biases put some pre-activations exactly on the relu kink
    for key, t in net.params.items():
        if key.endswith("bias"):
            t.data = rng.normal(0, 0.5, size=t.shape)
    g = BackboneGenome((BlockConfig(2, (3, 1), (1, 2)),), "a")
    x = np.random.default_rng(0).standard_normal((2, 1, 5))
    loss = lambda: T.cross_entropy(net.forward(g, Tensor(x))[1], np.array([1, 3]))
    assert check_gradients(loss, net.parameters()) < 1e-4


def test_training_reduces_loss_and_learns_one_bit(trained):
    net, ds, trace = trained
    assert trace.epoch_losses[-1] < trace.epoch_losses[0]
    acc = S.evaluate_subnet(net, max_subnet(SPACE, "image"), ds.val.x["image"], ds.val.y)
    assert 0.35 < acc <= 0.65


def test_training_is_deterministic():
    ds = generate(SyntheticTaskSpec(n_train=32, n_val=1, n_test=1), seed=0)
    sums = []
    for _ in range(2):
        net = S.ElasticSupernet("audio", SPACE, base=2, seed=4)
        S.train_supernet(net, ds.train.x["audio"], ds.train.y, 1, settings=S.TrainSettings(batch_size=16, seed=2))
        sums.append(T.parameters_checksum(net.parameters()))
    assert sums[0] == sums[1]


def test_zero_epochs_and_errors():
    net = S.ElasticSupernet("image", SPACE, base=2)
    before = T.parameters_checksum(net.parameters())
    S.train_supernet(net, np.zeros((4, 1, 8)), np.zeros(4, dtype=int), 0)
    assert T.parameters_checksum(net.parameters()) == before
    with pytest.raises(ValueError):
        S.train_supernet(net, np.zeros((0, 1, 8)), np.zeros(0, dtype=int), 1)
    with pytest.raises(ValueError):
        S.SamplingPolicy(n_random=0, anchors=())
    with pytest.raises(ValueError):
        net.forward(max_subnet(SPACE, "audio"), Tensor(np.zeros((1, 1, 8))))
    with pytest.raises(ValueError):
        net.forward(max_subnet(SPACE, "image"), Tensor(np.zeros((1, 2, 8))))
    with pytest.raises(ValueError):
        S.evaluate_subnet(net, max_subnet(SPACE, "image"), np.zeros((0, 1, 8)), np.zeros(0))


def test_extract_features_shapes(trained):
    net, ds, _ = trained
    g = BackboneGenome((BlockConfig(1, (3, 5), (2, 1)), BlockConfig(2, (5, 3), (1, 2))), "image")
    maps, logits = S.extract_features(net, g, ds.val.x["image"], chunk=10)
    assert [m.values.shape for m in maps] == [(64, 8, 16), (64, 8, 16)]
    assert [m.source for m in maps] == [("image", 0), ("image", 1)]
    np.testing.assert_allclose(logits, net.logits(g, ds.val.x["image"]), rtol=1e-12, atol=1e-14)


def test_checkpoint_roundtrip(tmp_path, trained):
    net, ds, _ = trained
    other = S.ElasticSupernet("audio", SPACE, base=4, seed=9)
    S.save_supernets({"image": net, "audio": other}, tmp_path / "sn.npz")
    back = S.load_supernets(tmp_path / "sn.npz")
    assert sorted(back) == ["audio", "image"]
    g = max_subnet(SPACE, "image")
    np.testing.assert_array_equal(back["image"].logits(g, ds.val.x["image"]), net.logits(g, ds.val.x["image"]))
    with pytest.raises(FileNotFoundError):
        S.load_supernets(tmp_path / "missing.npz")

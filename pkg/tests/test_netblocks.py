import numpy as np
import pytest

from hpnseg.errors import ConfigurationError, DimensionError
from hpnseg.losses import cross_entropy_loss
from hpnseg.ndtensor import Tape, grad_eval, softmax_channels
from hpnseg.netblocks import PathConfig, SlotRef, block_order, build_single_path, forward_single

from helpers import central_fd, rel_error, relu_pattern


def expected_param_count(depth, base, k, n_classes, in_ch):
    # hand enumeration of the U layout: conv blocks, 2x2x2 upsamplers, skip concat, 1x1x1 head
    ch = [None] + [base * 2 ** (d - 1) for d in range(1, depth + 1)]
    total = ch[1] * in_ch * k**3 + ch[1]
    for d in range(2, depth + 1):
        total += ch[d] * ch[d - 1] * k**3 + ch[d]
    for d in range(depth - 1, 0, -1):
        total += ch[d + 1] * ch[d] * 8 + ch[d]
        total += ch[d] * (2 * ch[d]) * k**3 + ch[d]
    return total + n_classes * ch[1] + n_classes


class TestPathConfig:
    def test_channel_doubling(self):
        cfg = PathConfig(depth=4, base_channels=8)
        assert [cfg.channels(d) for d in range(1, 5)] == [8, 16, 32, 64]

    def test_depth_must_be_two_or_more(self):
        with pytest.raises(ConfigurationError):
            PathConfig(depth=1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            PathConfig(kernel=2)

    def test_indivisible_extent(self):
        with pytest.raises(DimensionError):
            PathConfig(depth=3).check_extents((32, 30, 32))

    def test_block_order(self):
        assert block_order(3) == ["enc1", "enc2", "enc3", "up2", "dec2", "up1", "dec1"]

    def test_slot_ref_round_trip(self):
        ref = SlotRef("B", "dec", 2)
        assert str(ref) == "B:dec:2"
        assert SlotRef.parse(str(ref)) == ref


class TestSinglePath:
    def test_logit_and_slot_shapes(self):
        net = build_single_path(PathConfig(depth=3, base_channels=8), 0)
        logits, feats = forward_single(net, np.zeros((1, 32, 32, 32)))
        assert logits.shape == (4, 32, 32, 32)
        assert feats[("enc", 1)].shape == (8, 32, 32, 32)
        assert feats[("enc", 2)].shape == (16, 16, 16, 16)
        assert feats[("enc", 3)].shape == (32, 8, 8, 8)
        for d in (1, 2):
            assert feats[("dec", d)].shape == feats[("enc", d)].shape

    @pytest.mark.parametrize("depth,base", [(2, 4), (3, 8), (4, 2)])
    def test_param_count(self, depth, base):
        net = build_single_path(PathConfig(depth=depth, base_channels=base), 0)
        assert net.n_params() == expected_param_count(depth, base, 3, 4, 1)

    def test_micro_param_count_value(self):
        assert build_single_path(PathConfig(depth=2, base_channels=4), 0).n_params() == 2132

    def test_same_seed_same_weights(self):
        cfg = PathConfig(depth=2, base_channels=4)
        a, b = build_single_path(cfg, 11), build_single_path(cfg, 11)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        c = build_single_path(cfg, 12)
        assert not np.array_equal(a.params["enc1.weight"].data, c.params["enc1.weight"].data)

    def test_glorot_bounds_and_zero_bias(self):
        cfg = PathConfig(depth=2, base_channels=4)
        net = build_single_path(cfg, 0)
        w = net.params["enc2.weight"].data
        bound = np.sqrt(6.0 / (4 * 27 + 8 * 27))
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.9 * bound
        assert all(not p.data.any() for n, p in net.params.items() if n.endswith(".bias"))

    def test_zero_weights_give_uniform_softmax(self):
        net = build_single_path(PathConfig(depth=2, base_channels=4), 0)
        for p in net.params.values():
            p.data[...] = 0
        logits, _ = forward_single(net, np.random.default_rng(0).normal(size=(1, 8, 8, 8)))
        assert not logits.data.any()
        np.testing.assert_allclose(softmax_channels(logits).data, 0.25)

    def test_extent_mismatch(self):
        net = build_single_path(PathConfig(depth=3, base_channels=2), 0)
        with pytest.raises(DimensionError):
            forward_single(net, np.zeros((1, 8, 8, 6)))
        with pytest.raises(DimensionError):
            forward_single(net, np.zeros((2, 8, 8, 8)))

    def test_gradient_through_path(self):
        cfg = PathConfig(depth=2, base_channels=2)
        net = build_single_path(cfg, 3)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 8, 8, 8))
        y = rng.integers(0, 4, size=(8, 8, 8))
        params = net.param_list()
        with Tape() as tape:
            loss = cross_entropy_loss(forward_single(net, x)[0], y)
        g = grad_eval(tape, loss, params)
        f = lambda: float(cross_entropy_loss(forward_single(net, x)[0], y))
        arrays = [p.data for p in params]
        pattern = lambda: relu_pattern(lambda: forward_single(net, x))
        numeric = central_fd(f, arrays, max_entries=12, rng=rng, pattern=pattern)
        probed = sum(int(np.isfinite(n).sum()) for n in numeric)
        assert probed >= 0.5 * sum(min(a.size, 12) for a in arrays)
        for p, n in zip(params, numeric):
            if np.isfinite(n).any():
                assert rel_error(g[p.name], n) < 1e-4, p.name

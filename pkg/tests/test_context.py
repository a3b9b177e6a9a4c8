import numpy as np
import pytest

from lgdet import tensor as T
from lgdet.config import ContextConfig
from lgdet.context import ChannelNorm, GlobalContext
from lgdet.gradcheck import check
from lgdet.tensor import Tensor


def make(rng, norm="batch"):
    return GlobalContext([3, 4, 4, 5], 6, ContextConfig(compressed_channels=4, global_channels=5), rng, norm)


def levels(rng, B=2):
    return [Tensor(rng.standard_normal((B, n, c))) for n, c in ((12, 3), (8, 4), (6, 4), (3, 5))]


class TestChannelNorm:
    def test_single_seed_is_mlp_output(self):
        rng = np.random.default_rng(0)
        cn = ChannelNorm(5, 6, rng).eval()
        x = Tensor(rng.standard_normal((2, 1, 5)))
        assert np.array_equal(cn(x).data, cn.mlp(x).data[:, 0])

    def test_duplicated_seeds_same_output(self):
        rng = np.random.default_rng(1)
        cn = ChannelNorm(5, 6, rng).eval()
        x = rng.standard_normal((2, 7, 5))
        assert np.array_equal(cn(Tensor(x)).data, cn(Tensor(np.concatenate([x, x], axis=1))).data)

    def test_against_map_then_max(self):
        rng = np.random.default_rng(2)
        cn = ChannelNorm(5, 6, rng, norm="none")
        x = rng.standard_normal((2, 7, 5))
        lin = cn.mlp.layers[0]
        ref = np.maximum(x @ lin.weight.data.T + lin.bias.data, 0.0).max(axis=1)
        assert np.abs(cn(Tensor(x)).data - ref).max() < 1e-12

    def test_empty_rejected(self):
        cn = ChannelNorm(5, 6, np.random.default_rng(3))
        with pytest.raises(ValueError):
            cn(Tensor(np.zeros((1, 0, 5))))


class TestGlobalContext:
    def test_permutation_invariance_of_g(self):
        rng = np.random.default_rng(4)
        m = make(rng).eval()
        lv = levels(rng)
        perm = [Tensor(t.data[:, rng.permutation(t.shape[1])]) for t in lv]
        assert np.array_equal(m.aggregate(lv).data, m.aggregate(perm).data)

    def test_g_is_per_scene_and_broadcast(self):
        rng = np.random.default_rng(5)
        m = make(rng).eval()
        pts = Tensor(rng.standard_normal((2, 9, 6)))
        fused, g = m(pts, levels(rng))
        assert g.shape == (2, 5) and fused.shape == (2, 9, 6)
        assert not np.array_equal(g.data[0], g.data[1])

    def test_fused_output_oracle(self):
        rng = np.random.default_rng(15)
        m = make(rng).eval()
        bn = m.fuse_norm
        bn._buffers["running_mean"][:] = rng.standard_normal(6)
        bn._buffers["running_var"][:] = rng.random(6) + 0.5
        bn.weight.data[:] = rng.random(6) + 0.5
        bn.bias.data[:] = rng.standard_normal(6)
        pts = Tensor(rng.standard_normal((2, 9, 6)))
        g = Tensor(rng.standard_normal((2, 5)))
        w, b = m.fuse.weight.data, m.fuse.bias.data
        h = pts.data @ w[:, :6].T + (g.data @ w[:, 6:].T)[:, None, :] + b
        h = (h - bn._buffers["running_mean"]) / np.sqrt(bn._buffers["running_var"] + 1e-5)
        ref = np.maximum(pts.data + h * bn.weight.data + bn.bias.data, 0.0)
        assert np.abs(m.fuse_global(pts, g).data - ref).max() < 1e-12

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_zero_fusion_passes_points_through(self, mode):
        rng = np.random.default_rng(6)
        m = make(rng)
        m = m.eval() if mode == "eval" else m
        m.fuse.weight.data[:] = 0.0
        pts = Tensor(np.abs(rng.standard_normal((2, 9, 6))))
        out = m.fuse_global(pts, Tensor(rng.standard_normal((2, 5))))
        assert np.array_equal(out.data, pts.data)

    def test_chain_gradients(self):
        rng = np.random.default_rng(7)
        m = make(rng)
        lv = levels(rng)
        pts = Tensor(rng.standard_normal((2, 9, 6)))
        w = Tensor(rng.standard_normal((2, 9, 6)))
        leaves = {"points": pts, **{f"level{i}": t for i, t in enumerate(lv)}, **dict(m.named_parameters())}
        errs = check(lambda: T.sum_(m(pts, lv)[0] * w), leaves, rng)
        assert max(errs.values()) < 1e-5

"""Layers and optimizer against straightforward numpy oracles."""

import numpy as np
import pytest

from pptts.nn import AdamW, Conv1d, Embedding, Linear, Module, ModuleList
from pptts.tensor import Tensor


def conv1d_oracle(x, weight, bias, kernel, stride, padding, pad_mode):
    """Direct triple-loop convolution oracle. [C_in, T] -> [C_out, T_out]."""
    c_in, t = x.shape
    if padding:
        if pad_mode == "zeros":
            x = np.pad(x, ((0, 0), (padding, padding)))
        else:
            x = np.concatenate([x[:, -padding:], x, x[:, :padding]], axis=1)
    t_pad = x.shape[1]
    c_out = weight.shape[0]
    t_out = (t_pad - kernel) // stride + 1
    out = np.zeros((c_out, t_out), dtype=x.dtype)
    for o in range(c_out):
        for pos in range(t_out):
            acc = bias[o]
            for i in range(c_in):
                for k in range(kernel):
                    acc += weight[o, i * kernel + k] * x[i, pos * stride + k]
            out[o, pos] = acc
    return out


class TestConv1d:
    @pytest.mark.parametrize(
        "kernel,stride,padding,pad_mode",
        [
            (1, 1, 0, "zeros"),
            (3, 1, 1, "zeros"),
            (5, 2, 2, "zeros"),
            (3, 1, 1, "circular"),
            (4, 3, 0, "zeros"),
        ],
    )
    def test_matches_oracle(self, kernel, stride, padding, pad_mode):
        rng = np.random.default_rng(0)
        conv = Conv1d(3, 2, kernel, stride=stride, padding=padding,
                      pad_mode=pad_mode, rng=rng, dtype=np.float64)
        x = rng.normal(size=(3, 11))
        got = conv(Tensor(x)).data
        want = conv1d_oracle(
            x, conv.weight.data, conv.bias.data, kernel, stride, padding, pad_mode
        )
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_zero_init(self):
        conv = Conv1d(2, 3, 3, padding=1, zero_init=True, dtype=np.float64)
        x = np.random.default_rng(1).normal(size=(2, 6))
        assert np.all(conv(Tensor(x)).data == 0.0)

    def test_rng_required_without_zero_init(self):
        with pytest.raises(ValueError):
            Conv1d(2, 3, 3)

    def test_bad_pad_mode(self):
        with pytest.raises(ValueError):
            Conv1d(2, 3, 3, pad_mode="reflect", rng=np.random.default_rng(0))

    def test_gradients_flow(self):
        rng = np.random.default_rng(2)
        conv = Conv1d(2, 2, 3, padding=1, rng=rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        conv(x).sum().backward()
        assert conv.weight.grad is not None
        assert conv.bias.grad is not None
        assert x.grad is not None


class TestLinear:
    def test_matches_matmul(self):
        rng = np.random.default_rng(3)
        lin = Linear(4, 3, rng=rng, dtype=np.float64)
        x = rng.normal(size=(4, 7))
        want = lin.weight.data @ x + lin.bias.data[:, None]
        np.testing.assert_allclose(lin(Tensor(x)).data, want, rtol=1e-12)


class TestEmbedding:
    def test_lookup(self):
        rng = np.random.default_rng(4)
        emb = Embedding(10, 5, rng=rng)
        ids = np.array([3, 3, 7])
        out = emb(ids)
        assert np.array_equal(out.data, emb.weight.data[ids])

    def test_out_of_range(self):
        emb = Embedding(4, 2, rng=np.random.default_rng(5))
        with pytest.raises(ValueError, match="out of range"):
            emb(np.array([4]))
        with pytest.raises(ValueError, match="out of range"):
            emb(np.array([-1]))

    def test_repeated_id_grads_accumulate(self):
        emb = Embedding(3, 2, rng=np.random.default_rng(6), dtype=np.float64)
        emb(np.array([1, 1])).sum().backward()
        assert np.allclose(emb.weight.grad[1], 2.0)
        assert np.allclose(emb.weight.grad[0], 0.0)


class TestModule:
    def test_named_parameters_dotted(self):
        class Net(Module):
            def __init__(self):
                super().__init__()
                rng = np.random.default_rng(7)
                self.first = Linear(2, 2, rng=rng)
                self.blocks = ModuleList([Linear(2, 2, rng=rng) for _ in range(2)])

        names = [n for n, _ in Net().named_parameters()]
        assert names == [
            "first.weight",
            "first.bias",
            "blocks.0.weight",
            "blocks.0.bias",
            "blocks.1.weight",
            "blocks.1.bias",
        ]

    def test_zero_grad(self):
        lin = Linear(2, 2, rng=np.random.default_rng(8), dtype=np.float64)
        lin(Tensor(np.ones((2, 3)))).sum().backward()
        assert lin.weight.grad is not None
        lin.zero_grad()
        assert lin.weight.grad is None and lin.bias.grad is None

    def test_parameter_dict(self):
        lin = Linear(2, 3, rng=np.random.default_rng(9))
        d = lin.parameter_dict()
        assert set(d) == {"weight", "bias"}


class TestAdamW:
    def test_hand_computed_step(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW([("layer.weight", w)], lr=0.1, betas=(0.9, 0.99),
                    eps=1e-8, weight_decay=0.1)
        w.grad = np.array([0.5])
        opt.step()
        m = 0.1 * 0.5
        v = 0.01 * 0.25
        mhat, vhat = m / 0.1, v / 0.01
        want = 1.0 - 0.1 * 0.1 * 1.0 - 0.1 * (mhat / (np.sqrt(vhat) + 1e-8))
        np.testing.assert_allclose(w.data, [want], rtol=1e-12)

    def test_two_steps_hand_computed(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW([("p.weight", w)], lr=0.01, betas=(0.9, 0.99), eps=1e-8)
        ref = 2.0
        m = v = 0.0
        for step, g in enumerate([0.3, -0.7], start=1):
            w.grad = np.array([g])
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.99 * v + 0.01 * g * g
            ref -= 0.01 * (m / (1 - 0.9**step)) / (
                np.sqrt(v / (1 - 0.99**step)) + 1e-8
            )
            np.testing.assert_allclose(w.data, [ref], rtol=1e-9)

    def test_bias_skips_weight_decay(self):
        b = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW([("layer.bias", b)], lr=0.1, weight_decay=0.5)
        b.grad = np.array([0.0])
        opt.step()
        # Zero grad means zero Adam update; decay must also be skipped.
        np.testing.assert_allclose(b.data, [1.0])

    def test_weight_gets_decay(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW([("layer.weight", w)], lr=0.1, weight_decay=0.5)
        w.grad = np.array([0.0])
        opt.step()
        np.testing.assert_allclose(w.data, [1.0 - 0.1 * 0.5])

    def test_none_grad_skipped(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW([("layer.weight", w)], lr=0.1, weight_decay=0.5)
        opt.step()
        np.testing.assert_allclose(w.data, [1.0])

    def test_duplicate_names_rejected(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError, match="duplicate"):
            AdamW([("a", w), ("a", w)])

    def test_state_dict_round_trip(self):
        rng = np.random.default_rng(10)
        w1 = Tensor(rng.normal(size=(3,)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(3,)), requires_grad=True)
        opt1 = AdamW([("x.weight", w1)], lr=0.05)
        for _ in range(3):
            w1.grad = rng.normal(size=(3,))
            opt1.step()
        state = opt1.state_dict()

        opt2 = AdamW([("x.weight", w2)], lr=0.05)
        opt2.load_state_dict(state)
        assert opt2.step_count == opt1.step_count
        np.testing.assert_array_equal(opt2._m["x.weight"], opt1._m["x.weight"])
        np.testing.assert_array_equal(opt2._v["x.weight"], opt1._v["x.weight"])

    def test_deterministic_updates(self):
        def run():
            rng = np.random.default_rng(11)
            w = Tensor(np.ones(4), requires_grad=True)
            opt = AdamW([("w.weight", w)], lr=0.01, weight_decay=0.01)
            for _ in range(5):
                w.grad = rng.normal(size=4)
                opt.step()
            return w.data.copy()

        assert np.array_equal(run(), run())

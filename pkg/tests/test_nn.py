import math

import numpy as np
import pytest
import torch
from helpers import check_all
from hypothesis import given, settings
from hypothesis import strategies as st

from concretegan.nn import (
    AdamState,
    ComponentParams,
    GradientBundle,
    NonFiniteError,
    adam_update,
    clip_gradients,
    grad,
    gru_step,
    gru_unroll,
    init_gru,
    init_linear,
    init_residual_mlp,
    linear,
    residual_mlp,
)

F64 = torch.float64


def gru_params(gen, in_dim=3, hidden=4):
    return ComponentParams("encoder", init_gru("g.", in_dim, hidden, gen, F64))


class TestGRU:
    def test_step_by_hand(self, gen):
        p = gru_params(gen)
        x = torch.randn(2, 3, generator=gen, dtype=F64)
        h = torch.randn(2, 4, generator=gen, dtype=F64)
        xh = torch.cat([x, h], dim=1)
        z = torch.sigmoid(xh @ p["g.W_z"] + p["g.b_z"])
        r = torch.sigmoid(xh @ p["g.W_r"] + p["g.b_r"])
        cand = torch.tanh(torch.cat([x, r * h], dim=1) @ p["g.W_h"] + p["g.b_h"])
        expected = (1 - z) * h + z * cand
        torch.testing.assert_close(gru_step(x, h, p, "g."), expected, rtol=0, atol=1e-14)

    def test_unroll_matches_steps(self, gen):
        p = gru_params(gen)
        xs = torch.randn(2, 5, 3, generator=gen, dtype=F64)
        h = torch.zeros(2, 4, dtype=F64)
        states = gru_unroll(xs, h, p, "g.")
        for t in range(5):
            h = gru_step(xs[:, t], h, p, "g.")
            torch.testing.assert_close(states[:, t], h, rtol=0, atol=1e-14)

    def test_shape_mismatch(self, gen):
        with pytest.raises(ValueError):
            gru_step(torch.zeros(2, 5, dtype=F64), torch.zeros(2, 4, dtype=F64), gru_params(gen), "g.")

    def test_fixed_point(self, gen):
        # zero input weights and biases keep h = 0 forever
        p = ComponentParams("encoder", {k: torch.zeros_like(v) for k, v in gru_params(gen).items()})
        assert gru_step(torch.ones(1, 3, dtype=F64), torch.zeros(1, 4, dtype=F64), p, "g.").abs().max() == 0

    def test_gradient(self, gen):
        p = gru_params(gen)
        xs = torch.randn(2, 3, 3, generator=gen, dtype=F64)
        w = torch.randn(2, 3, 4, generator=gen, dtype=F64)
        fn = lambda q: (gru_unroll(xs, torch.zeros(2, 4, dtype=F64), q, "g.") * w).sum()
        _, g = grad(fn, p)
        check_all(fn, p, g, 1e-4)


class TestMLP:
    def test_residual_form(self, gen):
        p = ComponentParams("encoder", init_residual_mlp("m.", 4, 1, gen, F64))
        x = torch.randn(3, 4, generator=gen, dtype=F64)
        pre = x @ p["m.W0"] + p["m.b0"]
        expected = torch.where(pre > 0, pre, 0.2 * pre) + x
        torch.testing.assert_close(residual_mlp(x, p, "m.", 1), expected, rtol=0, atol=1e-15)

    def test_zero_weights_identity(self, gen):
        p = ComponentParams("encoder", {k: torch.zeros_like(v) for k, v in init_residual_mlp("", 4, 3, gen, F64).items()})
        x = torch.randn(3, 4, generator=gen, dtype=F64)
        torch.testing.assert_close(residual_mlp(x, p, "", 3), x)

    def test_gradient(self, gen):
        t = init_residual_mlp("m.", 8, 2, gen, F64)
        t.update(init_linear("o.", 8, 1, gen, F64))
        p = ComponentParams("encoder", t)
        x = torch.randn(6, 8, generator=gen, dtype=F64)
        fn = lambda q: torch.tanh(linear(residual_mlp(x, q, "m.", 2), q, "o.")).sum()
        _, g = grad(fn, p)
        check_all(fn, p, g, 1e-4)

    def test_width_mismatch(self, gen):
        p = ComponentParams("encoder", init_residual_mlp("", 4, 1, gen, F64))
        with pytest.raises(ValueError):
            residual_mlp(torch.zeros(1, 5, dtype=F64), p, "", 1)


class TestGradContract:
    def test_unused_tensor_gets_zero(self):
        p = ComponentParams("encoder", {"a": torch.ones(2, dtype=F64), "b": torch.ones(3, dtype=F64)})
        _, g = grad(lambda q: (q["a"] ** 2).sum(), p)
        assert torch.equal(g["b"], torch.zeros(3, dtype=F64))
        torch.testing.assert_close(g["a"], torch.full((2,), 2.0, dtype=F64))

    def test_second_order(self):
        # d/da of ||d/dx (a x^2)||^2 at x = 1 is 8a
        p = ComponentParams("encoder", {"a": torch.tensor([1.5], dtype=F64)})
        x = torch.tensor([1.0], dtype=F64, requires_grad=True)

        def fn(q):
            (gx,) = torch.autograd.grad((q["a"] * x**2).sum(), x, create_graph=True)
            return (gx**2).sum()

        _, g = grad(fn, p)
        assert g["a"].item() == pytest.approx(8 * 1.5, abs=1e-12)

    def test_non_finite_loss(self):
        p = ComponentParams("code_generator", {"a": torch.ones(1, dtype=F64)})
        with pytest.raises(NonFiniteError) as info:
            grad(lambda q: q["a"].sum() * float("nan"), p)
        assert info.value.component == "code_generator"


class TestClipping:
    def bundle(self, values):
        return GradientBundle("encoder", {"a": torch.tensor(values, dtype=F64)})

    def test_below_threshold_untouched(self):
        g = self.bundle([3.0, 0.0])
        assert torch.equal(clip_gradients(g, 5.0)["a"], g["a"])

    def test_scaled_to_threshold(self):
        g = clip_gradients(self.bundle([30.0, 40.0]), 5.0)
        assert g.norm == pytest.approx(5.0, abs=1e-12)
        torch.testing.assert_close(g["a"], torch.tensor([3.0, 4.0], dtype=F64))

    def test_joint_norm(self):
        a, b = clip_gradients([self.bundle([6.0]), self.bundle([8.0])], 5.0)
        assert math.hypot(a.norm, b.norm) == pytest.approx(5.0)
        assert a["a"].item() == pytest.approx(3.0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(0.1, 10))
    @settings(max_examples=100, deadline=None)
    def test_idempotent(self, values, max_norm):
        once = clip_gradients(self.bundle(values), max_norm)
        twice = clip_gradients(once, max_norm)
        torch.testing.assert_close(once["a"], twice["a"], rtol=1e-12, atol=1e-12)
        assert once.norm <= max_norm * (1 + 1e-12)


class TestAdam:
    def test_first_step_is_sign_times_lr(self):
        p = ComponentParams("encoder", {"a": torch.tensor([1.0, -2.0, 0.5], dtype=F64)})
        g = GradientBundle("encoder", {"a": torch.tensor([0.3, -7.0, 1e-3], dtype=F64)})
        adam_update(p, g, 0.1, AdamState())
        expected = torch.tensor([0.9, -1.9, 0.4], dtype=F64)
        torch.testing.assert_close(p["a"].detach(), expected, rtol=0, atol=1e-6)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(4)
        p = ComponentParams("encoder", {"a": torch.tensor(w)})
        state = AdamState()
        m = v = np.zeros(4)
        for k in range(1, 6):
            gk = rng.standard_normal(4)
            adam_update(p, GradientBundle("encoder", {"a": torch.tensor(gk)}), 0.01, state)
            m = 0.9 * m + 0.1 * gk
            v = 0.999 * v + 0.001 * gk**2
            w = w - 0.01 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
        np.testing.assert_allclose(p["a"].detach().numpy(), w, rtol=0, atol=1e-14)

    def test_state_round_trip(self):
        p = ComponentParams("encoder", {"a": torch.ones(2, dtype=F64)})
        s = AdamState()
        adam_update(p, GradientBundle("encoder", {"a": torch.ones(2, dtype=F64)}), 0.1, s)
        s2 = AdamState.from_state_dict(s.state_dict())
        assert s2.step == 1 and torch.equal(s2.m["a"], s.m["a"])

    def test_tag_mismatch(self):
        p = ComponentParams("encoder", {"a": torch.ones(1, dtype=F64)})
        with pytest.raises(ValueError):
            adam_update(p, GradientBundle("decoder", {"a": torch.ones(1, dtype=F64)}), 0.1, AdamState())

    def test_non_finite_gradient_rejected(self):
        p = ComponentParams("encoder", {"a": torch.ones(1, dtype=F64)})
        before = p.digest()
        with pytest.raises(NonFiniteError):
            adam_update(p, GradientBundle("encoder", {"a": torch.tensor([float("inf")], dtype=F64)}), 0.1, AdamState())
        assert p.digest() == before


class TestComponentParams:
    def test_digest_tracks_values(self, gen):
        p = gru_params(gen)
        q = p.clone()
        assert p.digest() == q.digest()
        with torch.no_grad():
            q["g.b_z"][0] += 1e-12
        assert p.digest() != q.digest()

    def test_n_params(self, gen):
        assert gru_params(gen, 3, 4).n_params == 3 * (7 * 4 + 4)

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eibert.errors import InvalidLabelError, InvalidShapeError, StaleTapeError
from eibert.numerics import (GradTape, backward, cross_entropy, finite_diff_check, get_precision, kl_divergence,
                             mse, precision, set_precision, softmax_rows)
from eibert.model import build_model, run_forward

from conftest import random_batch, tiny_spec
from oracles import kl, softmax


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestSoftmax:
    def test_symmetric_and_shifted_pairs(self):
        assert softmax_rows(t([0.0, 0.0])).tolist() == [0.5, 0.5]
        assert softmax_rows(t([5.0, 5.0])).tolist() == [0.5, 0.5]

    def test_matches_direct_exponentiation(self):
        got = softmax_rows(t([1.0, 2.0, 3.0])).tolist()
        assert got == pytest.approx(softmax([1, 2, 3]), abs=1e-12)
        assert got == pytest.approx([0.0900, 0.2447, 0.6652], abs=1e-4)

    def test_large_logits_do_not_overflow(self):
        out = softmax_rows(t([[1000.0, 1000.0], [-1000.0, 0.0]]))
        assert torch.isfinite(out).all()
        assert out[0].tolist() == [0.5, 0.5]

    def test_empty_last_axis_rejected(self):
        with pytest.raises(InvalidShapeError):
            softmax_rows(torch.zeros(3, 0))

    @settings(max_examples=1000, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                  elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        out = softmax_rows(torch.as_tensor(x))
        assert np.allclose(out.sum(-1).numpy(), 1.0, atol=1e-6)
        assert (out >= 0).all() and (out <= 1).all()


class TestKL:
    def test_identical_distributions(self):
        assert float(kl_divergence(t([0.3, 0.7]), t([0.3, 0.7]))) == 0.0

    def test_against_direct_sum(self):
        assert float(kl_divergence(t([0.5, 0.5]), t([0.9, 0.1]))) == pytest.approx(kl([0.5, 0.5], [0.9, 0.1]), abs=1e-12)
        assert float(kl_divergence(t([0.5, 0.5]), t([0.9, 0.1]))) == pytest.approx(0.5108, abs=1e-4)

    def test_zero_mass_term_counts_as_zero(self):
        assert float(kl_divergence(t([1.0, 0.0]), t([0.5, 0.5]))) == pytest.approx(math.log(2), abs=1e-12)

    def test_floor_keeps_zero_q_finite(self):
        assert math.isfinite(float(kl_divergence(t([0.5, 0.5]), t([1.0, 0.0]))))

    def test_mean_over_rows(self):
        p = t([[0.5, 0.5], [1.0, 0.0]])
        q = t([[0.9, 0.1], [0.5, 0.5]])
        assert float(kl_divergence(p, q)) == pytest.approx((kl([0.5, 0.5], [0.9, 0.1]) + math.log(2)) / 2)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            kl_divergence(t([0.5, 0.5]), t([0.2, 0.3, 0.5]))

    @settings(max_examples=300, deadline=None)
    @given(arrays(np.float64, (2, 5), elements=st.floats(-20, 20)),
           arrays(np.float64, (2, 5), elements=st.floats(-20, 20)))
    def test_nonnegative_and_self_zero(self, a, b):
        p, q = softmax_rows(torch.as_tensor(a)), softmax_rows(torch.as_tensor(b))
        assert float(kl_divergence(p, q)) >= -1e-9
        assert float(kl_divergence(p, p)) == pytest.approx(0.0, abs=1e-12)


class TestMSE:
    def test_hand_values(self):
        assert float(mse(t([0.0, 0.0]), t([2.0, 0.0]))) == 2.0
        assert float(mse(t([1.0, 2.0]), t([2.0, 4.0]))) == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            mse(t([1.0]), t([1.0, 2.0]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
           arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
    def test_symmetric_nonnegative(self, a, b):
        a, b = torch.as_tensor(a), torch.as_tensor(b)
        assert float(mse(a, b)) == float(mse(b, a))
        assert float(mse(a, b)) >= 0
        assert float(mse(a, a)) == 0.0


class TestCrossEntropy:
    def test_uniform(self):
        assert float(cross_entropy(t([[0.0, 0.0]]), [1])) == pytest.approx(math.log(2))

    def test_saturated(self):
        assert float(cross_entropy(t([[20.0, -20.0]]), [0])) < 1e-6

    def test_direct_value(self):
        expected = -math.log(softmax([1, 2, 3])[2])
        assert float(cross_entropy(t([[1.0, 2.0, 3.0]]), [2])) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.4076, abs=1e-4)

    @pytest.mark.parametrize("label", [-1, 3])
    def test_label_range(self, label):
        with pytest.raises(InvalidLabelError):
            cross_entropy(t([[1.0, 2.0, 3.0]]), [label])


class TestGradTape:
    def test_square(self):
        w = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
        with GradTape({"w": w}) as tape:
            loss = w * w
        assert float(tape.gradient(loss)["w"]) == 6.0

    def test_constant_and_unreachable_are_zero(self):
        w = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        u = torch.tensor([5.0], dtype=torch.float64, requires_grad=True)
        with GradTape({"w": w, "u": u}) as tape:
            loss = (w * 0).sum() + 7.0
        g = tape.gradient(loss)
        assert g["w"].tolist() == [0.0, 0.0]
        assert g["u"].tolist() == [0.0]
        assert g["w"].shape == w.shape

    def test_consumed_tape_is_stale(self):
        w = torch.tensor(1.0, requires_grad=True)
        with GradTape({"w": w}) as tape:
            loss = w * 2
        backward(loss, tape)
        with pytest.raises(StaleTapeError):
            backward(loss, tape)

    def test_unrecorded_tape_is_stale(self):
        w = torch.tensor(1.0, requires_grad=True)
        with pytest.raises(StaleTapeError):
            backward(w * 2, GradTape({"w": w}))

    def test_modified_parameter_is_stale(self):
        w = torch.tensor(1.0, requires_grad=True)
        with GradTape({"w": w}) as tape:
            loss = w * w
        with torch.no_grad():
            w.add_(1.0)
        with pytest.raises(StaleTapeError):
            tape.gradient(loss)

    def test_deterministic(self, f64):
        m = build_model(tiny_spec())
        ids, mask = random_batch()
        params = dict(m.named_parameters())

        def grads():
            with GradTape(params) as tape:
                loss = cross_entropy(run_forward(m, ids, mask).logits, [0, 1, 2, 0])
            return tape.gradient(loss)

        a, b = grads(), grads()
        assert all(torch.equal(a[n], b[n]) for n in a)


class TestPrecision:
    def test_switch_and_restore(self):
        assert get_precision() == 32
        with precision(64):
            assert torch.zeros(1).dtype == torch.float64
        assert torch.zeros(1).dtype == torch.float32

    def test_rejects_other_widths(self):
        with pytest.raises(ValueError):
            set_precision(16)


class TestFiniteDifference:
    def test_quadratic(self, f64):
        w = torch.tensor([0.3, -1.2, 2.0], requires_grad=True)
        err = finite_diff_check(lambda: (w ** 2).sum() + 3 * w[0] * w[1], {"w": w}, 1e-4)
        assert err < 1e-7

    def _one_layer(self):
        m = build_model(tiny_spec(num_layers=1, vocab_size=12, max_seq_len=5, init_std=0.3))
        ids, mask = random_batch(vocab_size=12, batch=2, length=5, seed=1)
        return m, lambda: cross_entropy(run_forward(m, ids, mask).logits, [0, 2])

    def test_one_layer_model_32bit(self):
        m, loss_fn = self._one_layer()
        params = {n: p for n, p in m.named_parameters() if not n.startswith("token")}
        # 32-bit central differences drown near-zero gradients in rounding noise,
        # so probe the element with the largest gradient
        with GradTape(params) as tape:
            loss = loss_fn()
        g = tape.gradient(loss)
        name = max(g, key=lambda n: float(g[n].abs().max()))
        flat = params[name].view(-1)
        i = int(g[name].abs().view(-1).argmax())
        with torch.no_grad():
            orig = flat[i].item()
            flat[i] = orig + 1e-3
            up = float(loss_fn())
            flat[i] = orig - 1e-3
            down = float(loss_fn())
            flat[i] = orig
        central = (up - down) / 2e-3
        assert abs(central - float(g[name].view(-1)[i])) / abs(central) < 1e-3

    def test_one_layer_model_64bit(self, f64):
        m, loss_fn = self._one_layer()
        assert finite_diff_check(loss_fn, dict(m.named_parameters()), 1e-5) < 1e-5

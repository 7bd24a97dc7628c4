import numpy as np
import pytest

from diffmoe import tensor as T
from diffmoe.optim import AdamW
from diffmoe.rng import Rng
from diffmoe.tensor import Parameter, Tape, backward


def test_zero_grad_zero_decay_is_identity():
    p = Parameter(np.array([1.5, -2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_first_step_bias_corrected():
    p = Parameter(np.array([0.0]))
    opt = AdamW([p], lr=0.1)
    p.grad[...] = 1.0
    opt.step()
    # mhat = 1, vhat = 1 after bias correction: step of ~lr
    assert p.data[0] == pytest.approx(-0.1, abs=1e-6)


def test_decoupled_decay_only():
    p = Parameter(np.array([4.0]))
    opt = AdamW([p], lr=1.0, weight_decay=0.01)
    opt.step()  # grad is zero
    assert p.data[0] == pytest.approx(4.0 * 0.99)


def test_nonfinite_parameter_raises():
    p = Parameter(np.array([1.0]))
    opt = AdamW([p], lr=1.0)
    p.grad[...] = np.inf
    with pytest.raises(FloatingPointError):
        opt.step()


def test_training_determinism():
    # identical seeds give bit-identical parameters after N steps
    def run():
        rng = Rng(42)
        w = Parameter(rng.normal((4, 3)), "w")
        b = Parameter(np.zeros(4), "b")
        opt = AdamW([w, b], lr=1e-2, weight_decay=0.01)
        for _ in range(25):
            x = rng.normal((8, 3))
            y = rng.normal((8, 4))
            opt.zero_grad()
            with Tape():
                pred = T.dense(T.Tensor(x), w, b)
                backward(T.mean(T.square(T.sub(pred, T.Tensor(y)))))
            opt.step()
        return w.data.copy(), b.data.copy()

    w1, b1 = run()
    w2, b2 = run()
    assert np.array_equal(w1, w2)
    assert np.array_equal(b1, b2)

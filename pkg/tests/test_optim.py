import numpy as np

from vsm.optim import Adam
from vsm.tensor import Tensor


def test_adam_matches_reference_update(rng):
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    expected = p.data.copy()
    textbook = p.data.copy()
    opt = Adam({"p": p}, lr=0.01)
    m = v = np.zeros(4)
    for t in range(1, 4):
        g = rng.standard_normal(4)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g**2
        # eps added to sqrt(v) before the bias correction is folded into the step size
        expected -= 0.01 * np.sqrt(1 - 0.999**t) / (1 - 0.9**t) * m / (np.sqrt(v) + 1e-8)
        textbook -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-12)
        np.testing.assert_allclose(p.data, textbook, rtol=0, atol=1e-8)


def test_adam_skips_parameters_without_gradient():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"p": p}, lr=1.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 1.0])


def test_adam_state_round_trip(rng):
    p = Tensor(rng.standard_normal(3), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.ones(3)
    opt.step()
    other = Adam({"p": Tensor(p.data.copy(), requires_grad=True)}, lr=0.1)
    other.load_state_arrays(opt.state_arrays())
    for key, value in opt.state_arrays().items():
        np.testing.assert_array_equal(other.state_arrays()[key], value)

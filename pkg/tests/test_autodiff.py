import numpy as np
import pytest

from models import autodiff as ad
from models import nn
from models.errors import NonFiniteError
from models.model import make_lq
from models.solver_mfc import TrainConfig, control_architecture, loss_mfc

UNARY = ("sin", "cos", "tanh", "sigmoid", "atan", "exp_tanh", "scale", "square")
BINARY = ("add", "sub", "mul", "min", "max")


def _random_program(rng, n_ops=40):
    program = []
    for k in range(n_ops):
        available = k + 1
        if rng.random() < 0.5:
            program.append(("unary", UNARY[rng.integers(len(UNARY))], rng.integers(available)))
        else:
            a, b = rng.integers(available, size=2)
            program.append(("binary", BINARY[rng.integers(len(BINARY))], a, b))
    weights = rng.standard_normal(6)
    return program, weights


def _evaluate(program, weights, theta, tape=None):
    x = ad.lift(tape, theta, parameter=True) if tape is not None else theta
    values = [x]
    for op in program:
        if op[0] == "unary":
            v = values[op[2]]
            name = op[1]
            if name == "exp_tanh":
                out = ad.exp(ad.tanh(v))
            elif name == "scale":
                out = 0.7 * v
            elif name == "square":
                out = ad.tanh(v) * ad.tanh(v)
            else:
                out = getattr(ad, name)(v)
        else:
            a, b = values[op[2]], values[op[3]]
            fn = {"add": ad.add, "sub": ad.sub, "mul": ad.mul,
                  "min": ad.minimum, "max": ad.maximum}[op[1]]
            out = ad.tanh(fn(a, b))
        values.append(out)
    return ad.sum_(values[-1] * weights) + ad.mean(values[len(values) // 2])


def _central_difference(f, theta, h=1e-6):
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2.0 * h)
    return grad


def _relative_error(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def test_random_graphs_match_finite_differences():
    rng = np.random.default_rng(1234)
    for _ in range(50):
        program, weights = _random_program(rng)
        theta = rng.uniform(-1.0, 1.0, size=6)
        tape = ad.Tape()
        loss = _evaluate(program, weights, theta, tape)
        grad = ad.backward(tape, loss)
        numeric = _central_difference(
            lambda th: float(_evaluate(program, weights, th)), theta
        )
        # min/max kinks are measure zero for random inputs
        assert _relative_error(grad, numeric) < 1e-4


def test_untaped_and_taped_forward_values_agree():
    rng = np.random.default_rng(5)
    program, weights = _random_program(rng)
    theta = rng.uniform(-1.0, 1.0, size=6)
    tape = ad.Tape()
    taped = _evaluate(program, weights, theta, tape)
    assert float(taped.value) == pytest.approx(float(_evaluate(program, weights, theta)))


def test_mfc_sampled_loss_gradient_matches_finite_differences():
    model = make_lq()
    config = TrainConfig(batch=4, n_steps=3, hidden=(4,), activation="tanh")
    params = nn.init(control_architecture(model, config), seed=3)
    params = params.with_theta(params.theta + 0.1)
    seed = [7, 1]

    _, grad = loss_mfc(params, model, seed, config)
    numeric = _central_difference(
        lambda th: loss_mfc(params.with_theta(th), model, seed, config)[0], params.theta
    )
    assert _relative_error(grad, numeric) < 1e-4


def test_matmul_and_reductions_gradient():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))

    def f(flat, tape=None):
        a = flat.reshape(3, 4)
        if tape is not None:
            a = ad.lift(tape, a, parameter=True)
        h = ad.matmul(a, b)
        return ad.mean(ad.sum_(ad.sin(h), axis=-1) ** 2)

    tape = ad.Tape()
    grad = ad.backward(tape, f(a0.ravel(), tape))
    numeric = _central_difference(lambda th: float(f(th)), a0.ravel())
    assert _relative_error(grad, numeric) < 1e-6


def test_mean_over_particles_spreads_gradient_evenly():
    tape = ad.Tape()
    x = tape.parameter(np.arange(5.0).reshape(5, 1))
    loss = ad.sum_(ad.mean(x, axis=0))
    grad = ad.backward(tape, loss)
    assert np.allclose(grad, 0.2)


def test_getitem_accumulates_repeated_indices():
    tape = ad.Tape()
    x = tape.parameter(np.array([1.0, 2.0, 3.0]))
    loss = ad.sum_(x[np.array([0, 0, 2])])
    assert np.allclose(ad.backward(tape, loss), [2.0, 0.0, 1.0])


def test_concat_routes_gradients_to_each_part():
    tape = ad.Tape()
    a = tape.parameter(np.ones((2, 1)))
    b = tape.parameter(np.ones((2, 2)))
    loss = ad.sum_(ad.concat([a, 3.0 * b, np.zeros((2, 1))], axis=-1))
    grad_a, grad_b = ad.gradients(tape, loss)
    assert np.allclose(grad_a, 1.0)
    assert np.allclose(grad_b, 3.0)


def test_relu_gradient_at_zero_is_zero():
    tape = ad.Tape()
    x = tape.parameter(np.array([-1.0, 0.0, 2.0]))
    grad = ad.backward(tape, ad.sum_(ad.relu(x)))
    assert np.array_equal(grad, [0.0, 0.0, 1.0])


def test_minimum_tie_goes_to_first_argument():
    tape = ad.Tape()
    a = tape.parameter(np.array([1.0]))
    b = tape.parameter(np.array([1.0]))
    grad_a, grad_b = ad.gradients(tape, ad.sum_(ad.minimum(a, b)))
    assert grad_a[0] == 1.0
    assert grad_b[0] == 0.0


def test_clip_gradient_inside_closed_interval():
    tape = ad.Tape()
    x = tape.parameter(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]))
    grad = ad.backward(tape, ad.sum_(ad.clip(x, -1.0, 1.0)))
    assert np.array_equal(grad, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_parameter_slot_without_path_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.parameter(np.array([1.0, 2.0]))
    tape.parameter(np.array([5.0]))
    grad = ad.backward(tape, ad.sum_(x * x))
    assert np.array_equal(grad, [2.0, 4.0, 0.0])


def test_division_by_zero_on_tape_raises():
    tape = ad.Tape()
    x = tape.parameter(np.array([1.0]))
    with pytest.raises(NonFiniteError):
        ad.div(x, np.array([0.0]))


def test_overflow_raises_non_finite_error():
    tape = ad.Tape()
    x = tape.parameter(np.array([1000.0]))
    with pytest.raises(NonFiniteError) as exc:
        ad.exp(x)
    assert exc.value.kind == "exp"


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.parameter(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(tape, x * 2.0)


def test_untaped_inputs_return_plain_arrays():
    out = ad.tanh(np.array([0.0, 1.0]))
    assert isinstance(out, np.ndarray)
    assert not ad.is_var(ad.matmul(np.ones((2, 2)), np.ones((2, 1))))


def test_operands_from_different_tapes_rejected():
    a = ad.Tape().parameter(np.ones(2))
    b = ad.Tape().parameter(np.ones(2))
    with pytest.raises(ValueError):
        a + b


def test_numpy_array_on_the_left_defers_to_var():
    tape = ad.Tape()
    x = tape.parameter(np.ones(2))
    out = np.array([2.0, 3.0]) * x
    assert ad.is_var(out)
    assert np.allclose(ad.backward(tape, ad.sum_(out)), [2.0, 3.0])


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(5)
    tape = ad.Tape()
    theta = ad.lift(tape, rng.standard_normal(6), parameter=True)
    first = ad.sum_(ad.sin(theta) * theta)
    second = ad.mean(ad.tanh(theta) * ad.exp(0.5 * theta)) + ad.atan(ad.sum_(theta))
    a, b = 0.3, -1.7
    combined = a * first + b * second
    expected = a * ad.backward(tape, first) + b * ad.backward(tape, second)
    assert np.allclose(ad.backward(tape, combined), expected, rtol=0.0, atol=1e-12)


def test_repeated_backward_is_bit_identical():
    rng = np.random.default_rng(9)
    program, weights = _random_program(rng)
    tape = ad.Tape()
    loss = _evaluate(program, weights, rng.standard_normal(6), tape)
    assert np.array_equal(ad.backward(tape, loss), ad.backward(tape, loss))

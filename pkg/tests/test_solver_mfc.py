import dataclasses

import numpy as np
import pytest

from models import autodiff as ad
from models import nn
from models.errors import NonFiniteError, TrainingDivergedError, UnsupportedModelError
from models.model import build_preset, make_common_noise_lq, make_lq
from models.simulate import Ensemble, TimeGrid, draw_sample, rollout
from models.solver_mfc import (
    FeedbackControl,
    OptimizerConfig,
    OptimizerState,
    TrainConfig,
    TrainRecord,
    TrainTrace,
    control_architecture,
    evaluate_cost,
    l2_control_error,
    loss_mfc,
    make_control,
    sgd_step,
    train,
)


def small_config(**overrides):
    values = dict(
        iterations=30, batch=32, n_steps=5, eval_every=10, eval_batch=64, hidden=(8,),
        optimizer=OptimizerConfig(kind="adam", lr=0.01),
    )
    values.update(overrides)
    return TrainConfig(**values)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(kind="rmsprop")
    with pytest.raises(ValueError):
        OptimizerConfig(lr=0.0)


def test_step_decay_schedule():
    state = OptimizerState(OptimizerConfig(kind="step_decay", lr=1.0, factor=0.5, every=2))
    rates = []
    for _ in range(5):
        rates.append(state.learning_rate())
        state.step += 1
    assert rates == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_constant_sgd_step_moves_against_gradient():
    state = OptimizerState(OptimizerConfig(kind="constant", lr=0.1))
    updated = sgd_step(np.array([1.0, -1.0]), np.array([2.0, -4.0]), state)
    assert np.allclose(updated, [0.8, -0.6])
    assert state.step == 1


def test_first_adam_step_has_learning_rate_size():
    state = OptimizerState(OptimizerConfig(kind="adam", lr=0.01))
    updated = sgd_step(np.zeros(2), np.array([3.0, -0.2]), state)
    assert np.allclose(updated, [-0.01, 0.01], atol=1e-8)


def test_sgd_step_rejects_non_finite_gradient():
    state = OptimizerState(OptimizerConfig(kind="constant"))
    with pytest.raises(NonFiniteError):
        sgd_step(np.zeros(2), np.array([np.nan, 0.0]), state)


def test_sgd_step_keeps_net_params_type():
    params = nn.init(nn.Architecture((2, 3, 1)), seed=0)
    state = OptimizerState(OptimizerConfig(kind="constant", lr=1.0))
    updated = sgd_step(params, np.ones(params.arch.n_params), state)
    assert isinstance(updated, nn.NetParams)
    assert np.allclose(updated.theta, params.theta - 1.0)


def test_trace_iterations_strictly_increase():
    trace = TrainTrace()
    trace.append(TrainRecord(10, 1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        trace.append(TrainRecord(10, 1.0, 1.0, 1.0))
    assert trace.record_at(10).loss == 1.0
    assert trace.record_at(20) is None


def test_feedback_control_appends_common_noise_input():
    model = make_common_noise_lq()
    params = nn.init(control_architecture(model, small_config()), seed=0)
    control = make_control(params, model)
    assert isinstance(control, FeedbackControl)
    inputs = control.inputs(0.5, np.ones((4, 1)), cn=1.5)
    assert inputs.shape == (4, 3)
    assert np.all(inputs[:, 2] == 1.5)


def test_make_control_rejects_wrong_input_width():
    params = nn.init(nn.Architecture((3, 4, 1)), seed=0)
    with pytest.raises(ValueError):
        make_control(params, make_lq())


def test_train_records_every_eval_interval_and_is_deterministic():
    model = make_lq()
    config = small_config()
    params_a, trace_a = train(model, config)
    params_b, trace_b = train(model, config)
    assert [r.iteration for r in trace_a.records] == [10, 20, 30]
    assert np.array_equal(params_a.theta, params_b.theta)
    assert [r.eval_loss for r in trace_a.records] == [r.eval_loss for r in trace_b.records]


def test_training_lowers_the_evaluation_cost():
    model = make_lq()
    config = small_config(iterations=200, eval_every=50)
    initial = nn.init(control_architecture(model, config), config.seed)
    grid = config.grid(model.horizon)
    before = evaluate_cost(initial, model, grid, config.eval_batch, [config.eval_seed])
    params, trace = train(model, config)
    assert trace.last.eval_loss < before


def test_train_rejects_fbsde_presets():
    with pytest.raises(UnsupportedModelError):
        train(build_preset("systemic-risk"), small_config())


def test_train_wraps_divergence_with_partial_trace():
    model = dataclasses.replace(make_lq(), drift=lambda t, x, mu, a, cn: 1e9 * (x + a))
    with pytest.raises(TrainingDivergedError) as exc:
        train(model, small_config())
    assert exc.value.iteration == 1
    assert len(exc.value.trace) == 0


def test_train_writes_checkpoints(tmp_path):
    train(make_lq(), small_config(checkpoint_dir=str(tmp_path)))
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["control_000010.bin", "control_000020.bin", "control_000030.bin"]
    assert nn.load(tmp_path / files[-1]).arch.d_in == 2


def test_train_with_oracle_tracks_l2_error():
    model = make_lq()
    _, trace = train(model, small_config(iterations=10), oracle=lambda t, x: -x)
    assert trace.last.l2_error is not None
    assert trace.last.l2_error > 0.0


def test_l2_control_error_against_constant_oracle():
    model = make_lq()
    params = nn.init(control_architecture(model, small_config()), scheme="zeros")
    grid = TimeGrid(1.0, 4)
    assert l2_control_error(params, lambda t, x: 0.0 * x, model, grid, 16, 0) == 0.0
    error = l2_control_error(params, lambda t, x: np.ones_like(x), model, grid, 16, 0)
    assert error == pytest.approx(1.0)


def test_clamp_option_bounds_training_controls():
    model = make_lq()
    params, _ = train(model, small_config(iterations=5, eval_every=5, clamp=(-0.1, 0.1)))
    bounded = dataclasses.replace(model, clamp=(np.array([-0.1]), np.array([0.1])))
    assert evaluate_cost(params, bounded, TimeGrid(1.0, 5), 64, [0]) > 0.0


def test_train_wraps_divergence_during_evaluation():
    def sampler(rng, n):
        # training batches start at 0, the evaluation sample far outside the bound
        return np.zeros((n, 1)) if n == 32 else np.full((n, 1), 1e9)

    model = dataclasses.replace(make_lq(), init_sampler=sampler)
    with pytest.raises(TrainingDivergedError) as exc:
        train(model, small_config())
    assert exc.value.iteration == 10
    assert len(exc.value.trace) == 0


def test_sampled_loss_is_invariant_under_particle_permutation():
    model = make_common_noise_lq()
    config = small_config()
    params = nn.init(control_architecture(model, config), seed=2)
    grid = config.grid(model.horizon)
    ensemble, noise = draw_sample(model, grid, 32, [5, 1])
    order = np.random.default_rng(0).permutation(32)
    permuted_noise = dataclasses.replace(noise, increments=noise.increments[:, order])
    base = rollout(model, make_control(params, model), ensemble, noise, grid)
    permuted = rollout(
        model, make_control(params, model), Ensemble(ensemble.states[order]), permuted_noise, grid
    )
    assert permuted.total_cost == pytest.approx(base.total_cost, rel=1e-12)


def test_small_descent_step_lowers_the_sampled_loss():
    model = make_lq()
    config = small_config()
    params = nn.init(control_architecture(model, config), seed=4)
    seed = [3, 1]
    loss, grad = loss_mfc(params, model, seed, config)
    lr = 0.1
    for _ in range(20):
        state = OptimizerState(OptimizerConfig(kind="constant", lr=lr))
        new_loss, _ = loss_mfc(sgd_step(params, grad, state), model, seed, config)
        if new_loss < loss:
            break
        lr /= 2.0
    assert new_loss < loss


def test_zero_cost_model_has_zero_loss_and_gradient():
    model = dataclasses.replace(
        make_lq(),
        running_cost=lambda t, x, mu, a, cn: ad.sum_(0.0 * x, axis=-1),
        terminal_cost=lambda x, mu, cn: ad.sum_(0.0 * x, axis=-1),
    )
    config = small_config()
    params = nn.init(control_architecture(model, config), seed=1)
    loss, grad = loss_mfc(params, model, [0, 1], config)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_quadratic_control_cost_is_stationary_at_the_zero_control():
    model = dataclasses.replace(
        make_lq(),
        running_cost=lambda t, x, mu, a, cn: ad.sum_(a * a, axis=-1),
        terminal_cost=lambda x, mu, cn: ad.sum_(0.0 * x, axis=-1),
    )
    config = small_config()
    params = nn.init(control_architecture(model, config), scheme="zeros")
    loss, grad = loss_mfc(params, model, [0, 1], config)
    assert loss == 0.0
    assert np.all(grad == 0.0)

import dataclasses

import numpy as np
import pytest

from models import autodiff as ad
from models import nn
from models.errors import TrainingDivergedError, UnsupportedModelError
from models.model import make_atan_mfg, make_lq, make_sincos_fbsde, make_systemic_risk
from models.simulate import TimeGrid, draw_sample
from models.solver_fbsde import (
    evaluate_fbsde,
    fbsde_rollout,
    loss_fbsde,
    network_architectures,
    train_fbsde,
    y0_estimate,
    y0_vs_rho_curve,
)
from models.solver_mfc import OptimizerConfig, TrainConfig


def small_config(**overrides):
    values = dict(
        iterations=20, batch=32, n_steps=5, eval_every=10, eval_batch=64, hidden=(8,),
        activation="tanh", optimizer=OptimizerConfig(kind="adam", lr=0.01),
    )
    values.update(overrides)
    return TrainConfig(**values)


def nets_for(spec, config, seed=0):
    y0_arch, z_arch = network_architectures(spec, config)
    return nn.init(y0_arch, seed), nn.init(z_arch, seed + 1)


def test_network_shapes_follow_noise_dimension():
    y0_arch, z_arch = network_architectures(make_systemic_risk(), small_config())
    assert (y0_arch.d_in, y0_arch.d_out) == (1, 1)
    assert (z_arch.d_in, z_arch.d_out) == (2, 2)


def test_rollout_shapes_and_initial_value():
    spec = make_sincos_fbsde(rho=0.5)
    config = small_config()
    y0_net, z_net = nets_for(spec, config)
    grid = TimeGrid(1.0, 5)
    result = evaluate_fbsde(y0_net, z_net, spec, grid, 16, 0)
    assert result.X.shape == (6, 16, 1)
    assert result.Y.shape == (6, 16, 1)
    assert result.mismatch.shape == (16,)
    assert np.allclose(result.Y[0], nn.forward(y0_net, np.array([1.0]))[0])
    assert result.loss == pytest.approx(float(np.mean(result.mismatch)))


def test_rollout_rejects_mismatched_networks():
    spec = make_sincos_fbsde()
    config = small_config()
    y0_net, z_net = nets_for(spec, config)
    grid = TimeGrid(1.0, 5)
    ensemble, noise = draw_sample(spec, grid, 4, 0)
    with pytest.raises(ValueError):
        fbsde_rollout(spec, z_net, z_net, ensemble, noise, grid)


def test_systemic_rollout_uses_common_noise_column():
    spec = make_systemic_risk(rho=0.5)
    config = small_config()
    y0_net, z_net = nets_for(spec, config)
    result = evaluate_fbsde(y0_net, z_net, spec, TimeGrid(1.0, 4), 8, 3)
    assert result.common_levels.shape == (5,)
    assert np.isfinite(result.loss)


def test_shooting_loss_gradient_matches_finite_differences():
    spec = make_atan_mfg(rho=0.5)
    config = small_config(batch=4, n_steps=3, hidden=(3,))
    y0_net, z_net = nets_for(spec, config, seed=2)
    split = y0_net.arch.n_params
    theta = np.concatenate([y0_net.theta, z_net.theta])

    def value(th):
        return loss_fbsde(
            y0_net.with_theta(th[:split]), z_net.with_theta(th[split:]), spec, [5, 1], config
        )[0]

    _, grad = loss_fbsde(y0_net, z_net, spec, [5, 1], config)
    h = 1e-6
    numeric = np.array(
        [(value(theta + h * e) - value(theta - h * e)) / (2 * h) for e in np.eye(theta.size)]
    )
    assert np.max(np.abs(grad - numeric)) / max(1.0, np.max(np.abs(numeric))) < 1e-4


def test_mean_of_backward_state_enters_the_graph():
    tape = ad.Tape()
    y = tape.parameter(np.ones((3, 1)))
    loss = ad.sum_(ad.mean(y, axis=0) * 2.0)
    assert np.allclose(ad.backward(tape, loss), 2.0 / 3.0)


def test_training_reduces_terminal_mismatch():
    spec = make_sincos_fbsde(rho=0.0)
    config = small_config(iterations=200, eval_every=50)
    y0_net, z_net = nets_for(spec, config)
    grid = config.grid(spec.horizon)
    before = evaluate_fbsde(y0_net, z_net, spec, grid, config.eval_batch, [config.eval_seed])
    y0_trained, _, trace = train_fbsde(spec, config, initial=(y0_net, z_net))
    assert [r.iteration for r in trace.records] == [50, 100, 150, 200]
    assert trace.last.eval_loss < before.loss
    assert trace.last.l2_error is None
    assert np.isfinite(y0_estimate(y0_trained, spec))


def test_train_fbsde_is_deterministic():
    spec = make_atan_mfg()
    first = train_fbsde(spec, small_config())
    second = train_fbsde(spec, small_config())
    assert np.array_equal(first[0].theta, second[0].theta)
    assert np.array_equal(first[1].theta, second[1].theta)


def test_train_fbsde_rejects_control_models():
    with pytest.raises(UnsupportedModelError):
        train_fbsde(make_lq(), small_config())


def test_y0_estimate_averages_over_random_start():
    spec = make_systemic_risk()
    params = nn.init(network_architectures(spec, small_config())[0], scheme="zeros")
    assert y0_estimate(params, spec) == 0.0


def test_rho_curve_keeps_failed_points():
    def family(rho):
        spec = make_sincos_fbsde(rho=rho)
        if rho > 1.0:
            return dataclasses.replace(spec, drift=lambda t, x, mu, y, cn: 1e12 + 0.0 * y)
        return spec

    curve = y0_vs_rho_curve(family, [0.0, 5.0], small_config(iterations=5, eval_every=5))
    assert [p.rho for p in curve] == [0.0, 5.0]
    assert curve[0].error is None and np.isfinite(curve[0].y0)
    assert curve[1].error is not None and np.isnan(curve[1].y0)


def test_rho_curve_needs_deterministic_start():
    with pytest.raises(ValueError):
        y0_vs_rho_curve(lambda rho: make_systemic_risk(rho=rho), [0.1], small_config())


def test_rho_curve_parallel_matches_serial():
    config = small_config(iterations=5, eval_every=5)
    serial = y0_vs_rho_curve(make_sincos_fbsde, [0.0, 0.5], config)
    parallel = y0_vs_rho_curve(make_sincos_fbsde, [0.0, 0.5], config, workers=2)
    assert [p.y0 for p in serial] == [p.y0 for p in parallel]


def linear_net(d_in, bias, weights):
    arch = nn.Architecture((d_in, 1))
    return nn.NetParams(arch, np.concatenate([[bias], weights]))


def test_replicating_backward_state_has_zero_loss_and_gradient():
    spec = dataclasses.replace(
        make_sincos_fbsde(rho=0.0, sigma=1.0), terminal=lambda x, mu, cn: x
    )
    y0_net = linear_net(1, 0.0, [1.0])
    z_net = linear_net(2, 1.0, [0.0, 0.0])
    config = small_config()
    loss, grad = loss_fbsde(y0_net, z_net, spec, [2, 1], config)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_constant_initial_value_without_volatility_is_kept():
    spec = make_sincos_fbsde(rho=0.3)
    y0_net = linear_net(1, 0.4, [0.0])
    z_net = linear_net(2, 0.0, [0.0, 0.0])
    result = evaluate_fbsde(y0_net, z_net, spec, TimeGrid(1.0, 6), 20, 0)
    assert np.all(result.Y[-1] == 0.4)


def test_training_loss_equals_mismatch_recomputed_from_paths():
    spec = make_atan_mfg(rho=0.5)
    config = small_config()
    y0_net, z_net = nets_for(spec, config)
    loss, _ = loss_fbsde(y0_net, z_net, spec, [4, 3], config)
    result = evaluate_fbsde(y0_net, z_net, spec, config.grid(spec.horizon), config.batch, [4, 3])
    x_T, y_T = result.X[-1], result.Y[-1]
    recomputed = float(np.mean(np.sum((y_T - np.arctan(x_T)) ** 2, axis=-1)))
    assert loss == pytest.approx(recomputed, abs=1e-10)
    assert result.loss == pytest.approx(recomputed, abs=1e-10)


def test_uncoupled_forward_state_is_a_scaled_brownian_motion():
    spec = make_sincos_fbsde(rho=0.0, sigma=0.7, x0=0.5)
    config = small_config()
    y0_net, z_net = nets_for(spec, config)
    grid = TimeGrid(1.0, 8)
    ensemble, noise = draw_sample(spec, grid, 30, 9)
    result = fbsde_rollout(spec, y0_net, z_net, ensemble, noise, grid)
    expected = 0.5 + 0.7 * noise.increments[:, :, 0].sum(axis=0)
    assert np.allclose(result.X[-1][:, 0], expected, rtol=0.0, atol=1e-12)


def test_train_fbsde_wraps_divergence_during_evaluation():
    def sampler(rng, n):
        # training batches start at 0, the evaluation sample far outside the bound
        return np.zeros((n, 1)) if n == 32 else np.full((n, 1), 1e9)

    spec = dataclasses.replace(make_sincos_fbsde(rho=0.0), x0=None, x0_sampler=sampler)
    with pytest.raises(TrainingDivergedError) as exc:
        train_fbsde(spec, small_config())
    assert exc.value.iteration == 10
    assert len(exc.value.trace) == 0

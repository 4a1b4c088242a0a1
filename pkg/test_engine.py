# test_engine.py - Training loop behaviour, invariants and determinism
import math

import numpy as np
import pytest

from analysis import corollary2_bound
from config import DownlinkConfig, Schedule, StreamLabel, TiePolicy, fork_rng
from engine import (
    DivergenceError,
    cloud_aggregate,
    run_algorithm,
    run_hier_sgd,
    run_hier_signsgd,
    run_hier_signsgd_quantized_downlink,
)
from model import GradientEstimate, ModelParams, VectorShape, load_params, params_digest

from conftest import quadratic


def params(*values):
    return ModelParams(np.array(values, dtype=np.float64), VectorShape(len(values)))


# === CLOUD AGGREGATION ===
def test_cloud_aggregate_fixed_points():
    u = params(0.1, -0.3, 7.25)
    assert np.array_equal(cloud_aggregate([u, u, u], (0.2, 0.3, 0.5)).values, u.values)
    neg = params(-0.1, 0.3, -7.25)
    assert not cloud_aggregate([u, neg], (0.5, 0.5)).values.any()
    assert np.array_equal(cloud_aggregate([u, neg], (1.0, 0.0)).values, u.values)


def test_cloud_aggregate_weighted_mean():
    out = cloud_aggregate([params(0.0, 4.0), params(2.0, 0.0)], (0.25, 0.75))
    np.testing.assert_allclose(out.values, [1.5, 1.0])


def test_cloud_aggregate_errors():
    with pytest.raises(ValueError):
        cloud_aggregate([params(1.0), params(1.0, 2.0)], (0.5, 0.5))
    with pytest.raises(ValueError):
        cloud_aggregate([params(1.0), params(2.0)], (0.5, 0.6))
    with pytest.raises(ValueError):
        cloud_aggregate([], ())


# === SIGN TRAINING ===
def test_noiseless_sign_descent_moves_by_mu_then_oscillates():
    obj = quadratic(d=5, noise_std=0.0)
    mu = 0.01
    votes = []
    run_hier_signsgd(obj, Schedule(global_rounds=1, edge_rounds=800, step_size=mu, batch_size=1),
                     on_vote=lambda t, tau, q, s: votes.append(s.signs.copy()))
    signs = np.array(votes, dtype=np.float64)
    position = -mu * np.cumsum(signs, axis=0)
    for i, target in enumerate(obj.optimum):
        # The model starts at zero, so every early step heads toward the optimum.
        approach = int(abs(target) / mu)
        assert np.all(-signs[:max(approach - 1, 0), i] == np.sign(target))
        settled = int(np.ceil(abs(target) / mu))
        assert np.all(np.abs(position[settled:, i] - target) <= mu + 1e-9)


def test_zero_step_size_keeps_model_constant():
    obj = quadratic(d=6, noise_std=1.0, devices=((1, 1), (1,)))
    logs = run_hier_signsgd(obj, Schedule(global_rounds=3, edge_rounds=4, step_size=0.0, batch_size=2))
    assert len(logs) == 4
    assert len({log.model_hash for log in logs}) == 1


def test_round_log_cadence_and_bits():
    obj = quadratic(d=10, noise_std=0.5, devices=((1, 1, 1), (1, 1)))
    schedule = Schedule(global_rounds=3, edge_rounds=4, step_size=0.01, batch_size=2)
    logs = run_hier_signsgd(obj, schedule)
    assert [log.t for log in logs] == [0, 1, 2, 3]
    assert logs[0].uplink_bits == 0
    assert logs[0].downlink_bits == 2 * 32 * 10
    assert all(log.uplink_bits == 5 * 4 * 10 for log in logs[1:])
    assert logs[1].downlink_bits == 2 * 4 * 10
    assert logs[2].downlink_bits == 2 * (32 * 10 + 4 * 10)
    assert all(isinstance(log.uplink_bits, int) for log in logs)


def test_telescoping_update_matches_logged_votes():
    obj = quadratic(d=7, noise_std=1.0, devices=((1, 1, 1), (1,), (1, 1)))
    hierarchy = obj.hierarchy
    mu = 0.02
    models, votes = {}, {}
    run_hier_signsgd(obj, Schedule(global_rounds=3, edge_rounds=5, step_size=mu, batch_size=3),
                     on_round=lambda t, w: models.__setitem__(t, w.values.copy()),
                     on_vote=lambda t, tau, q, s: votes.setdefault(t, []).append((q, s.as_float())))
    for t in range(3):
        expected = -mu * sum(hierarchy.edge_weights[q] * s for q, s in votes[t])
        np.testing.assert_allclose(models[t + 1] - models[t], expected, atol=1e-12)
        assert np.max(np.abs(models[t + 1] - models[t])) <= mu * 5 + 1e-12


def test_per_step_bound_and_replica_agreement():
    obj = quadratic(d=9, noise_std=2.0, devices=((1, 1, 1, 1), (1, 1)))
    seen = []
    run_hier_signsgd(obj, Schedule(global_rounds=2, edge_rounds=6, step_size=0.05, batch_size=1,
                                   tie_policy=TiePolicy.RANDOM),
                     on_vote=lambda t, tau, q, s: seen.append(np.abs(s.as_float()).max()),
                     consistency_checks=True)
    assert max(seen) <= 1.0
    assert len(seen) == 2 * 6 * 2


def test_zero_tie_policy_allows_ternary_steps():
    obj = quadratic(d=9, noise_std=2.0, devices=((1, 1),))
    zeros = []
    run_hier_signsgd(obj, Schedule(global_rounds=1, edge_rounds=20, step_size=0.05, batch_size=1,
                                   tie_policy=TiePolicy.ZERO),
                     on_vote=lambda t, tau, q, s: zeros.append(int((s.signs == 0).sum())))
    assert sum(zeros) > 0


@pytest.mark.parametrize("runner", ["hier_signsgd", "hier_sgd", "hier_signsgd_quantized"])
def test_determinism_across_worker_counts(runner):
    obj = quadratic(d=12, noise_std=1.0, devices=((1, 1, 1), (1, 1), (1, 1, 1, 1)))
    schedule = Schedule(global_rounds=3, edge_rounds=3, step_size=0.03, batch_size=2, rng_seed=9)
    downlink = DownlinkConfig(enabled=True, active_components=5)
    one = run_algorithm(runner, obj, schedule, downlink=downlink, workers=1)
    many = run_algorithm(runner, obj, schedule, downlink=downlink, workers=8)
    assert [log.model_hash for log in one] == [log.model_hash for log in many]
    assert [log.train_loss for log in one] == [log.train_loss for log in many]


def test_seeds_change_trajectories():
    obj = quadratic(d=6, noise_std=1.0, devices=((1, 1, 1),))
    a = run_hier_signsgd(obj, Schedule(global_rounds=2, edge_rounds=3, step_size=0.1, batch_size=1, rng_seed=0))
    b = run_hier_signsgd(obj, Schedule(global_rounds=2, edge_rounds=3, step_size=0.1, batch_size=1, rng_seed=1))
    assert a[-1].model_hash != b[-1].model_hash


def test_nan_gradient_names_round_step_and_edge():
    class Exploding:
        def __init__(self, inner):
            self.inner = inner
            self.hierarchy = inner.hierarchy
            self.dimension = inner.dimension

        def init_params(self, rng):
            return self.inner.init_params(rng)

        def device_gradient(self, values, q, k, batch_size, rng):
            grad = self.inner.device_gradient(values, q, k, batch_size, rng).values.copy()
            if q == 1:
                grad[0] = np.nan
            return GradientEstimate(grad)

        def edge_gradient(self, values, q):
            return self.inner.edge_gradient(values, q)

        def global_gradient(self, values, rng):
            return self.inner.global_gradient(values, rng)

        def evaluate(self, values):
            return self.inner.evaluate(values)

    obj = Exploding(quadratic(d=4, devices=((1,), (1,))))
    with pytest.raises(DivergenceError) as info:
        run_hier_signsgd(obj, Schedule(global_rounds=2, edge_rounds=2, step_size=0.1, batch_size=1))
    assert (info.value.t, info.value.tau, info.value.edge) == (0, 0, 1)


# === BASELINE ===
def test_hier_sgd_single_device_is_plain_sgd():
    obj = quadratic(d=5, noise_std=0.3)
    mu, rounds, batch, seed = 0.1, 6, 4, 2
    trajectory = []
    logs = run_hier_sgd(obj, Schedule(global_rounds=rounds, edge_rounds=1, step_size=mu, batch_size=batch, rng_seed=seed),
                        on_round=lambda t, w: trajectory.append(w.values.copy()))
    w = np.zeros(5)
    for t in range(rounds):
        g = obj.device_gradient(w, 0, 0, batch, fork_rng(seed, StreamLabel("batch", t, 0, 0, 0))).values
        w = w - mu * g
        np.testing.assert_allclose(trajectory[t + 1], w, rtol=0, atol=1e-14)
    assert len(logs) == rounds + 1


def test_hier_sgd_equal_shards_use_unweighted_mean():
    obj = quadratic(d=4, noise_std=0.0, devices=((1, 1),))
    trajectory = []
    run_hier_sgd(obj, Schedule(global_rounds=1, edge_rounds=1, step_size=0.5, batch_size=1),
                 on_round=lambda t, w: trajectory.append(w.values.copy()))
    expected = -0.5 * obj.global_gradient(np.zeros(4))
    np.testing.assert_allclose(trajectory[1], expected)


def test_hier_sgd_bits_are_32_per_coordinate():
    obj = quadratic(d=3, devices=((1, 1),))
    logs = run_hier_sgd(obj, Schedule(global_rounds=1, edge_rounds=2, step_size=0.1, batch_size=1))
    assert logs[1].uplink_bits == 2 * 2 * 32 * 3


# === QUANTIZED DOWNLINK ===
def test_full_downlink_matches_unquantized_run():
    obj = quadratic(d=10, noise_std=1.0, devices=((1, 1, 1), (1, 1)))
    schedule = Schedule(global_rounds=4, edge_rounds=3, step_size=0.05, batch_size=2, rng_seed=4)
    plain = run_hier_signsgd(obj, schedule)
    quantized = run_hier_signsgd_quantized_downlink(obj, schedule, DownlinkConfig(enabled=True))
    assert [log.model_hash for log in plain] == [log.model_hash for log in quantized]


def test_sparse_downlink_changes_trajectory_and_bits():
    obj = quadratic(d=20, noise_std=0.5, devices=((1, 1), (1, 1)))
    schedule = Schedule(global_rounds=3, edge_rounds=2, step_size=0.05, batch_size=2)
    plain = run_hier_signsgd(obj, schedule)
    sparse = run_hier_signsgd_quantized_downlink(obj, schedule, DownlinkConfig(enabled=True, active_components=4))
    assert plain[1].model_hash == sparse[1].model_hash
    assert plain[-1].model_hash != sparse[-1].model_hash
    assert sparse[2].downlink_bits == 2 * (4 * (5 + 32) + 2 * 20)


def test_quantized_replicas_agree():
    obj = quadratic(d=15, noise_std=1.0, devices=((1, 1, 1), (1, 1)))
    run_hier_signsgd_quantized_downlink(
        obj, Schedule(global_rounds=3, edge_rounds=2, step_size=0.05, batch_size=1),
        DownlinkConfig(enabled=True, ratio=0.2), consistency_checks=True,
    )


def test_quantized_requires_enabled_downlink():
    with pytest.raises(ValueError):
        run_hier_signsgd_quantized_downlink(quadratic(), Schedule(), DownlinkConfig(enabled=False))
    with pytest.raises(ValueError, match="downlink"):
        run_algorithm("hier_signsgd_quantized", quadratic(), Schedule(global_rounds=1))


def test_unknown_algorithm():
    with pytest.raises(ValueError):
        run_algorithm("fedavg", quadratic(), Schedule(global_rounds=1))


def test_checkpoint_written(tmp_path):
    obj = quadratic(d=4, noise_std=0.1)
    path = tmp_path / "final.bin"
    logs = run_hier_signsgd(obj, Schedule(global_rounds=2, edge_rounds=2, step_size=0.1, batch_size=1),
                            checkpoint_path=path)
    assert params_digest(load_params(path).values) == logs[-1].model_hash


# === BOUND VALIDITY ===
@pytest.mark.parametrize("global_rounds", [16, 64, 256])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_measured_gradient_norm_respects_corollary_bound(global_rounds, seed):
    sigma, edge_rounds = 1.0, 2
    obj = quadratic(d=50, noise_std=sigma, seed=seed)
    schedule = Schedule(global_rounds=global_rounds, edge_rounds=edge_rounds,
                        step_size=1 / math.sqrt(global_rounds), batch_size=global_rounds, rng_seed=seed)
    logs = run_hier_signsgd(obj, schedule)
    measured = np.mean([log.global_grad_l1 for log in logs[:-1]])
    gap = logs[0].train_loss - obj.optimal_value()
    assert measured <= corollary2_bound(gap, sigma, obj.dimension, obj.smoothness, edge_rounds, global_rounds)


@pytest.mark.slow
def test_toy_mlp_learns(toy_objective):
    logs = run_hier_signsgd(toy_objective, Schedule(global_rounds=8, edge_rounds=10, step_size=0.01, batch_size=16))
    assert logs[-1].train_loss < logs[0].train_loss
    assert logs[-1].test_accuracy > 0.6

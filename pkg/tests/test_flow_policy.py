from fractions import Fraction

import numpy as np
import pytest

from core.errors import ConfigError, DimensionError, DivergenceError, NonFiniteError
from core.tensor import Tensor
from modules.batching import ChunkSampler, open_stream_sampler
from modules.datagen import TaskSpec, chunks_to_records, generate_dataset
from modules.flow_policy import (
    FlowPolicy,
    PolicyConfig,
    TrainConfig,
    TrainState,
    Validator,
    _check_divergence,
    euler_grid,
    euler_sample,
    flow_matching_loss,
    interpolate,
    mode_coverage,
    sample_timestep,
    timestep_from_normal,
    train_policy,
)
from modules.shards import MixSpec, write_shards


def point_mass_velocity(target):
    """Exact marginal velocity when every chunk equals target."""
    def velocity(tau, x, cond):
        t = np.asarray(tau).reshape(-1, 1, 1)
        return Tensor((target - x.data) / (1.0 - t))
    return velocity


def tiny_config(task, **overrides):
    base = dict(layers=2, hidden=16, heads_q=4, heads_kv=2, cond_tokens=4, steps=2, mlp_ratio=2)
    base.update(overrides)
    return PolicyConfig.from_task(task, **base)


@pytest.fixture(scope="module")
def task():
    return TaskSpec(T_a=8)


@pytest.fixture(scope="module")
def data(task):
    return generate_dataset(task, 24, seed=0)


@pytest.fixture
def sampler(data):
    chunks, norm = data
    return ChunkSampler.from_chunks(chunks, norm)


class TestTimesteps:
    def test_zero_maps_to_half(self):
        assert timestep_from_normal(0.0) == 0.5

    def test_logistic_normal_shape(self):
        tau = sample_timestep(np.random.default_rng(0), 200_000)
        assert 0.49 <= np.median(tau) <= 0.51
        assert np.mean((tau > 0.4) & (tau < 0.6)) == pytest.approx(0.3149, abs=0.005)
        assert tau.min() > 0.0 and tau.max() < 1.0

    def test_interpolation_endpoints(self):
        rng = np.random.default_rng(1)
        a, eps = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
        np.testing.assert_array_equal(interpolate(a, eps, [0.0, 0.0]), eps)
        np.testing.assert_array_equal(interpolate(a, eps, [1.0, 1.0]), a)
        mixed = interpolate(a, eps, [0.0, 1.0])
        np.testing.assert_array_equal(mixed[0], eps[0])
        np.testing.assert_array_equal(mixed[1], a[1])


class TestEuler:
    def test_grid_is_exact(self):
        assert euler_grid(4) == [Fraction(0), Fraction(1, 4), Fraction(1, 2), Fraction(3, 4)]
        assert euler_grid(1) == [Fraction(0)]
        with pytest.raises(ConfigError):
            euler_grid(0)

    @pytest.mark.parametrize("steps", [1, 2, 5, 20])
    def test_point_mass_reached_exactly(self, steps):
        rng = np.random.default_rng(steps)
        target = rng.standard_normal((1, 4, 3))
        out = euler_sample(point_mass_velocity(target), None, steps, rng=rng, shape=(6, 4, 3))
        np.testing.assert_allclose(out, np.broadcast_to(target, (6, 4, 3)), atol=1e-10)

    def test_constant_field(self):
        noise = np.zeros((2, 3, 1))
        out = euler_sample(lambda tau, x, c: Tensor(np.ones_like(x.data)), None, 7, noise=noise)
        np.testing.assert_allclose(out, 1.0)

    def test_needs_noise_or_shape(self):
        with pytest.raises(ConfigError):
            euler_sample(lambda tau, x, c: x, None, 2)


class TestFlowLoss:
    def test_zero_at_exact_target(self):
        rng = np.random.default_rng(2)
        a, eps = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
        loss = flow_matching_loss(a, None, lambda tau, x, c: Tensor(a - eps), tau=[0.1, 0.5, 0.9], noise=eps)
        assert loss.item() == 0.0

    def test_zero_velocity_gives_mean_squared_target(self):
        a, eps = np.ones((2, 3, 1)), np.zeros((2, 3, 1))
        loss = flow_matching_loss(a, None, lambda tau, x, c: Tensor(np.zeros((2, 3, 1))), tau=0.3, noise=eps)
        assert loss.item() == pytest.approx(3.0)

    def test_non_finite_names_the_sample(self):
        a = np.zeros((2, 3, 1))

        def velocity(tau, x, c):
            v = np.zeros((2, 3, 1))
            v[1, 0, 0] = np.nan
            return Tensor(v)

        with pytest.raises(NonFiniteError, match=r"samples \[1\]"):
            flow_matching_loss(a, None, velocity, tau=0.5, noise=a)

    def test_shape_mismatch(self):
        a = np.zeros((2, 3, 1))
        with pytest.raises(DimensionError):
            flow_matching_loss(a, None, lambda tau, x, c: Tensor(np.zeros((2, 3, 2))), tau=0.5, noise=a)


class TestPolicy:
    def test_config_validation(self, task):
        with pytest.raises(ConfigError):
            tiny_config(task, cond_tokens=3)
        with pytest.raises(ConfigError):
            tiny_config(task, heads_kv=3)
        with pytest.raises(ConfigError):
            tiny_config(task, steps=0)

    def test_generate_shape_and_determinism(self, task, data):
        policy = FlowPolicy(tiny_config(task), np.random.default_rng(0))
        ctx = np.stack([c.context for c in data[0][:3]])
        instr = [c.instruction_id for c in data[0][:3]]
        noise = np.random.default_rng(3).standard_normal((3, 8, 14))
        a = policy.generate(ctx, instr, noise=noise)
        b = policy.generate(ctx, instr, noise=noise)
        assert a.shape == (3, 8, 14)
        np.testing.assert_array_equal(a, b)

    def test_bad_condition_inputs(self, task):
        policy = FlowPolicy(tiny_config(task), np.random.default_rng(0))
        with pytest.raises(DimensionError):
            policy.encode_condition(np.zeros((2, 5)), [0, 1])
        with pytest.raises(DimensionError):
            policy.encode_condition(np.zeros((2, task.context_dim)), [0])

    def test_save_load(self, task, data, tmp_path):
        policy = FlowPolicy(tiny_config(task), np.random.default_rng(0))
        policy.save(tmp_path / "p.ckpt")
        again = FlowPolicy.load(tmp_path / "p.ckpt")
        assert again.cfg == policy.cfg
        ctx = np.stack([c.context for c in data[0][:2]])
        noise = np.ones((2, 8, 14))
        np.testing.assert_array_equal(again.generate(ctx, [0, 1], noise=noise), policy.generate(ctx, [0, 1], noise=noise))

    def test_mode_coverage_is_a_distribution(self, task, data):
        chunks, norm = data
        policy = FlowPolicy(tiny_config(task), np.random.default_rng(0))
        ctx = np.stack([c.context for c in chunks])
        frac = mode_coverage(policy, task, norm, ctx, [c.instruction_id for c in chunks])
        assert frac.shape == (2,)
        assert frac.sum() == pytest.approx(1.0)

    def test_validator_reports_every_sample(self, task, data):
        chunks, norm = data
        validator = Validator.from_chunks(chunks, norm, task.layout, steps=2, limit=6)
        report, aggregate = validator.evaluate(FlowPolicy(tiny_config(task), np.random.default_rng(0)))
        assert report.n_samples == 6
        assert np.isfinite(aggregate) and aggregate > 0


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_divergence_needs_consecutive_steps(self):
        cfg = TrainConfig(divergence_factor=10.0, divergence_patience=2)
        state = TrainState()
        _check_divergence(state, 1.0, cfg)
        _check_divergence(state, 20.0, cfg)
        _check_divergence(state, 5.0, cfg)
        assert state.above == 0
        _check_divergence(state, 20.0, cfg)
        with pytest.raises(DivergenceError):
            _check_divergence(state, 20.0, cfg)

    def test_writes_artifacts(self, task, sampler, tmp_path):
        policy = FlowPolicy(tiny_config(task), np.random.default_rng(0))
        cfg = TrainConfig(steps=4, batch_size=4, lr=1e-3, warmup_steps=2, log_every=2)
        result = train_policy(policy, sampler, cfg, np.random.default_rng(1), out_dir=tmp_path)
        assert list(result.loss_log.columns) == ["step", "loss", "smoothed_loss", "lr"]
        assert result.loss_log["lr"].tolist() == pytest.approx([5e-4, 1e-3, 1e-3, 1e-3])
        for name in ("loss_log.csv", "validation.csv", "policy.ckpt"):
            assert (tmp_path / name).exists()

    def test_resume_matches_uninterrupted_run(self, task, sampler, tmp_path):
        cfg = tiny_config(task)
        kwargs = dict(batch_size=4, lr=1e-3, warmup_steps=2)

        straight = FlowPolicy(cfg, np.random.default_rng(0))
        full = train_policy(straight, sampler, TrainConfig(steps=6, **kwargs), np.random.default_rng(1))

        first = FlowPolicy(cfg, np.random.default_rng(0))
        train_policy(first, sampler, TrainConfig(steps=3, **kwargs), np.random.default_rng(1), out_dir=tmp_path)
        resumed = FlowPolicy(cfg, np.random.default_rng(7))
        again = train_policy(resumed, sampler, TrainConfig(steps=6, **kwargs), np.random.default_rng(99),
                             resume_from=tmp_path / "policy.ckpt")

        np.testing.assert_array_equal(again.loss_log["loss"], full.loss_log["loss"])
        for name, value in straight.state_dict().items():
            np.testing.assert_array_equal(resumed.state_dict()[name], value)

    def test_resume_from_shard_stream(self, task, data, tmp_path):
        chunks, norm = data
        shards = write_shards(chunks_to_records(chunks, "train"), 8, tmp_path / "shards")
        mix = MixSpec(["train"], [1.0])
        cfg = tiny_config(task)
        kwargs = dict(batch_size=4, lr=1e-3, warmup_steps=2)

        def stream():
            return open_stream_sampler({"train": shards}, mix, norm, seed=5, prefetch=4)

        with stream() as s:
            full = train_policy(FlowPolicy(cfg, np.random.default_rng(0)), s, TrainConfig(steps=5, **kwargs),
                                np.random.default_rng(1))
        with stream() as s:
            train_policy(FlowPolicy(cfg, np.random.default_rng(0)), s, TrainConfig(steps=2, **kwargs),
                         np.random.default_rng(1), out_dir=tmp_path)
        with stream() as s:
            again = train_policy(FlowPolicy(cfg, np.random.default_rng(3)), s, TrainConfig(steps=5, **kwargs),
                                 np.random.default_rng(9), resume_from=tmp_path / "policy.ckpt")
            assert s.records_read == 5 * 4
        np.testing.assert_array_equal(again.loss_log["loss"], full.loss_log["loss"])

    def test_frozen_encoder_is_not_updated(self, task, sampler):
        policy = FlowPolicy(tiny_config(task), np.random.default_rng(0))
        policy.encoder.freeze()
        before = policy.encoder.state_dict()
        train_policy(policy, sampler, TrainConfig(steps=2, batch_size=4, lr=1e-2, warmup_steps=1),
                     np.random.default_rng(0))
        for name, value in policy.encoder.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    @pytest.mark.slow
    def test_loss_decreases(self, task, sampler):
        policy = FlowPolicy(tiny_config(task), np.random.default_rng(0))
        cfg = TrainConfig(steps=200, batch_size=16, lr=1e-3, warmup_steps=20)
        log = train_policy(policy, sampler, cfg, np.random.default_rng(0)).loss_log
        assert log["loss"].tail(50).mean() < log["loss"].head(20).mean()

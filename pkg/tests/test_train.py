# tests/test_train.py
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from env import GridEnv, MultisetEnv
from errors import ConfigError
from evaluate import ProductRewardEnv, exact_pT, l1, reward_table
from losses import LossSpec
from policy import TABULAR, ForwardPolicy
from train import METRIC_COLUMNS, L1Monitor, TrainConfig, centralized_config, derive_seeds, train_clients, train_local


def small_config(env=None, **kw):
    base = dict(
        env=env if env is not None else MultisetEnv(3, 2, [0.0, 1.0, 2.0]),
        loss=LossSpec("CB"),
        epochs=300,
        batch_size=16,
        lr=0.05,
        seed=0,
        eval_every=50,
        backend=TABULAR,
        progress=False,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    env = MultisetEnv(3, 2, np.zeros(3))
    with pytest.raises(ConfigError) as e:
        TrainConfig(env=env)
    assert e.value.key == "seed"
    with pytest.raises(ConfigError):
        TrainConfig(env=env, seed=0, batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(env=env, seed=0, lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(env=env, seed=0, epochs=-1)
    assert TrainConfig(env=env, seed=0, loss=LossSpec("TB", epsilon=0.3), batch_size=1).epsilon == 0.3


@pytest.mark.parametrize("kind", ["CB", "TB", "VL"])
def test_local_training_reduces_l1(kind):
    config = small_config(loss=LossSpec(kind))
    target = reward_table([config.env])
    before = l1(exact_pT(ForwardPolicy.create(config.env, TABULAR)), target)
    snap, metrics = train_local(config)
    assert list(metrics.columns) == METRIC_COLUMNS
    assert len(metrics) == 300
    tracked = metrics.dropna(subset=["l1"])
    assert list(tracked["epoch"]) == [50, 100, 150, 200, 250, 300]
    assert tracked["l1"].iloc[-1] < 0.5 * before
    assert (metrics["wall_ms"].diff().dropna() >= 0).all()
    assert snap.meta["loss"] == kind
    assert ("log_z" in snap.meta) == (kind == "TB")


def test_last_epoch_is_always_evaluated():
    _, metrics = train_local(small_config(epochs=7, eval_every=5))
    assert list(metrics.dropna(subset=["l1"])["epoch"]) == [5, 7]


def test_zero_epochs_records_initial_policy():
    _, metrics = train_local(small_config(epochs=0))
    assert len(metrics) == 1
    assert metrics["epoch"].iloc[0] == 0
    assert np.isfinite(metrics["l1"].iloc[0])


def test_training_is_deterministic(tmp_path):
    path = tmp_path / "client0_metrics.csv"
    a, ma = train_local(small_config(epochs=40, metrics_path=str(path)))
    b, mb = train_local(small_config(epochs=40))
    np.testing.assert_array_equal(a.params, b.params)
    np.testing.assert_array_equal(ma["loss"], mb["loss"])
    written = pd.read_csv(path)
    assert list(written.columns) == METRIC_COLUMNS
    np.testing.assert_allclose(written["loss"], ma["loss"])


def test_mlp_training_runs():
    env = GridEnv(3, [[2, 0]])
    snap, metrics = train_local(small_config(env, backend="mlp", hidden=(16,), epochs=20, lr=3e-3, loss=LossSpec("DB")))
    assert snap.backend == "mlp"
    assert snap.arch["widths"] == [env.feature_dim, 16, 3]
    assert np.isfinite(metrics["loss"]).all()


def test_monitor_without_target():
    monitor = L1Monitor(None, 100, np.random.default_rng(0))
    assert np.isnan(monitor(ForwardPolicy.create(MultisetEnv(2, 1, [0.0, 1.0]), TABULAR)))


def test_monitor_samples_when_states_exceed_guard():
    env = MultisetEnv(3, 2, [0.0, 1.0, 2.0])
    target = reward_table([env])
    policy = ForwardPolicy.create(env, TABULAR)
    monitor = L1Monitor(target, 5000, np.random.default_rng(0), guard=5)
    value = monitor(policy)
    assert not monitor.exact
    assert value == pytest.approx(l1(exact_pT(policy), target), abs=0.1)


def test_guard_reaches_the_training_monitor():
    _, metrics = train_local(small_config(epochs=20, eval_every=10, guard=5))
    assert metrics["l1"].isna().all()


def test_derive_seeds():
    seeds = derive_seeds(7, 4)
    assert seeds == derive_seeds(7, 4)
    assert len(set(seeds)) == 4
    assert derive_seeds(8, 4) != seeds


def test_clients_are_independent_and_ordered():
    envs = [MultisetEnv(3, 2, [0.0, 1.0, 2.0]), MultisetEnv(3, 2, [2.0, 1.0, 0.0])]
    configs = [small_config(e, epochs=30, name=f"client{k}") for k, e in enumerate(envs)]
    serial = train_clients(configs, parallelism=1, master_seed=3)
    parallel = train_clients(configs, parallelism=2, master_seed=3)
    assert [r.index for r in parallel] == [0, 1]
    for s, p in zip(serial, parallel):
        assert s.ok and p.ok
        np.testing.assert_array_equal(s.snapshot.params, p.snapshot.params)
    assert serial[0].snapshot.meta["seed"] == derive_seeds(3, 2)[0]
    alone = train_clients(configs[1:], master_seed=None)
    np.testing.assert_array_equal(alone[0].snapshot.params, train_local(configs[1])[0].params)


def test_failed_client_does_not_stop_the_others():
    configs = [small_config(epochs=10), small_config(epochs=10, loss=LossSpec("DBC"))]
    results = train_clients(configs)
    assert results[0].ok
    assert not results[1].ok
    assert "UnsupportedError" in results[1].error


def test_centralized_config_uses_product_reward():
    envs = [MultisetEnv(3, 2, [0.0, 1.0, 2.0]), MultisetEnv(3, 2, [2.0, 1.0, 0.0])]
    config = centralized_config(small_config(envs[0]), envs)
    assert isinstance(config.env, ProductRewardEnv)
    assert config.name == "centralized"
    assert config.env.log_reward((1, 1, 0)) == pytest.approx(envs[0].log_reward((1, 1, 0)) + envs[1].log_reward((1, 1, 0)))
    snap, _ = train_local(replace(config, epochs=5))
    assert snap.env_fingerprint == envs[0].fingerprint()

# tests/test_evaluate.py
import json

import numpy as np
import pytest

from env import GridEnv, MultisetEnv, enumerate_states
from errors import ConfigError, GuardExceeded, NumericError, UnsupportedError
from evaluate import (
    DistributionTable,
    ProductRewardEnv,
    balanced_policy,
    cb_kl_gradient_identity_check,
    count_trajectories,
    effective_target,
    enumerate_trajectories,
    evaluate_model,
    exact_pT,
    identity_checks,
    jeffrey,
    kl,
    l1,
    noisy_reward_wrap,
    random_tabular,
    reward_table,
    robustness_bound_check,
    sample_table,
    sample_terminals,
    sampled_pT,
    topk_avg_log_reward,
    trajectory_sum_pT,
    write_report,
)
from policy import MLP, TABULAR, ForwardPolicy


def multiset_clients(rng, n=2):
    return [MultisetEnv(3, 2, rng.uniform(0.0, 1.0, 3)) for _ in range(n)]


# ------------------- 分布表和距离 -------------------


def test_table_basics():
    t = DistributionTable({"a": 0.25, "b": 0.75}, "test")
    assert t["zzz"] == 0.0
    assert t.argmax() == "b"
    assert t.total() == pytest.approx(1.0)
    assert list(t.to_frame().columns) == ["state", "prob"]
    with pytest.raises(NumericError):
        DistributionTable.from_log_weights(["a"], [-np.inf], "x")


def test_distances():
    p = DistributionTable({"a": 0.5, "b": 0.5})
    q = DistributionTable({"a": 0.25, "b": 0.25, "c": 0.5})
    assert l1(p, q) == pytest.approx(1.0)
    assert l1(p, p) == 0.0
    assert kl(p, q) == pytest.approx(np.log(2))
    assert kl(q, p) == float("inf")
    assert jeffrey(p, q) == float("inf")
    r = DistributionTable({"a": 0.9, "b": 0.1})
    assert jeffrey(p, r) == pytest.approx(kl(p, r) + kl(r, p))


# ------------------- 终止分布 -------------------


def test_uniform_grid_terminal_distribution():
    policy = ForwardPolicy.create(GridEnv(2, [[1, 1]]), TABULAR)
    table = exact_pT(policy)
    assert table.provenance == "exact-dp"
    assert table[(0, 0)] == pytest.approx(1 / 3)
    assert table[(1, 0)] == pytest.approx(1 / 6)
    assert table[(0, 1)] == pytest.approx(1 / 6)
    assert table[(1, 1)] == pytest.approx(1 / 3)


@pytest.mark.parametrize("env", [GridEnv(3, [[2, 0]]), MultisetEnv(3, 3, [0.1, 0.2, 0.3])])
def test_dp_matches_trajectory_sum(env, rng):
    policy = random_tabular(env, rng)
    dp = exact_pT(policy)
    assert dp.total() == pytest.approx(1.0)
    assert l1(dp, trajectory_sum_pT(policy)) < 1e-12


def test_balanced_policy_hits_reward_table():
    env = GridEnv(4, [[3, 0], [0, 3]], kappa=2.0)
    policy, _ = balanced_policy(env)
    target = reward_table([env])
    assert target.provenance == "reward-normalized"
    assert l1(exact_pT(policy), target) < 1e-12


def test_sampled_close_to_exact(rng):
    policy = random_tabular(GridEnv(3, [[2, 0]]), rng)
    table = sampled_pT(policy, 20000, rng)
    assert table.provenance == "sampled(20000)"
    assert table.total() == pytest.approx(1.0)
    assert l1(table, exact_pT(policy)) < 0.05


def test_guard_applies(rng):
    policy = random_tabular(GridEnv(3, [[2, 0]]), rng)
    with pytest.raises(GuardExceeded):
        exact_pT(policy, guard=4)


def test_reward_product():
    envs = [MultisetEnv(3, 2, [0.0, 1.0, 2.0]), MultisetEnv(3, 2, [1.0, 0.0, -1.0])]
    target = reward_table(envs, weights=[1.0, 2.0])
    assert target.provenance == "reward-product(2)"
    x, y = (2, 0, 0), (0, 1, 1)
    ratio = target[x] / target[y]
    log_r = lambda s: envs[0].log_reward(s) + 2.0 * envs[1].log_reward(s)  # noqa: E731
    assert ratio == pytest.approx(np.exp(log_r(x) - log_r(y)))


def test_topk():
    envs = [MultisetEnv(2, 1, [0.0, 1.0])]
    samples = [(1, 0), (0, 1), (0, 1), (1, 0)]
    lr = envs[0].log_reward
    assert topk_avg_log_reward(samples, envs, 2) == pytest.approx(lr((0, 1)))
    assert topk_avg_log_reward(samples, envs, 3) == pytest.approx((2 * lr((0, 1)) + lr((1, 0))) / 3)
    table = DistributionTable({(1, 0): 0.5, (0, 1): 0.5})
    assert topk_avg_log_reward(table, envs, 2) == pytest.approx((lr((0, 1)) + lr((1, 0))) / 2)
    with pytest.raises(ValueError):
        topk_avg_log_reward(table, envs, 3)


def test_topk_on_table_is_best_distinct_states():
    env = GridEnv(4, [[3, 0], [0, 3]])
    target = reward_table([env])
    best = sorted((env.log_reward(x) for x in enumerate_states(env).terminals), reverse=True)
    assert topk_avg_log_reward(target, [env], 6) == pytest.approx(np.mean(best[:6]))


def test_sampled_topk_matches_exact_target(rng):
    env = GridEnv(5, [[4, 0], [0, 4]])
    policy, _ = balanced_policy(env)
    target = reward_table([env])
    drawn = sample_table(target, 20000, rng)
    freq = sampled_pT(policy, 20000, rng)
    assert l1(freq, target) < 0.1
    exact = topk_avg_log_reward(drawn, [env], 200)
    model = topk_avg_log_reward(sample_terminals(policy, 20000, rng), [env], 200)
    assert model == pytest.approx(exact, rel=1e-2)


# ------------------- 轨迹枚举和聚合目标 -------------------


def test_trajectory_counts():
    env = GridEnv(3, [[2, 0]])
    # sum over cells of C(x+y, x)
    assert count_trajectories(env) == 19
    trajs = enumerate_trajectories(env)
    assert len(trajs) == 19
    assert len({tuple(t.states) for t in trajs}) == 19
    with pytest.raises(GuardExceeded):
        enumerate_trajectories(env, guard=10)


def test_effective_target_of_balanced_clients_is_product(rng):
    envs = multiset_clients(rng, 3)
    locals_ = [balanced_policy(e)[0] for e in envs]
    assert l1(effective_target(locals_), reward_table(envs)) < 1e-10


def test_bound_is_tight_for_balanced_clients(rng):
    envs = multiset_clients(rng)
    report = robustness_bound_check([balanced_policy(e)[0] for e in envs], envs)
    assert report.holds
    assert not report.degenerate
    np.testing.assert_allclose(report.alpha, 0.0, atol=1e-10)
    np.testing.assert_allclose(report.beta, 0.0, atol=1e-10)
    assert report.jeffrey == pytest.approx(0.0, abs=1e-10)
    assert set(report.as_dict()) == {"alpha", "beta", "jeffrey", "bound", "holds", "degenerate"}


@pytest.mark.parametrize("seed", range(100))
def test_bound_holds_for_perturbed_clients(seed):
    rng = np.random.default_rng(seed)
    envs = multiset_clients(rng)
    locals_ = []
    for e in envs:
        p, _ = balanced_policy(e)
        locals_.append(p.with_params(p.params + rng.normal(0.0, 0.5, p.params.shape)))
    report = robustness_bound_check(locals_, envs)
    assert report.holds
    assert report.bound > 0


def test_weighted_effective_target(rng):
    envs = multiset_clients(rng)
    locals_ = [balanced_policy(e)[0] for e in envs]
    weights = [1.0, 0.5]
    assert l1(effective_target(locals_, weights=weights), reward_table(envs, weights)) < 1e-10


@pytest.mark.parametrize("env", [GridEnv(2, [[1, 1]]), MultisetEnv(2, 2, [0.3, 0.9]), GridEnv(3, [[0, 2]])])
def test_cb_kl_gradient_identity(env, rng):
    assert cb_kl_gradient_identity_check(random_tabular(env, rng)) < 1e-10


def test_cb_kl_needs_tabular(rng):
    with pytest.raises(UnsupportedError):
        cb_kl_gradient_identity_check(ForwardPolicy.create(GridEnv(2, [[1, 1]]), MLP, (4,), rng))


# ------------------- 奖励包装 -------------------


def test_noisy_reward(rng):
    env = MultisetEnv(3, 2, [0.0, 1.0, 2.0])
    clean = noisy_reward_wrap(env, 0.0, rng)
    assert clean.log_reward((1, 1, 0)) == env.log_reward((1, 1, 0))
    noisy = noisy_reward_wrap(env, 0.01, rng)
    assert noisy.fingerprint() == env.fingerprint()
    first = noisy.log_reward((1, 1, 0))
    assert first == noisy.log_reward((1, 1, 0))
    assert first != env.log_reward((1, 1, 0))
    policy = ForwardPolicy.create(noisy, TABULAR)
    assert exact_pT(policy).total() == pytest.approx(1.0)


def test_product_env_needs_one_state_space():
    with pytest.raises(ConfigError):
        ProductRewardEnv([GridEnv(3, [[0, 0]]), GridEnv(4, [[0, 0]])])
    env = ProductRewardEnv([GridEnv(3, [[0, 0]]), GridEnv(3, [[2, 2]])], weights=[1.0, 3.0])
    x = (1, 2)
    assert env.log_reward(x) == pytest.approx(env.bases[0].log_reward(x) + 3.0 * env.bases[1].log_reward(x))
    assert env.size == 3


# ------------------- 报告 -------------------


def test_evaluate_model_exact_and_sampled(rng):
    env = GridEnv(3, [[2, 0], [0, 2]])
    policy, _ = balanced_policy(env)
    target = reward_table([env])
    report = evaluate_model("m", policy, target, [env], top_k=5, samples=2000, rng=rng)
    assert report.provenance == "exact-dp"
    assert report.l1 < 1e-12
    assert report.topk <= max(env.log_reward(x) for x in target.keys())
    report = evaluate_model("m", policy, target, [env], top_k=5, samples=5000, rng=rng, guard=3)
    assert report.provenance == "sampled(5000)"
    assert report.l1 < 0.1


def test_write_report_is_sorted(tmp_path):
    path = tmp_path / "report.json"
    write_report(path, {"b": np.float64(1.5), "a": {"z": 1, "y": 2}})
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": {"y": 2, "z": 1}, "b": 1.5}


def test_identity_checks_pass():
    out = identity_checks(seed=1)
    assert out["jeffrey_bound"] == 0
    for name in ("cb_tb", "cb_vl", "dp_vs_trajectory_sum", "cb_kl_grid", "cb_kl_multiset"):
        assert out[name] < 1e-8, name

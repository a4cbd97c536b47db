"""Acceptance criteria, one test per criterion.

Each test prints a single `[criterion N] PASS/FAIL ...` line (visible with
`pytest -s` or on failure). Criteria 8 and 9 train full desk-scale runs
and dominate the suite's runtime.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from marlcredit import autodiff as ad
from marlcredit.analysis import (
    RedistributionMode,
    SyntheticScoreGenerator,
    conditioning_variance_study,
    make_redistributor,
    variance_study,
)
from marlcredit.cli import main, run_experiment
from marlcredit.config import load_config
from marlcredit.envs import KeyTreasureEnv
from marlcredit.episodes import TrajectoryBuffer, stack_episodes
from marlcredit.policies import DiscretePolicy
from marlcredit.reward_model import RewardModel, RewardModelConfig
from marlcredit.rollout import random_episode
from marlcredit.trainer import Trainer, TrainerConfig
from marlcredit.verify import (
    check_delta_bounds,
    check_prop2_residual,
    check_return_equivalence,
    check_telescoping,
)

RESULTS: list[str] = []


def report(num: int, name: str, passed: bool, detail: str) -> None:
    line = f"[criterion {num}] {'PASS' if passed else 'FAIL'} {name}: {detail}"
    RESULTS.append(line)
    print("\n" + line)
    assert passed, line


# ---------------------------------------------------------------------------
# 1. return equivalence fuzz


def test_criterion_1_return_equivalence_fuzz():
    start = time.perf_counter()
    result = check_return_equivalence(seed=1, cases=10_000)
    elapsed = time.perf_counter() - start
    report(
        1,
        "return equivalence fuzz",
        result.passed and elapsed < 10.0,
        f"10,000 cases, worst relative gap {result.max_residual:.3e}, {elapsed:.1f}s (< 10s)",
    )


# ---------------------------------------------------------------------------
# 2. delta properties


def test_criterion_2_delta_properties():
    result = check_delta_bounds(seed=1, cases=10_000)
    report(
        2,
        "delta bounds and unit sum",
        result.passed,
        f"10,000 cases, worst |sum(delta)-1| = {result.max_residual:.3e}",
    )


# ---------------------------------------------------------------------------
# 3. gradient-direction preservation


def test_criterion_3_gradient_direction():
    result = check_prop2_residual(seed=1, cases=200)
    report(
        3,
        "score-function proportionality",
        result.passed,
        f"200 policy/trajectory pairs, worst residual/tolerance = {result.max_residual:.3e}",
    )


# ---------------------------------------------------------------------------
# 4. telescoping + objective doubling


def test_criterion_4_telescoping_and_doubling():
    tel = check_telescoping(seed=1, cases=1_000)

    trainer = Trainer(
        "keytreasure",
        RedistributionMode.UNIFORM,
        TrainerConfig(rollout_threads=8, ppo_epochs=1, policy_hidden=16, v_hidden=16),
        None,
        seed=1,
    )
    worst = 0.0
    for _ in range(4):
        base = trainer.total_episodes

        def seed_for_slot(slot, base=base):
            return trainer.seed * 1_000_003 + base + slot

        from marlcredit.trainer import collect_rollouts

        episodes = collect_rollouts(
            trainer.policy, trainer.critic, trainer.env_pool, seed_for_slot, trainer.action_rng
        )
        trainer.total_episodes += len(episodes)
        outcomes = trainer._shaped_outcomes(episodes)
        mean_r = np.mean([e.team_reward for e in episodes])
        doubled = np.mean([o.rewards.sum() + e.team_reward for e, o in zip(episodes, outcomes)])
        worst = max(worst, abs(doubled - 2.0 * mean_r))
    doubling_ok = worst <= 1e-9
    report(
        4,
        "telescoping exact + objective doubling",
        tel.passed and doubling_ok,
        f"1,000 telescoping cases residual {tel.max_residual:.1e}; "
        f"batch doubling gap {worst:.3e}",
    )


# ---------------------------------------------------------------------------
# 5. autodiff soundness on the full reward-model loss


def test_criterion_5_autodiff_soundness():
    env = KeyTreasureEnv()
    cfg = RewardModelConfig(
        obs_dim=env.obs_dim,
        n_actions=env.n_actions,
        n_agents=env.n_agents,
        state_dim=env.state_dim,
        max_timesteps=env.horizon,
        embed_dim=16,
        num_heads=4,
        depth=2,
    )
    model = RewardModel(cfg, seed=1)
    episodes = [random_episode(env, s) for s in range(2)]
    start = time.perf_counter()
    result = ad.gradient_check(
        lambda: model.model_loss(episodes)[0],
        model.params,
        h=1e-5,
        tol=1e-4,
        max_entries_per_tensor=64,
        rng=np.random.default_rng(1),
    )
    elapsed = time.perf_counter() - start
    worst_name = max(result["per_tensor"], key=result["per_tensor"].get)
    report(
        5,
        "finite-difference agreement over every parameter tensor",
        result["passed"] and elapsed < 300.0,
        f"{len(model.params)} tensors, max rel err {result['max_rel_err']:.2e} "
        f"({worst_name}), {elapsed:.0f}s (< 300s)",
    )


# ---------------------------------------------------------------------------
# 6. reward-model fit on a frozen buffer


def test_criterion_6_reward_model_fit():
    env = KeyTreasureEnv()
    episodes = [random_episode(env, s) for s in range(512)]
    buffer = TrajectoryBuffer(capacity=512)
    for e in episodes:
        buffer.push(e)

    ratios = []
    for seed in (0, 1, 2):
        cfg = RewardModelConfig(
            obs_dim=env.obs_dim,
            n_actions=env.n_actions,
            n_agents=env.n_agents,
            state_dim=env.state_dim,
            max_timesteps=env.horizon,
            embed_dim=32,
            num_heads=4,
            depth=2,
            batch_size=64,
            update_epochs=200,
            lr=1e-3,
        )
        model = RewardModel(cfg, seed=seed)
        curve = model.train_on_buffer(buffer, np.random.default_rng(seed))
        first = curve[0]["regression"]
        # evaluate post-training on fresh samples from the same buffer
        rng = np.random.default_rng(100 + seed)
        final = np.mean(
            [model.model_loss(buffer.sample(rng, 64))[1]["regression"] for _ in range(4)]
        )
        ratios.append(final / first)
    median_ratio = float(np.median(ratios))
    report(
        6,
        "regression loss after 200 rounds <= 10% of round 1 (median of 3 seeds)",
        median_ratio <= 0.10,
        f"ratios {[f'{r:.3f}' for r in ratios]}, median {median_ratio:.3f}",
    )


# ---------------------------------------------------------------------------
# 7. variance reports


def test_criterion_7_variance_reports():
    generator = SyntheticScoreGenerator(
        g_values=np.random.default_rng(3).normal(size=6),
        h_values=np.random.default_rng(4).normal(size=4),
        noise_sd=0.5,
        p_z_given_tau=np.random.default_rng(5).dirichlet(np.ones(4), size=6),
    )
    cond = conditioning_variance_study(generator, num_samples=10_000, seed=1)
    cond_ok = cond.reduction_outside_ci

    env = KeyTreasureEnv()
    policy = DiscretePolicy(env.obs_dim, env.n_actions, env.n_agents, hidden=8, seed=1)
    shaped = make_redistributor(RedistributionMode.UNIFORM, None)
    study = variance_study(policy, env, shaped, num_samples=50_000, seed=1, bootstrap=50)
    identity_ok = study.identity_gap <= 1e-9 * max(1.0, study.var_pbrs)
    report(
        7,
        "conditioning reduction outside CI + 50k-sample estimator identity",
        cond_ok and identity_ok,
        f"conditioning diff CI {tuple(f'{v:.4f}' for v in cond.diff_ci)}; "
        f"Var(shaped)={study.var_shaped:.3e} vs Var(PBRS)={study.var_pbrs:.3e} "
        f"(shaped lower: {study.shaped_below_pbrs}); identity gap {study.identity_gap:.2e}",
    )


# ---------------------------------------------------------------------------
# 8 + 9. learning efficacy and ablation ordering (shared runs)


@pytest.fixture(scope="module")
def learning_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_runs")
    summaries = {}
    for arm, preset in (
        ("uniform", "keytreasure_uniform"),
        ("tar2", "keytreasure_tar2"),
        ("no_normalization", "keytreasure_tar2"),
    ):
        exp = load_config(preset, [f"run.mode={arm}"])
        summaries[arm] = run_experiment(exp, out / arm, threads=2)
    return summaries


def _per_seed(summary, key):
    return {row["seed"]: row[key] for row in summary["per_seed"]}


def test_criterion_8_learning_efficacy(learning_runs):
    tar2_auc = _per_seed(learning_runs["tar2"], "success_auc")
    uniform_auc = _per_seed(learning_runs["uniform"], "success_auc")
    auc_wins = sum(tar2_auc[s] >= uniform_auc[s] for s in tar2_auc)
    final = _per_seed(learning_runs["tar2"], "final_success_rate")
    high_final = sum(v >= 0.9 for v in final.values())
    report(
        8,
        "learning efficacy vs uniform (5 seeds, 2000 episodes)",
        auc_wins >= 4 and high_final >= 3,
        f"AUC wins {auc_wins}/5 (tar2 {[f'{tar2_auc[s]:.2f}' for s in sorted(tar2_auc)]} vs "
        f"uniform {[f'{uniform_auc[s]:.2f}' for s in sorted(uniform_auc)]}); "
        f"final success >= 0.9 in {high_final}/5 seeds "
        f"({[f'{final[s]:.2f}' for s in sorted(final)]})",
    )


def test_criterion_9_ablation_ordering(learning_runs):
    tar2_returns = _per_seed(learning_runs["tar2"], "final_mean_return")
    ablation_returns = _per_seed(learning_runs["no_normalization"], "final_mean_return")
    not_better = sum(ablation_returns[s] <= tar2_returns[s] for s in tar2_returns)

    violations = _per_seed(learning_runs["no_normalization"], "equivalence_violations")
    episodes = _per_seed(learning_runs["no_normalization"], "episodes")
    rates = [violations[s] / episodes[s] for s in violations]
    report(
        9,
        "no-normalization arm ordering + equivalence violations",
        not_better >= 4 and all(r > 0.99 for r in rates),
        f"tar2 >= ablation in {not_better}/5 seeds "
        f"(tar2 {[f'{tar2_returns[s]:.2f}' for s in sorted(tar2_returns)]} vs "
        f"ablation {[f'{ablation_returns[s]:.2f}' for s in sorted(ablation_returns)]}); "
        f"violation rates {[f'{r:.3f}' for r in rates]}",
    )


# ---------------------------------------------------------------------------
# 10. reproducibility


FAST = [
    "run.episode_budget=16",
    "trainer.num_rollout_threads=4",
    "trainer.ppo_epochs=2",
    "trainer.policy_hidden_shape=16",
    "trainer.v_hidden_shape=16",
    "model.comp_dim=16",
    "model.num_heads=2",
    "model.depth=1",
    "model.batch_size=8",
    "model.model_upd_epochs=4",
    "model.model_upd_freq=8",
]


def _fast_train(out, budget=16, resume=None):
    args = ["train", "--config", "keytreasure_tar2", "--seeds", "1", "--out", str(out)]
    for o in FAST:
        args += ["--override", o if not o.startswith("run.episode_budget") else f"run.episode_budget={budget}"]
    if resume:
        args += ["--resume", str(resume)]
    assert main(args) == 0


def test_criterion_10_reproducibility(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _fast_train(a)
    _fast_train(b)
    identical = (a / "seed0/metrics.jsonl").read_bytes() == (b / "seed0/metrics.jsonl").read_bytes()

    full, half = tmp_path / "full", tmp_path / "half"
    _fast_train(full, budget=32)
    _fast_train(half, budget=16)
    _fast_train(half, budget=32, resume=half / "seed0/checkpoint_final.ckpt")
    full_rows = (full / "seed0/metrics.jsonl").read_text().splitlines()
    resumed_rows = (half / "seed0/metrics.jsonl").read_text().splitlines()
    resume_ok = bool(resumed_rows) and resumed_rows == full_rows[-len(resumed_rows):]
    report(
        10,
        "bit-identical reruns and checkpoint continuation",
        identical and resume_ok,
        f"rerun identical: {identical}; resumed tail matches uninterrupted run: {resume_ok}",
    )


def test_zzz_print_summary():
    print("\n" + "=" * 72)
    for line in RESULTS:
        print(line)
    print("=" * 72)

"""Property-based verification suite: the acceptance gate behind the
`verify` subcommand.

Each check returns a row with a pass flag, the case count, and the worst
residual observed, so failures point at concrete numbers.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .analysis import (
    RedistributionMode,
    SyntheticScoreGenerator,
    conditioning_variance_study,
    make_redistributor,
    reinforce_estimates,
    variance_study,
)
from .envs import KeyTreasureEnv
from .episodes import Episode
from .policies import DiscretePolicy
from .redistribution import (
    RedistributedRewards,
    ScoreMatrix,
    compute_weights,
    delta_k,
    potential_series,
    redistribute,
    uniform_redistribution,
    verify_telescoping,
)
from .reward_model import RewardModel, RewardModelConfig
from .rollout import play_episode
from .trainer import PopArt


@dataclass
class CheckResult:
    name: str
    passed: bool
    count: int
    max_residual: float
    detail: str = ""


def random_score_case(rng: np.random.Generator) -> tuple[ScoreMatrix, float]:
    """Fuzz corpus case: N in [1,8], T in [1,64], ~20% degenerate
    rows/columns, ~10% inactive cells, team reward in [-10, 10]."""
    T = int(rng.integers(1, 65))
    N = int(rng.integers(1, 9))
    scores = rng.uniform(-10.0, 10.0, size=(T, N))
    for t in range(T):
        if rng.random() < 0.2:
            scores[t, :] = scores[t, 0]
    for i in range(N):
        if rng.random() < 0.2:
            scores[:, i] = scores[0, i]
    active = rng.random((T, N)) >= 0.1
    if not active.any():
        active[rng.integers(0, T), rng.integers(0, N)] = True
    return ScoreMatrix(scores=scores, active=active), float(rng.uniform(-10.0, 10.0))


def check_return_equivalence(seed: int = 0, cases: int = 10_000) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(cases):
        m, team_reward = random_score_case(rng)
        r = redistribute(m, team_reward)
        gap = abs(r.rewards.sum() - team_reward) / max(1.0, abs(team_reward))
        worst = max(worst, gap)
    elapsed = time.perf_counter() - start
    return CheckResult(
        "return_equivalence_fuzz",
        worst <= 1e-9,
        cases,
        worst,
        f"{elapsed:.1f}s",
    )


def check_delta_bounds(seed: int = 0, cases: int = 10_000) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(cases):
        m, _ = random_score_case(rng)
        d = delta_k(compute_weights(m))
        if (d < 0).any() or (d > 1).any():
            ok = False
        if m.active.any(axis=1).all():
            worst = max(worst, abs(d.sum() - 1.0))
    return CheckResult("delta_bounds", ok and worst <= 1e-9, cases, worst)


def check_telescoping(seed: int = 0, cases: int = 1_000) -> CheckResult:
    """Dyadic-valued reward matrices keep every prefix sum exactly
    representable, so the telescoping residual must be exactly zero."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(cases):
        T = int(rng.integers(1, 65))
        N = int(rng.integers(1, 9))
        sign = float(rng.choice([-1.0, 1.0]))
        rewards = sign * rng.integers(0, 2**20, size=(T, N)).astype(float) / 2**16
        base = uniform_redistribution(T, N, np.ones((T, N), dtype=bool), 0.0)
        r = RedistributedRewards(
            rewards=rewards,
            team_reward=float(rewards.sum()),
            weights=base.weights,
            active=np.ones((T, N), dtype=bool),
        )
        good, residual = verify_telescoping(potential_series(r), r)
        worst = max(worst, residual)
        ok = ok and good and residual == 0.0
        # an injected fault must be detected
        p = potential_series(r)
        perturbed = p.potentials.copy()
        perturbed[rng.integers(1, T + 1), rng.integers(0, N)] += 1.0
        from .redistribution import PotentialSeries

        bad, _ = verify_telescoping(PotentialSeries(potentials=perturbed), r)
        ok = ok and not bad
    return CheckResult("telescoping_exact", ok, cases, worst)


def check_prop2_residual(seed: int = 0, cases: int = 200) -> CheckResult:
    env = KeyTreasureEnv()
    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    ok = True
    for trial in range(cases):
        policy = DiscretePolicy(env.obs_dim, env.n_actions, env.n_agents, hidden=8,
                                seed=seed * 100_003 + trial)
        action_rng = np.random.default_rng(seed * 7 + trial)
        ep = play_episode(env, trial, lambda obs, t: policy.act(obs, action_rng))
        ep = Episode(
            obs=ep.obs, actions=ep.actions, active=ep.active,
            global_states=ep.global_states, team_reward=float(rng.uniform(-10, 10)),
        )
        scores = ScoreMatrix(scores=rng.normal(size=(ep.T, ep.N)), active=ep.active)
        shaped = redistribute(scores, ep.team_reward)
        report = reinforce_estimates(policy, ep, shaped)
        ok = ok and report.passed
        with np.errstate(invalid="ignore"):
            ratios = report.residuals / report.tolerances
        worst_ratio = max(worst_ratio, float(np.nanmax(ratios)))
    return CheckResult("prop2_gradient_direction", ok, cases, worst_ratio, "residual/tolerance")


def check_gradient_check(seed: int = 0, entries_per_tensor: int = 2) -> CheckResult:
    env = KeyTreasureEnv()
    cfg = RewardModelConfig(
        obs_dim=env.obs_dim, n_actions=env.n_actions, n_agents=env.n_agents,
        state_dim=env.state_dim, max_timesteps=env.horizon,
        embed_dim=8, num_heads=2, depth=1,
    )
    model = RewardModel(cfg, seed=seed)
    episodes = [
        play_episode(env, s, lambda obs, t: (np.random.default_rng(s * 31 + t).integers(0, 4, 2), {}))
        for s in range(2)
    ]
    report = ad.gradient_check(
        lambda: model.model_loss(episodes)[0],
        model.params,
        h=1e-5,
        tol=1e-4,
        max_entries_per_tensor=entries_per_tensor,
        rng=np.random.default_rng(seed),
    )
    return CheckResult(
        "autodiff_gradient_check",
        report["passed"],
        len(model.params),
        report["max_rel_err"],
        "relative error",
    )


def check_popart_inverse(seed: int = 0, cases: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    stats = PopArt(decay=0.999)
    for _ in range(cases):
        stats.update(rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 4.0), size=64))
        x = rng.normal(size=32)
        worst = max(worst, float(np.abs(stats.denormalize(stats.normalize(x)) - x).max()))
    return CheckResult("popart_inverse", worst <= 1e-10, cases, worst)


def check_variance_identities(seed: int = 0, samples: int = 256) -> CheckResult:
    env = KeyTreasureEnv()
    policy = DiscretePolicy(env.obs_dim, env.n_actions, env.n_agents, hidden=8, seed=seed)
    shaped = make_redistributor(RedistributionMode.UNIFORM, None)
    report = variance_study(policy, env, shaped, num_samples=samples, seed=seed, bootstrap=20)
    identity_ok = report.identity_gap <= 1e-9 * max(1.0, report.var_pbrs)

    generator = SyntheticScoreGenerator(
        g_values=np.random.default_rng(seed).normal(size=5),
        h_values=np.random.default_rng(seed + 1).normal(size=4),
        noise_sd=0.5,
        p_z_given_tau=np.random.default_rng(seed + 2).dirichlet(np.ones(4), size=5),
    )
    cond = conditioning_variance_study(generator, num_samples=10_000, seed=seed)
    cond_ok = cond.reduction_outside_ci and cond.var_conditional_mean <= cond.var_given_traj
    return CheckResult(
        "variance_identities",
        identity_ok and cond_ok,
        samples,
        report.identity_gap,
        f"conditioning diff CI {cond.diff_ci}",
    )


def run_verification(seed: int = 0, quick: bool = False) -> list[CheckResult]:
    scale = 10 if quick else 1
    return [
        check_return_equivalence(seed, cases=10_000 // scale),
        check_delta_bounds(seed, cases=10_000 // scale),
        check_telescoping(seed, cases=1_000 // scale),
        check_prop2_residual(seed, cases=200 // scale),
        check_gradient_check(seed),
        check_popart_inverse(seed),
        check_variance_identities(seed, samples=256 // scale),
    ]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<28} {'status':<6} {'cases':>6}  {'max residual':>13}  detail"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{r.name:<28} {status:<6} {r.count:>6}  {r.max_residual:>13.3e}  {r.detail}"
        )
    return "\n".join(lines)

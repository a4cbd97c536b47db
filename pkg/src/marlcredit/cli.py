"""Operator surface: train / eval / verify / ablate / sweep.

Exit codes: 0 success, 1 configuration error, 2 runtime fault,
3 verification failure.
"""
from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import RedistributionMode, export_weight_heatmap, make_redistributor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    build_experiment_config,
    load_config,
    parse_config_text,
)
from .redistribution import uniform_redistribution
from .rollout import play_episode
from .trainer import Trainer, TrainerError
from .verify import format_table, run_verification

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

EVAL_SEED_BASE = 1_000_000_007


def default_out_root() -> Path:
    return Path(os.environ.get("MARLCREDIT_OUT", "runs"))


def build_trainer(exp: ExperimentConfig, seed: int) -> Trainer:
    return Trainer(
        env_name=exp.env_name,
        mode=RedistributionMode(exp.mode),
        trainer_config=exp.trainer,
        model_config_overrides=exp.model_overrides,
        seed=seed,
        epsilon=exp.epsilon,
    )


def checkpoint_header(exp: ExperimentConfig, trainer: Trainer, reason: str) -> dict:
    return {
        "config_hash": exp.hash,
        "config_text": exp.text,
        "seed": trainer.seed,
        "env": exp.env_name,
        "mode": exp.mode,
        "iteration": trainer.iteration,
        "counters": trainer.counters(),
        "rng_states": trainer.rng_states(),
        "reason": reason,
    }


def save_trainer_checkpoint(path: Path, exp: ExperimentConfig, trainer: Trainer, reason: str):
    save_checkpoint(path, checkpoint_header(exp, trainer, reason), trainer.state_tensors())


def restore_trainer(header: dict, tensors: dict) -> tuple[ExperimentConfig, Trainer]:
    exp = build_experiment_config(parse_config_text(header["config_text"]))
    trainer = build_trainer(exp, int(header["seed"]))
    trainer.load_state_tensors(tensors)
    trainer.load_counters(header["counters"])
    trainer.load_rng_states(header["rng_states"])
    return exp, trainer


def _success_auc(rows: list[dict]) -> float:
    if not rows:
        return 0.0
    return float(np.mean([row["success_rate"] for row in rows]))


def run_seed(exp: ExperimentConfig, seed: int, seed_dir: Path, resume: str | None = None) -> dict:
    """Train one seed to its episode budget; returns the per-seed summary."""
    seed_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        # the caller's config keeps control of orchestration (budget etc.);
        # the hash check already pinned the training dynamics
        header, tensors = load_checkpoint(resume, expected_config_hash=exp.hash)
        _, trainer = restore_trainer(header, tensors)
    else:
        trainer = build_trainer(exp, seed)

    metrics_path = seed_dir / "metrics.jsonl"
    events_path = seed_dir / "events.jsonl"
    rows: list[dict] = []

    def checkpoint_cb(t: Trainer, reason: str):
        if reason == "fault":
            save_trainer_checkpoint(seed_dir / "checkpoint_fault.ckpt", exp, t, reason)
        elif (
            reason == "periodic"
            and exp.checkpoint_every > 0
            and t.iteration % exp.checkpoint_every == 0
        ):
            save_trainer_checkpoint(
                seed_dir / f"checkpoint_iter{t.iteration}.ckpt", exp, t, reason
            )

    with open(metrics_path, "w") as metrics_fh:
        event_fh = open(events_path, "w") if exp.debug_events else None

        def metrics_writer(row: dict):
            rows.append(row)
            metrics_fh.write(json.dumps(row) + "\n")

        try:
            trainer.train(
                exp.episode_budget,
                metrics_writer=metrics_writer,
                checkpoint_cb=checkpoint_cb,
                event_writer=(
                    (lambda row: event_fh.write(json.dumps(row) + "\n")) if event_fh else None
                ),
            )
        finally:
            if event_fh is not None:
                event_fh.close()

    save_trainer_checkpoint(seed_dir / "checkpoint_final.ckpt", exp, trainer, "final")
    return {
        "seed": seed,
        "episodes": trainer.total_episodes,
        "final_success_rate": rows[-1]["success_rate"] if rows else 0.0,
        "final_mean_return": rows[-1]["mean_return"] if rows else 0.0,
        "success_auc": _success_auc(rows),
        "equivalence_violations": trainer.equivalence_violations,
    }


def _run_seed_job(config_text: str, seed: int, seed_dir: str) -> dict:
    exp = build_experiment_config(parse_config_text(config_text))
    return run_seed(exp, seed, Path(seed_dir))


def run_experiment(exp: ExperimentConfig, out_dir: Path, threads: int = 1) -> dict:
    """All seeds of one config; writes per-seed artifacts plus summary.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(seed, out_dir / f"seed{seed}") for seed in exp.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_run_seed_job, exp.text, seed, str(seed_dir))
                for seed, seed_dir in jobs
            ]
            per_seed = [f.result() for f in futures]
    else:
        per_seed = [run_seed(exp, seed, seed_dir) for seed, seed_dir in jobs]

    def mean_ci(values):
        arr = np.asarray(values, dtype=float)
        half = 1.96 * arr.std(ddof=1) / np.sqrt(len(arr)) if len(arr) > 1 else 0.0
        return {"mean": float(arr.mean()), "ci95_half_width": float(half)}

    summary = {
        "config_hash": exp.hash,
        "env": exp.env_name,
        "mode": exp.mode,
        "episode_budget": exp.episode_budget,
        "seeds": exp.seeds,
        "per_seed": per_seed,
        "final_mean_return": mean_ci([s["final_mean_return"] for s in per_seed]),
        "final_success_rate": mean_ci([s["final_success_rate"] for s in per_seed]),
        "success_auc": mean_ci([s["success_auc"] for s in per_seed]),
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    exp = load_config(args.config, args.override)
    if args.mode:
        exp = load_config(args.config, args.override + [f"run.mode={args.mode}"])
    if args.seeds:
        exp = load_config(
            args.config,
            args.override
            + ([f"run.mode={args.mode}"] if args.mode else [])
            + [f"run.seeds={_seeds_arg(args.seeds)}"],
        )
    out_dir = Path(args.out) if args.out else default_out_root() / args.config
    if args.resume:
        seed_dir = Path(args.resume).parent
        header, _ = load_checkpoint(args.resume, expected_config_hash=exp.hash, force=args.force)
        summary = run_seed(exp, int(header["seed"]), seed_dir, resume=args.resume)
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    summary = run_experiment(exp, out_dir, threads=args.threads)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _seeds_arg(raw: str) -> str:
    """`--seeds 5` means seeds 0..4; `--seeds 3,7` is an explicit list."""
    if "," in raw:
        return raw
    n = int(raw)
    return ",".join(str(s) for s in range(n))


def cmd_eval(args) -> int:
    header, tensors = load_checkpoint(args.checkpoint, force=True)
    exp, trainer = restore_trainer(header, tensors)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    env = trainer.env_pool[0]
    rng = np.random.default_rng(EVAL_SEED_BASE + trainer.seed)
    episodes = []
    for k in range(args.episodes):
        episodes.append(
            play_episode(env, EVAL_SEED_BASE + k, lambda obs, t: trainer.policy.act(obs, rng))
        )
    returns = np.array([e.team_reward for e in episodes])
    result = {
        "checkpoint": str(args.checkpoint),
        "episodes": args.episodes,
        "mean_return": float(returns.mean()),
        "success_rate": float((returns == 1.0).mean()),
    }
    with open(out_dir / "eval.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)

    rep = episodes[0]
    if trainer.model is not None and exp.mode != RedistributionMode.NO_NORMALIZATION.value:
        shaped = make_redistributor(RedistributionMode(exp.mode), trainer.model, exp.epsilon)
        weights = shaped(rep).weights
    else:
        weights = uniform_redistribution(rep.T, rep.N, rep.active, rep.team_reward).weights
    export_weight_heatmap(weights, out_dir / "heatmap.csv")

    with open(out_dir / "events.jsonl", "w") as fh:
        for idx, ep in enumerate(episodes):
            for event in ep.debug_events or []:
                fh.write(json.dumps({"episode": idx, **event}) + "\n")
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_verification(seed=args.seed, quick=args.quick)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


DEFAULT_ABLATION_ARMS = ("tar2", "no_outcome", "no_inverse_dynamics", "no_normalization")


def cmd_ablate(args) -> int:
    arms = [a.strip() for a in args.arms.split(",")] if args.arms else list(DEFAULT_ABLATION_ARMS)
    out_dir = Path(args.out) if args.out else default_out_root() / f"ablate_{args.config}"
    ranking = []
    for arm in arms:
        overrides = args.override + [f"run.mode={arm}"]
        if args.seeds:
            overrides.append(f"run.seeds={_seeds_arg(args.seeds)}")
        exp = load_config(args.config, overrides)
        summary = run_experiment(exp, out_dir / arm, threads=args.threads)
        ranking.append(
            {
                "arm": arm,
                "success_auc": summary["success_auc"]["mean"],
                "final_mean_return": summary["final_mean_return"]["mean"],
                "final_success_rate": summary["final_success_rate"]["mean"],
            }
        )
    ranking.sort(key=lambda row: row["success_auc"], reverse=True)
    with open(out_dir / "ranking.json", "w") as fh:
        json.dump(ranking, fh, indent=2, sort_keys=True)
    print(json.dumps(ranking, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    grids = []
    for spec in args.grid:
        if "=" not in spec:
            raise ConfigError(f"--grid must look like KEY=v1,v2 got {spec!r}")
        key, values = spec.split("=", 1)
        grids.append([(key.strip(), v.strip()) for v in values.split(",")])
    out_dir = Path(args.out) if args.out else default_out_root() / f"sweep_{args.config}"
    rows = []
    for combo in itertools.product(*grids):
        overrides = args.override + [f"{k}={v}" for k, v in combo]
        if args.seeds:
            overrides.append(f"run.seeds={_seeds_arg(args.seeds)}")
        exp = load_config(args.config, overrides)
        label = "_".join(f"{k.split('.')[-1]}{v}" for k, v in combo)
        summary = run_experiment(exp, out_dir / label, threads=args.threads)
        rows.append(
            {
                "overrides": dict(combo),
                "success_auc": summary["success_auc"]["mean"],
                "final_mean_return": summary["final_mean_return"]["mean"],
            }
        )
    rows.sort(key=lambda r: r["success_auc"], reverse=True)
    with open(out_dir / "sweep_summary.json", "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marlcredit",
        description="Episodic multi-agent credit assignment laboratory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True,
                           help=f"preset name ({', '.join(sorted(PRESETS))}) or a config file path")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VAL")
        p.add_argument("--seeds", help="seed count (e.g. 5) or explicit list (e.g. 0,3,7)")
        p.add_argument("--out", help="output directory (default $MARLCREDIT_OUT or ./runs)")
        p.add_argument("--threads", type=int, default=1,
                       help="parallel seed jobs (each job stays single-threaded)")

    p_train = sub.add_parser("train", help="train per seed and write metrics/checkpoints")
    common(p_train)
    p_train.add_argument("--mode", choices=[m.value for m in RedistributionMode])
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--force", action="store_true", help="ignore config-hash mismatch")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=200)
    p_eval.add_argument("--out")
    p_eval.set_defaults(fn=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the property suite (acceptance gate)")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--quick", action="store_true")
    p_verify.set_defaults(fn=cmd_verify)

    p_ablate = sub.add_parser("ablate", help="run ablation arms under shared seeds")
    common(p_ablate)
    p_ablate.add_argument("--arms", help=f"comma list (default {','.join(DEFAULT_ABLATION_ARMS)})")
    p_ablate.set_defaults(fn=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="grid sweep over listed values")
    common(p_sweep)
    p_sweep.add_argument("--grid", action="append", default=[], metavar="KEY=v1,v2")
    p_sweep.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainerError as exc:
        print(f"runtime fault at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

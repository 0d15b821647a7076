"""Command-line front end: schedule inspection, parameter counting, training
runs, gradient/memory benchmarks.

Exit codes: 0 success, 2 usage/config error, 3 runtime/numeric error.
ODP_SEED overrides configured seeds. Timestamps are confined to the single
`generated_at` field of JSON reports so outputs stay diffable.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone

import click
import numpy as np

from . import gradcheck as gradcheck_mod
from .autodiff import max_relative_error
from .cache import CacheConfig, generate_schedule
from .model import (PRESETS, ModelConfig, RnnTransducer, param_breakdown,
                    count_params, save_checkpoint, load_checkpoint, select_trainable)
from .splitgrad import SplitPlan, combined_backward, memory_report, split_backward
from .trainer import (OptimizerConfig, SyntheticTaskSpec, metrics_to_csv,
                      metrics_to_jsonl, run_personalization, synth_generate)

RUNTIME_EXIT = 3


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _fail_runtime(exc: BaseException) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(RUNTIME_EXIT)


def _env_seed() -> int | None:
    raw = os.environ.get("ODP_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise click.UsageError(f"ODP_SEED must be an integer, got {raw!r}")


def _load_model_config(spec) -> ModelConfig:
    if isinstance(spec, str):
        if spec in PRESETS:
            return PRESETS[spec]()
        try:
            with open(spec) as fh:
                spec = json.load(fh)
        except OSError as exc:
            raise click.UsageError(f"cannot read model config: {exc}")
    try:
        return ModelConfig(**spec)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"bad model config: {exc}")


@click.group()
def main():
    """On-device personalization sandbox for RNN-T speech models."""


@main.command()
@click.option("--nw", type=int, required=True, help="Window size (cached examples).")
@click.option("--ns", type=int, required=True, help="Window shift (new examples per session).")
@click.option("--b", type=int, required=True, help="Mini-batch size.")
@click.option("--es", type=int, required=True, help="Epochs per session.")
@click.option("--total", type=int, required=True, help="Total examples available.")
@click.option("--shuffle", is_flag=True, help="Shuffle within each epoch (seeded).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--allow-partial", is_flag=True,
              help="Permit a truncated session when the window never fills.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write CSV here instead of stdout.")
def schedule(nw, ns, b, es, total, shuffle, seed, allow_partial, output):
    """Emit the session/epoch/mini-batch plan as CSV."""
    try:
        cfg = CacheConfig(window_size=nw, window_shift=ns, batch_size=b,
                          epochs_per_session=es)
        plan = generate_schedule(total, cfg, shuffle=shuffle, seed=seed,
                                 allow_partial=allow_partial)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    text = plan.to_csv()
    if output:
        with open(output, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


@main.command("count-params")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Model config JSON file.")
@click.option("--group", default=None, help="Single group to count (default: full breakdown).")
def count_params_cmd(preset, config_path, group):
    """Analytic parameter counts per model part, with percentages."""
    if preset and config_path:
        raise click.UsageError("pass either --preset or --config, not both")
    cfg = _load_model_config(config_path or preset or "paper")
    if group is not None:
        try:
            n = count_params(cfg, group)
        except ValueError as exc:
            raise click.UsageError(str(exc))
        click.echo(f"{group}: {n:,}")
        return
    click.echo(f"{'group':<14}{'params':>14}{'pct':>8}")
    for name, count, pct in param_breakdown(cfg):
        click.echo(f"{name:<14}{count:>14,}{pct:>8.1f}")


def _train_one_seed(run_cfg: dict, seed: int, out_dir: str) -> dict:
    model_cfg = _load_model_config(run_cfg.get("model", "tiny"))
    cache_cfg = CacheConfig(**run_cfg["cache"])
    synth_args = dict(run_cfg.get("synthetic", {}))
    spec = SyntheticTaskSpec(seed=seed, **synth_args)
    total = run_cfg.get("total_examples", 4 * cache_cfg.window_size)
    dataset = synth_generate(spec, total)
    eval_set = synth_generate(replace(spec, seed=seed + 100_003),
                              run_cfg.get("eval_utterances", 10))
    plan = generate_schedule(total, cache_cfg, shuffle=run_cfg.get("shuffle", False),
                             seed=seed, allow_partial=run_cfg.get("allow_partial", False))
    init_ckpt = run_cfg.get("init_checkpoint")
    if init_ckpt:
        model = load_checkpoint(init_ckpt)
    else:
        model = RnnTransducer(model_cfg, seed=seed)
    opt = OptimizerConfig(**run_cfg.get("optimizer", {}))
    boundary = run_cfg.get("split_boundary")
    split_plan = SplitPlan(boundary) if boundary is not None else None
    result = run_personalization(
        model, plan, run_cfg.get("group", "All"), dataset, eval_set,
        optimizer=opt, split_plan=split_plan,
        feature_cache=run_cfg.get("feature_cache", False),
        cache_quantize=run_cfg.get("cache_quantize", False),
        reduction=run_cfg.get("reduction", "mean"))
    base = os.path.join(out_dir, f"seed{seed}")
    with open(base + ".metrics.jsonl", "w") as fh:
        fh.write(metrics_to_jsonl(result))
    with open(base + ".metrics.csv", "w", newline="") as fh:
        fh.write(metrics_to_csv(result))
    save_checkpoint(model, base + ".ckpt")
    return {
        "seed": seed,
        "initial_holdout_loss": result.initial_holdout_loss,
        "final_holdout_loss": result.final_holdout_loss(),
        "final_holdout_wer": result.sessions[-1].holdout_wer if result.sessions else
                             result.initial_holdout_wer,
        "optimizer_steps": result.optimizer_steps,
    }


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Run config JSON.")
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False), default="runs")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Parallel workers across seeds.")
def train(config_path, out_dir, jobs):
    """Personalization runs over synthetic speaker-shift data.

    Writes per-seed metrics (JSONL + CSV), a final checkpoint per seed, and
    a run report JSON.
    """
    try:
        with open(config_path) as fh:
            run_cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot read run config: {exc}")
    env_seed = _env_seed()
    seeds = [env_seed] if env_seed is not None else run_cfg.get("seeds", [0])
    if not seeds:
        raise click.UsageError("run config has an empty seeds list")
    os.makedirs(out_dir, exist_ok=True)
    try:
        if jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
                summaries = list(pool.map(_train_one_seed, [run_cfg] * len(seeds), seeds,
                                          [out_dir] * len(seeds)))
        else:
            summaries = [_train_one_seed(run_cfg, s, out_dir) for s in seeds]
    except click.UsageError:
        raise
    except Exception as exc:
        _fail_runtime(exc)
    report = {"generated_at": _now(), "config": config_path, "seeds": summaries}
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"wrote {path}")


@main.command()
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="tiny-wide",
              show_default=True)
@click.option("--boundary", type=int, default=4, show_default=True,
              help="Encoder layers in the first sub-graph.")
@click.option("--group", default="All", show_default=True)
@click.option("--utterances", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--spill", is_flag=True, help="Round-trip boundary tensors through disk.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
def bench(preset, boundary, group, utterances, seed, spill, output):
    """Combined-vs-split memory and equivalence report (JSON)."""
    env_seed = _env_seed()
    if env_seed is not None:
        seed = env_seed
    cfg = _load_model_config(preset)
    if not 0 <= boundary <= cfg.enc_layers:
        raise click.UsageError(f"boundary must be in 0..{cfg.enc_layers}")
    try:
        trainable = select_trainable(cfg, group)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    try:
        model = RnnTransducer(cfg, seed=seed)
        spec = SyntheticTaskSpec(seed=seed, vocab=cfg.vocab,
                                 feature_dim=cfg.raw_feature_dim)
        batch = synth_generate(spec, utterances)
        combined = combined_backward(model, batch, trainable)
        split = split_backward(model, batch, SplitPlan(boundary, spill=spill), trainable)
        grad_diff = max(
            (max_relative_error(combined.grads[n].data, split.grads[n].data)
             for n in combined.grads), default=0.0)
        report = memory_report(combined, split)
        combined.free_grads()
        split.free_grads()
    except Exception as exc:
        _fail_runtime(exc)
    report.update({
        "generated_at": _now(),
        "preset": preset,
        "boundary": boundary,
        "group": group,
        "utterances": utterances,
        "seed": seed,
        "loss": combined.loss,
        "grad_max_rel_diff": grad_diff,
    })
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if output:
        with open(output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


@main.command("gradcheck")
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck_cmd(trials, seed):
    """Finite-difference verification of all op gradients and the loss."""
    env_seed = _env_seed()
    if env_seed is not None:
        seed = env_seed
    try:
        report = gradcheck_mod.run_gradcheck(trials=trials, seed=seed)
    except Exception as exc:
        _fail_runtime(exc)
    for kind, err in report["ops"].items():
        click.echo(f"{kind:<14} max rel err {err:.3e}")
    click.echo(f"{'two_layer_net':<14} max rel err {report['two_layer_net']:.3e}")
    click.echo(f"{'rnnt_loss':<14} max rel err {report['rnnt_loss']:.3e}")
    if report["passed"]:
        click.echo(f"PASS (max {report['max_rel_err']:.3e} <= {report['tolerance']:.0e})")
    else:
        click.echo(f"FAIL (max {report['max_rel_err']:.3e} > {report['tolerance']:.0e})")
        sys.exit(RUNTIME_EXIT)


if __name__ == "__main__":
    main()

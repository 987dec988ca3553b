"""``trajstitch`` command line: data generation, training, stitching, evaluation.

Every stage reads and writes a single run directory::

    config.json                resolved configuration (rewritten by each command)
    dataset.jsonl              offline data, plus dataset.stats.json
    denoiser.json              diffusion checkpoint
    inv_dyn.json reward.json fwd_dyn.json
    denoiser_loss.csv aux_loss.csv
    d_aug.jsonl stitch_stats.json stitch_attempts.csv
    eval_report.json rtg_pairs.csv
    sweep_delta.{csv,json} sweep_ratio.{csv,json}

Exit status: 0 on success, 1 for configuration or input problems, 2 when a
stage fails at run time.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .aux_models import AuxConfig, AuxModels, train_aux_models
from .config import RunConfig, parse_ratio, stream
from .data import fit_normalizer, load_dataset, save_dataset
from .diffusion import DenoiserConfig, build_cosine_schedule, load_denoiser, save_denoiser, train_denoiser
from .errors import ConfigError, DatasetError, GenerationError, TrainingError
from .io import atomic_write_text, write_csv, write_json
from .maze import (
    BCConfig,
    MixConfig,
    PointMazeSpec,
    evaluate_policy,
    generate_offline_dataset,
    return_improvement_report,
    train_percentile_bc,
)
from .stitch import StitchConfig, run_augmentation

COMMANDS = ("gen-data", "train", "stitch", "eval", "sweep", "run-all")


def _out(config):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(config):
    out = _out(config)
    write_json(out / "config.json", config.to_dict())
    return out


def _require(*paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError(f"missing inputs: {', '.join(missing)} (run the earlier stages first)")


def _load_run_dataset(out):
    _require(out / "dataset.jsonl")
    ds = load_dataset(out / "dataset.jsonl")
    if ds.norm_stats is None:
        ds.norm_stats = fit_normalizer(ds)
    return ds


def _load_augmented(out):
    _require(out / "d_aug.jsonl")
    text = (out / "d_aug.jsonl").read_text()
    return list(load_dataset(out / "d_aug.jsonl")) if text.strip() else []


def _stitch_config(config, delta=None):
    return StitchConfig(
        horizon=config.horizon,
        delta_threshold=config.delta if delta is None else delta,
        iterations=config.iterations,
        min_keep=config.min_keep,
        seed=int(stream(config.seed, "stitch").integers(2**31)),
        low_quantile=config.low_quantile,
        high_quantile=config.high_quantile,
    )


# stages


def cmd_gen_data(config):
    out = _echo(config)
    if config.dataset:
        ds = load_dataset(config.dataset)
        if ds.norm_stats is None:
            ds.norm_stats = fit_normalizer(ds)
    else:
        ds = generate_offline_dataset(PointMazeSpec(), config.scenario, config.n_per_family, stream(config.seed, "data"))
    save_dataset(ds, out / "dataset.jsonl")
    summary = {}
    for t in ds:
        s = summary.setdefault(t.info.get("family", "-"), {"count": 0, "returns": [], "lengths": []})
        s["count"] += 1
        s["returns"].append(t.total_return(1.0))
        s["lengths"].append(len(t))
    for fam, s in sorted(summary.items()):
        s["mean_return"] = float(np.mean(s.pop("returns")))
        s["mean_length"] = float(np.mean(s.pop("lengths")))
        print(f"family {fam}: {s['count']} trajectories, mean return {s['mean_return']:.3f}, mean length {s['mean_length']:.1f}")
    return summary


def cmd_train(config):
    out = _echo(config)
    ds = _load_run_dataset(out)
    schedule = build_cosine_schedule(config.diffusion_steps)
    dcfg = DenoiserConfig(
        horizon=config.horizon,
        hidden=tuple(config.denoiser_hidden),
        arch=config.denoiser_arch,
        steps=config.denoiser_steps,
        batch_size=config.denoiser_batch,
        lr=config.denoiser_lr,
        lr_decay=config.denoiser_lr_decay,
        log_every=config.log_every,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # short trajectories are skipped, not fatal
        denoiser = train_denoiser(ds, schedule, dcfg, stream(config.seed, "train/denoiser"))
    save_denoiser(denoiser, schedule, out / "denoiser.json")
    write_csv(out / "denoiser_loss.csv", ["step", "loss"], denoiser.loss_curve)
    acfg = AuxConfig(
        inv_hidden=tuple(config.aux_inv_hidden),
        dyn_hidden=tuple(config.aux_dyn_hidden),
        steps=config.aux_steps,
        batch_size=config.aux_batch,
        lr=config.lr,
        log_every=config.log_every,
    )
    aux = train_aux_models(ds, acfg, stream(config.seed, "train/aux"))
    aux.save(out)
    rows = []
    for name in ("inv_dyn", "reward", "fwd_dyn"):
        rows += [(name, step, loss) for step, loss in getattr(aux, name).loss_curve]
    write_csv(out / "aux_loss.csv", ["model", "step", "loss"], rows)
    summary = {
        "denoiser_first_loss": denoiser.loss_curve[0][1] if denoiser.loss_curve else None,
        "denoiser_final_loss": denoiser.loss_curve[-1][1] if denoiser.loss_curve else None,
        "val_loss": {n: getattr(aux, n).val_loss for n in ("inv_dyn", "reward", "fwd_dyn")},
    }
    print(f"denoiser loss {summary['denoiser_first_loss']} -> {summary['denoiser_final_loss']}")
    print("aux validation loss " + ", ".join(f"{k} {v:.3g}" for k, v in summary["val_loss"].items()))
    return summary


def _load_models(out):
    _require(out / "denoiser.json", out / "inv_dyn.json", out / "reward.json", out / "fwd_dyn.json")
    denoiser, schedule = load_denoiser(out / "denoiser.json")
    return denoiser, schedule, AuxModels.load(out)


def _stitch(config, ds, models, delta=None):
    denoiser, schedule, aux = models
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_augmentation(ds, denoiser, schedule, aux, _stitch_config(config, delta))


def cmd_stitch(config):
    out = _echo(config)
    ds = _load_run_dataset(out)
    run = _stitch(config, ds, _load_models(out))
    text = "".join(json.dumps(t.to_record(), sort_keys=True) + "\n" for t in run.trajectories)
    atomic_write_text(out / "d_aug.jsonl", text)
    write_json(out / "stitch_stats.json", run.stats)
    write_csv(
        out / "stitch_attempts.csv",
        ["attempt", "low_index", "high_index", "delta", "max_error", "accepted"],
        [(a["attempt"], a["low_index"], a["high_index"], a["delta"], a["max_error"], int(a["accepted"])) for a in run.attempts],
    )
    print(f"stitch: {run.stats['accepts']}/{run.stats['attempts']} accepted (delta threshold {config.delta})")
    return run.stats


def evaluate_arm(config, original, augmented, ratio, norm):
    """Train and roll out one percentile-BC policy per evaluation seed."""
    spec = PointMazeSpec()
    o, a = parse_ratio(ratio)
    mix = MixConfig(o, a, config.batch_size)
    bc = BCConfig(config.percentile, tuple(config.bc_hidden), config.bc_steps, config.lr, config.bc_tie_tol)
    success, returns, elite = [], [], []
    for i in range(config.eval_seeds):
        policy = train_percentile_bc(original, augmented, mix, bc, spec, norm, stream(config.seed, f"eval/{i}"))
        s, r = evaluate_policy(spec, policy, config.eval_episodes, config.gamma)
        success.append(s)
        returns.append(r)
        elite.append(list(policy.elite_counts))
    return {
        "ratio": ratio,
        "success": success,
        "return": returns,
        "success_mean": float(np.mean(success)),
        "success_std": float(np.std(success)),
        "return_mean": float(np.mean(returns)),
        "return_std": float(np.std(returns)),
        "elite_transitions": elite,
    }


def cmd_eval(config):
    out = _echo(config)
    ds = _load_run_dataset(out)
    augmented = _load_augmented(out)
    original = list(ds)
    raw = evaluate_arm(config, original, [], "1:0", ds.norm_stats)
    if augmented:
        mixed = evaluate_arm(config, original, augmented, config.ratio, ds.norm_stats)
    else:
        warnings.warn("no augmented trajectories; the augmented arm falls back to raw data")
        mixed = dict(raw, ratio=config.ratio)
    fraction, pairs = return_improvement_report(ds, augmented, config.gamma)
    write_csv(out / "rtg_pairs.csv", ["rtg_before", "rtg_after"], [(float(b), float(a)) for b, a in pairs])
    report = {
        "arms": {"raw": raw, "augmented": mixed},
        "eval_seeds": config.eval_seeds,
        "episodes": config.eval_episodes,
        "n_original": len(original),
        "n_augmented": len(augmented),
        "improved_rtg_fraction": fraction,
        "config_hash": config.hash(),
    }
    write_json(out / "eval_report.json", report)
    for name, arm in report["arms"].items():
        print(f"{name:9s} ratio {arm['ratio']:>4s}: success {arm['success_mean']:.2f} +- {arm['success_std']:.2f}")
    if fraction is not None:
        print(f"prefix states with improved return-to-go: {fraction:.3f}")
    return report


def cmd_sweep(config, parameter):
    out = _echo(config)
    ds = _load_run_dataset(out)
    original = list(ds)
    rows = []
    if parameter == "delta":
        if not config.sweep_deltas:
            raise ConfigError("empty delta grid")
        models = _load_models(out)
        for delta in sorted(config.sweep_deltas):
            run = _stitch(config, ds, models, float(delta))
            arm = evaluate_arm(config, original, run.trajectories, config.ratio, ds.norm_stats) if run.trajectories else None
            rows.append({
                "delta": float(delta),
                "attempts": run.stats["attempts"],
                "accepts": run.stats["accepts"],
                "success_mean": arm["success_mean"] if arm else None,
                "success_std": arm["success_std"] if arm else None,
                "return_mean": arm["return_mean"] if arm else None,
            })
        header = ["delta", "attempts", "accepts", "success_mean", "success_std", "return_mean"]
    elif parameter == "ratio":
        if not config.sweep_ratios:
            raise ConfigError("empty ratio grid")
        augmented = _load_augmented(out)
        for ratio in config.sweep_ratios:
            o, a = parse_ratio(ratio)
            if a > 0 and not augmented:
                raise ConfigError(f"ratio {ratio} needs augmented data but d_aug.jsonl is empty")
            # a zero augmented share means no augmentation at all, identical to the raw arm
            arm = evaluate_arm(config, original, augmented if a > 0 else [], ratio, ds.norm_stats)
            rows.append({k: arm[k] for k in ("ratio", "success_mean", "success_std", "return_mean", "return_std", "success")})
        header = ["ratio", "success_mean", "success_std", "return_mean", "return_std"]
    else:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose delta or ratio")
    write_json(out / f"sweep_{parameter}.json", {"parameter": parameter, "rows": rows})
    write_csv(out / f"sweep_{parameter}.csv", header, [[r[h] for h in header] for r in rows])
    for r in rows:
        print("  ".join(f"{h}={r[h]}" for h in header))
    return rows


def cmd_run_all(config):
    cmd_gen_data(config)
    cmd_train(config)
    cmd_stitch(config)
    return cmd_eval(config)


# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    p = _Parser(prog="trajstitch", description="Diffusion-based trajectory stitching for offline data.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("parameter", nargs="?", help="sweep parameter: delta or ratio")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", help="run directory (overrides the config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
    return p


def resolve_config(args):
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    config = RunConfig.load(path).with_overrides(args.set)
    d = config.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    return RunConfig.from_dict(d)


def run(args):
    config = resolve_config(args)
    if args.command == "sweep":
        if args.parameter is None:
            raise ConfigError("sweep needs a parameter: delta or ratio")
        return cmd_sweep(config, args.parameter)
    if args.parameter is not None:
        raise ConfigError(f"{args.command} takes no positional parameter")
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "stitch": cmd_stitch,
        "eval": cmd_eval,
        "run-all": cmd_run_all,
    }
    return handlers[args.command](config)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except (ConfigError, DatasetError) as e:
        print(f"trajstitch: configuration error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, GenerationError, RuntimeError, FloatingPointError) as e:
        print(f"trajstitch: run failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

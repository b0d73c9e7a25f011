"""Programmatic entry points behind the command line: pretrain, finetune, evaluate, ablate."""

from __future__ import annotations

import csv
import logging
import math
import time
from pathlib import Path

import numpy as np

from .baselines import grpo_loop
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PRETRAIN_SECTIONS, ExperimentConfig, dump_config
from .errors import RunAbortedError, TrainingDivergedError
from .fm_train import pretrain
from .metrics import MetricsWriter, read_metrics
from .nft import evaluate, rl_loop
from .nn import MLP
from .schedule import get_schedule

log = logging.getLogger(__name__)

METHODS = ("nft", "grpo", "rft")
ABLATION_AXES = ("beta", "eta", "weighting", "sampler", "negative")
EARLY_WINDOW = 50


def build_model(cfg: ExperimentConfig) -> MLP:
    return MLP(cfg.dim, cfg.n_cond, tuple(cfg.model.hidden), cfg.model.activation, seed=cfg.model.init_seed)


def pretrain_digest(cfg: ExperimentConfig) -> bytes:
    return cfg.digest(PRETRAIN_SECTIONS)


def run_pretrain(cfg: ExperimentConfig, out_dir=None) -> MLP:
    """Fit the base model; writes ``pretrain.ckpt`` and ``pretrain_loss.csv``."""
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    p = cfg.pretrain
    losses = pretrain(
        model,
        cfg.mixtures(),
        steps=p.steps,
        batch_size=p.batch_size,
        lr=p.lr,
        weighting=p.weighting,
        seed=cfg.seed,
        t_min=p.t_min,
        schedule=get_schedule(cfg.schedule),
        lr_decay=p.lr_decay,
        log_every=max(p.steps // 10, 1),
    )
    with open(out / "pretrain_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss"))
        w.writerows((i, repr(l)) for i, l in enumerate(losses))
    save_checkpoint(out / "pretrain.ckpt", Checkpoint.from_model(model, cfg.schedule, pretrain_digest(cfg)))
    return model


def load_model(path, expected_digest=None, force=False) -> MLP:
    return load_checkpoint(path, expected_digest, force).to_model()


def load_or_pretrain(cfg: ExperimentConfig, init=None, force=False) -> MLP:
    """Pretrained model from ``init`` or ``<out>/pretrain.ckpt``, training it if absent."""
    path = Path(init) if init else Path(cfg.out) / "pretrain.ckpt"
    if path.exists():
        log.info("loading pretrained model from %s", path)
        return load_model(path, None if init else pretrain_digest(cfg), force)
    if init:
        raise FileNotFoundError(f"no checkpoint at {path}")
    log.info("no pretrained model at %s; pretraining first", path)
    return run_pretrain(cfg)


def run_rl(cfg: ExperimentConfig, method="nft", base: MLP = None, out_dir=None, init=None, force=False):
    """Finetune with ``method`` in {nft, grpo, rft}.

    Writes ``metrics.csv``, ``final.ckpt`` (training policy) and, for nft/rft,
    ``sampler.ckpt`` (data-collection policy) under ``<out>/<method>``. If the
    run stops early, the current weights go to ``aborted.ckpt`` before the
    error propagates.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    base = base if base is not None else load_or_pretrain(cfg, init, force)
    out = Path(out_dir) if out_dir else Path(cfg.out) / method
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        log.warning("replacing metrics from an earlier run at %s", metrics_path)
        metrics_path.unlink()
    schedule = get_schedule(cfg.schedule)
    digest = cfg.digest()
    reward_fn = cfg.reward_fn()
    rl_cfg = cfg.rl.build(cfg.seed, "rft" if method == "rft" else "nft")
    writer = MetricsWriter(metrics_path, cfg.metrics.record_wall_clock)
    try:
        if method == "grpo":
            if cfg.baseline.grpo_lr is not None:
                rl_cfg = rl_cfg.with_(lr=cfg.baseline.grpo_lr)
            result = grpo_loop(base, reward_fn, rl_cfg, cfg.n_cond, cfg.baseline.grpo_stochasticity, writer, schedule)
        else:
            result = rl_loop(base, reward_fn, rl_cfg, cfg.n_cond, writer, schedule)
    except (RunAbortedError, TrainingDivergedError) as exc:
        params = getattr(exc, "params", None) or getattr(exc, "last_good_params", None)
        if params is not None:
            model = base.copy()
            model.params = params
            save_checkpoint(out / "aborted.ckpt", Checkpoint.from_model(model, cfg.schedule, digest))
            log.error("run aborted (%s); weights saved to %s", exc, out / "aborted.ckpt")
        raise
    finally:
        writer.close()
    save_checkpoint(out / "final.ckpt", Checkpoint.from_model(result.model, cfg.schedule, digest))
    if method != "grpo":
        save_checkpoint(out / "sampler.ckpt", Checkpoint.from_model(result.old_model, cfg.schedule, digest))
    return result


def run_eval(cfg: ExperimentConfig, checkpoint, n_samples=None, force=False, seed=None):
    """Mean raw reward of ODE samples from the checkpointed model.

    The config digest is not checked here: evaluating under another reward is
    the point of this command. ``force`` is accepted for symmetry.
    """
    ckpt = load_checkpoint(checkpoint)
    if ckpt.schedule_id != cfg.schedule:
        raise ValueError(f"checkpoint uses schedule {ckpt.schedule_id!r}, config uses {cfg.schedule!r}")
    model = ckpt.to_model()
    if model.dim != cfg.dim or model.n_cond != cfg.n_cond:
        raise ValueError("checkpoint architecture does not match the config data")
    return evaluate(
        model,
        cfg.reward_fn(),
        cfg.n_cond,
        n_samples or cfg.rl.eval_samples,
        cfg.rl.eval_sampler.build(),
        cfg.seed if seed is None else seed,
        0,
        get_schedule(cfg.schedule),
    )


def early_slope(rows, window=EARLY_WINDOW):
    """Average reward gain per iteration over the first ``window`` rollouts.

    Computed as (mean reward over iterations 0..window-1 minus reward at 0)
    divided by (window - 1) / 2, which equals the slope for a linear curve and
    favours faster rises when curves saturate inside the window.
    """
    r = [row["mean_raw_reward"] for row in rows if row["phase"] == "rollout"][:window]
    if len(r) < 2:
        return float("nan")
    return (float(np.mean(r)) - r[0]) / ((len(r) - 1) / 2.0)


def summarize(rows):
    evals = [r["mean_raw_reward"] for r in rows if r["phase"] == "eval"]
    return {
        "early_slope": early_slope(rows),
        "final_eval": evals[-1] if evals else float("nan"),
        "best_eval": max(evals) if evals else float("nan"),
    }


def _parse_value(axis, text):
    text = str(text).strip()
    if axis in ("beta", "eta"):
        return float(text)
    if axis == "negative":
        low = text.lower()
        if low not in ("true", "false", "1", "0"):
            raise ValueError(f"negative takes true/false, got {text!r}")
        return low in ("true", "1")
    return text


def ablation_override(axis, value) -> dict:
    """Override tree setting one axis of the rl section."""
    if axis == "beta":
        return {"beta": value}
    if axis == "eta":
        return {"eta": {"preset": None, "constant": value}}
    if axis == "weighting":
        return {"weighting": value}
    if axis == "negative":
        return {"negative": value}
    if axis == "sampler":
        kind, _, stoch = value.partition(":")
        spec = {"kind": kind, "stochasticity": float(stoch) if stoch else (math.sqrt(2.0) if kind == "sde_euler" else 0.0)}
        return {"sampler": spec}
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def _merge(tree, patch):
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(tree.get(k), dict):
            _merge(tree[k], v)
        else:
            tree[k] = v
    return tree


def ablation_config(cfg: ExperimentConfig, axis, value) -> ExperimentConfig:
    tree = cfg.model_dump(mode="json")
    _merge(tree["rl"], ablation_override(axis, value))
    return ExperimentConfig.model_validate(tree)


def run_ablation(cfg: ExperimentConfig, axis, values, out_dir=None, base: MLP = None):
    """NFT runs sweeping one axis from a shared pretrained model.

    Writes one metrics file per value plus ``summary.csv``; returns the
    summary rows.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    values = [_parse_value(axis, v) for v in values]
    if not values:
        raise ValueError("no ablation values given")
    out = Path(out_dir) if out_dir else Path(cfg.out) / f"ablate_{axis}"
    base = base if base is not None else load_or_pretrain(cfg)
    summary = []
    for value in values:
        sub = ablation_config(cfg, axis, value)
        run_dir = out / f"{axis}={value}"
        t0 = time.perf_counter()
        run_rl(sub, "nft", base=base, out_dir=run_dir)
        row = {"axis": axis, "value": value, **summarize(read_metrics(run_dir / "metrics.csv"))}
        log.info("ablation %s=%s done in %.1fs: %s", axis, value, time.perf_counter() - t0, row)
        summary.append(row)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "value", "early_slope", "final_eval", "best_eval"], lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    return summary

"""Run directories: dataset construction, training runs, sweeps and re-evaluation."""
import datetime as dt
import json
import logging
import os
from dataclasses import replace

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .data import generate_synthetic_dataset, load_image_mask_dir, make_split
from .evaluation import (
    MetricsReport,
    evaluate_predictions,
    export_confidence_map,
    render_comparison,
    render_panel,
)
from .networks import forward_critic
from .trainer import fit, load_checkpoint, predict_state, restore_state

log = logging.getLogger(__name__)


class RunError(ValueError):
    """User-facing problem with a run directory, checkpoint or data."""


def default_out_root():
    return os.environ.get("DUOSEG_OUT", "runs")


def build_samples(data_cfg):
    if data_cfg.source == "synthetic":
        return generate_synthetic_dataset(data_cfg.n, data_cfg.resolution, data_cfg.data_seed, data_cfg.noise_level)
    return load_image_mask_dir(data_cfg.image_dir, data_cfg.mask_dir, data_cfg.resolution)


def build_split(config, samples=None):
    samples = samples if samples is not None else build_samples(config.data)
    t = config.train
    return make_split(samples, config.data.train_fraction, t.label_fraction, t.seed)


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def make_run_dir(root, config):
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{stamp}_{config.train.mode}_{config.hash()}")
    path, k = base, 1
    while os.path.exists(path):
        k += 1
        path = f"{base}-{k}"
    os.makedirs(path)
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def train_run(config, out_root=None, samples=None, run_dir=None):
    """Execute one training run and persist everything under its run directory."""
    config.validate()
    split = build_split(config, samples)
    run_dir = run_dir or make_run_dir(out_root or default_out_root(), config)
    os.makedirs(run_dir, exist_ok=True)
    started = _now()
    _write_json(os.path.join(run_dir, "split.json"), {**split.manifest(), "test_hash": split.test_hash})
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "split_hash": split.manifest_hash,
        "test_hash": split.test_hash,
        "code_version": __version__,
        "started": started,
        "finished": None,
        "outputs": {
            "metrics": "metrics.jsonl",
            "timing": "timing.jsonl",
            "best_checkpoint": "best.pt",
            "last_checkpoint": "last.pt",
            "report": "report.json",
            "split": "split.json",
        },
    }
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    extra = {
        "config_hash": config.hash(),
        "run_config": config.to_dict(),
        "resolution": int(split.test[0].image.shape[-1]),
        "in_channels": int(split.test[0].image.shape[0]),
        "split_hash": split.manifest_hash,
        "test_hash": split.test_hash,
    }
    _, report = fit(config.train, split, out_dir=run_dir, extra_ckpt=extra)
    _write_json(os.path.join(run_dir, "report.json"), report.to_dict())
    manifest["finished"] = _now()
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    log.info("run written to %s", run_dir)
    return run_dir, report


def read_manifest(run_dir):
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.isfile(path):
        raise RunError(f"{run_dir}: no manifest.json, not a run directory")
    with open(path) as fh:
        return json.load(fh)


def evaluate_run(run_dir, checkpoint="best.pt", config=None, split_name="test", data_dir=None,
                 resolution=None, export_confidence=False, panels=0, out_dir=None):
    """Re-evaluate a stored checkpoint; returns ``{"dsc": ..., "mae": ..., "n": ...}``."""
    manifest = read_manifest(run_dir)
    ckpt_path = checkpoint if os.path.isabs(checkpoint) else os.path.join(run_dir, checkpoint)
    if not os.path.isfile(ckpt_path):
        raise RunError(f"checkpoint not found: {ckpt_path}")
    try:
        ckpt = load_checkpoint(ckpt_path)
    except ValueError as e:
        raise RunError(str(e)) from e
    stored = RunConfig.from_dict(ckpt["run_config"])
    if config is not None and config.hash() != ckpt["config_hash"]:
        raise RunError(
            f"config hash {config.hash()} does not match checkpoint config hash {ckpt['config_hash']}"
        )
    config = stored
    trained_res = ckpt["resolution"]

    if data_dir is not None:
        res = resolution or trained_res
        if res != trained_res:
            raise RunError(f"checkpoint was trained at {trained_res}x{trained_res}, data requested at {res}x{res}")
        samples = load_image_mask_dir(os.path.join(data_dir, "images"), os.path.join(data_dir, "masks"), res)
        names = [s.name for s in samples]
    else:
        if resolution is not None and resolution != trained_res:
            raise RunError(f"checkpoint was trained at {trained_res}x{trained_res}, data requested at {resolution}x{resolution}")
        split = build_split(config)
        if split.manifest_hash != manifest["split_hash"]:
            raise RunError("rebuilt split does not match the run's split manifest")
        if split_name == "test":
            samples, ids = split.test, split.test_ids
        elif split_name == "train_labeled":
            samples, ids = split.train_labeled, split.labeled_ids
        else:
            raise RunError(f"unknown split {split_name!r}; use 'test' or 'train_labeled'")
        names = [f"{i:05d}" for i in ids]
    got_res = samples[0].image.shape[-1]
    if got_res != trained_res or samples[0].image.shape[-2] != trained_res:
        raise RunError(
            f"checkpoint was trained at {trained_res}x{trained_res}, images are "
            f"{samples[0].image.shape[-2]}x{got_res}"
        )

    state = restore_state(ckpt, config.train, ckpt["in_channels"])
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    probs = predict_state(state, images).numpy()
    dsc, mae = evaluate_predictions(list(probs), [s.mask for s in samples])
    result = {"checkpoint": os.path.basename(ckpt_path), "split": split_name if data_dir is None else data_dir,
              "dsc": dsc, "mae": mae, "n": len(samples), "epoch": ckpt["epoch"]}

    out_dir = out_dir or os.path.join(run_dir, "eval")
    os.makedirs(out_dir, exist_ok=True)
    if export_confidence:
        if state.critic is None:
            raise RunError(f"mode {config.train.mode} has no critic; cannot export confidence maps")
        critic = state.critic.eval()

        def psi(m):
            with torch.no_grad():
                return forward_critic(critic, torch.as_tensor(m, dtype=torch.float32))

        conf_dir = os.path.join(out_dir, "confidence")
        for name, p in zip(names, probs):
            export_confidence_map(psi, p, os.path.join(conf_dir, f"conf_{name}.png"))
    if panels:
        for name, s, p in list(zip(names, samples, probs))[:panels]:
            render_panel(s.image, s.mask, {config.train.mode: p}, os.path.join(out_dir, f"panel_{split_name}_{name}.png"))
    _write_json(os.path.join(out_dir, "eval.json"), result)
    return result


def sweep(config, modes, fractions, out_root=None, panels=3):
    """Train every (mode, fraction) pair sequentially and render the comparison.

    All runs share ``config.train.seed`` and hence the same test set. Returns
    ``(sweep_dir, reports, failures)``.
    """
    root = out_root or default_out_root()
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    sweep_dir = os.path.join(root, f"sweep_{stamp}_{config.hash()}")
    k = 1
    while os.path.exists(sweep_dir):
        k += 1
        sweep_dir = os.path.join(root, f"sweep_{stamp}_{config.hash()}-{k}")
    os.makedirs(sweep_dir)
    samples = build_samples(config.data)
    reports, failures, runs = [], [], []
    for mode in modes:
        for frac in fractions:
            cfg = RunConfig(config.data, replace(config.train, mode=mode, label_fraction=frac))
            run_dir = os.path.join(sweep_dir, f"{mode}_lf{frac:g}")
            try:
                cfg.validate()
                _, report = train_run(cfg, samples=samples, run_dir=run_dir)
            except Exception as e:  # a failed child run must not stop the sweep
                log.error("run %s at %g failed: %s", mode, frac, e)
                failures.append({"mode": mode, "label_fraction": frac, "error": str(e)})
                continue
            reports.append(report)
            runs.append((mode, frac, run_dir))

    panel_data = {}
    if reports and panels:
        smallest = min(f for _, f, _ in runs)
        split = build_split(replace_fraction(config, smallest), samples)
        chosen = list(zip(split.test_ids, split.test))[:panels]
        images = torch.from_numpy(np.stack([s.image for _, s in chosen]).astype(np.float32))
        for i, s in chosen:
            panel_data[f"{i:05d}"] = (s.image, s.mask, {})
        for mode, frac, run_dir in runs:
            if frac != smallest:
                continue
            ckpt = load_checkpoint(os.path.join(run_dir, "best.pt"))
            state = restore_state(ckpt, RunConfig.from_dict(ckpt["run_config"]).train, ckpt["in_channels"])
            probs = predict_state(state, images).numpy()
            for (i, _), p in zip(chosen, probs):
                panel_data[f"{i:05d}"][2][mode] = p
    if reports:
        render_comparison(reports, sweep_dir, panels=panel_data)
    _write_json(os.path.join(sweep_dir, "sweep.json"), {
        "config": config.to_dict(),
        "modes": list(modes),
        "fractions": list(fractions),
        "reports": [r.to_dict() for r in reports],
        "failures": failures,
    })
    return sweep_dir, reports, failures


def replace_fraction(config, fraction):
    return RunConfig(config.data, replace(config.train, label_fraction=fraction))


def load_report(run_dir):
    with open(os.path.join(run_dir, "report.json")) as fh:
        return MetricsReport.from_dict(json.load(fh))

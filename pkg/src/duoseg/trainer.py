"""Alternating min-max training of two segmentation nets and a critic, plus baselines.

Each batch iteration runs ``k_s`` segmentation updates followed by ``k_c``
critic updates on the same drawn batches. The critic is trained on labeled
predictions and ground truths only; unlabeled predictions reach it through
the segmentation nets' adversarial term.
"""
import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import losses as L
from .data import assign_views
from .evaluation import MetricRecord, MetricsReport, evaluate_predictions
from .networks import CriticConfig, SegNetConfig, build_critic, build_segnet, forward_critic, forward_seg

log = logging.getLogger(__name__)

CKPT_FORMAT = "duoseg-ckpt-v1"
TWO_NET_MODES = ("duo_segnet", "no_critic", "no_unlabeled")
CRITIC_MODES = ("duo_segnet", "no_unlabeled", "single_net")
UNLABELED_MODES = ("duo_segnet", "no_critic", "single_net", "mean_teacher", "pseudo_label")


class TrainingAborted(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(f"{msg} (last good checkpoint: {last_checkpoint or 'none'})")
        self.last_checkpoint = last_checkpoint


class CyclingSampler:
    """Yields fixed-size index batches, reshuffling each pass over the pool."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._queue = []
        self.draws = 0

    def next(self):
        out = []
        while len(out) < self.batch_size:
            if not self._queue:
                self._queue = self.rng.permutation(self.n).tolist()
            take = self.batch_size - len(out)
            out.extend(self._queue[:take])
            self._queue = self._queue[take:]
        self.draws += 1
        return out

    def state(self):
        return {"rng": self.rng.bit_generator.state, "queue": list(self._queue), "draws": self.draws}


@dataclass
class TrainState:
    config: object
    nets: list
    critic: object = None
    teacher: object = None
    seg_opt: object = None
    critic_opt: object = None
    samplers: dict = field(default_factory=dict)
    views: object = None
    epoch: int = 0
    seg_steps: int = 0
    critic_steps: int = 0
    best_val_dsc: float = -1.0
    pseudo_weight: float = 0.0
    pseudo_masks: object = None

    @property
    def mode(self):
        return self.config.mode


def _seeds(seed, k):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(k)]


def init_state(config, in_channels, n_labeled=0, n_unlabeled=0, split=None):
    """Build networks, optimizers and batch samplers for ``config.mode``."""
    net_seeds = _seeds(config.seed, 3)
    seg_cfg = SegNetConfig(in_channels, config.base_width, config.depth)
    n_nets = 2 if config.mode in TWO_NET_MODES else 1
    nets = [build_segnet(seg_cfg, net_seeds[i]) for i in range(n_nets)]
    critic = None
    if config.mode in CRITIC_MODES:
        critic_cfg = CriticConfig(1, config.critic_base_width, config.critic_depth, config.critic_norm)
        critic = build_critic(critic_cfg, net_seeds[2])
    teacher = None
    if config.mode == "mean_teacher":
        teacher = copy.deepcopy(nets[0])
        for p in teacher.parameters():
            p.requires_grad_(False)
    seg_opt = torch.optim.SGD(
        [p for n in nets for p in n.parameters()], lr=config.seg_lr, momentum=config.seg_momentum
    )
    critic_opt = torch.optim.RMSprop(critic.parameters(), lr=config.critic_lr) if critic else None

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4)]
    state = TrainState(config, nets, critic, teacher, seg_opt, critic_opt)
    bs = config.batch_size
    if split is not None:
        n_labeled = len(split.train_labeled)
        n_unlabeled = len(split.train_unlabeled)
    if n_nets == 2:
        view_seed = int(rngs[3].integers(2**31))
        if split is not None:
            state.views = assign_views(split, view_seed)
            n1, n2 = len(state.views.view1_ids), len(state.views.view2_ids)
        else:
            n1 = n2 = max(n_labeled // 2, 1)
        state.samplers["view1"] = CyclingSampler(n1, bs, rngs[0])
        state.samplers["view2"] = CyclingSampler(n2, bs, rngs[1])
    else:
        state.samplers["labeled"] = CyclingSampler(max(n_labeled, 1), bs, rngs[0])
    if n_unlabeled and config.mode in UNLABELED_MODES:
        state.samplers["unlabeled"] = CyclingSampler(n_unlabeled, bs, rngs[2])
    return state


def _set_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def train_step_seg(state, labeled_view1, labeled_view2=None, unlabeled=None):
    """One descent step on the segmentation nets; the critic stays frozen.

    ``labeled_view*`` are ``(images, masks)`` tensor pairs, ``unlabeled`` an
    image tensor or None. Single-net modes pass their labeled batch as view 1.
    """
    cfg = state.config
    mode = cfg.mode
    if mode not in ("duo_segnet", "no_critic", "no_unlabeled", "single_net", "supervised_only"):
        raise ValueError(f"train_step_seg does not handle mode {mode!r}")
    if mode == "no_unlabeled" or mode == "supervised_only":
        unlabeled = None
    critic = state.critic
    if critic is not None:
        _set_grad(critic, False)
    psi = (lambda m: forward_critic(critic, m)) if critic is not None else None

    x1, y1 = labeled_view1
    lab_preds = [forward_seg(state.nets[0], x1)]
    sup = [L.supervised_loss(lab_preds[0], y1)]
    parts = {"ce": L.ce_loss(lab_preds[0], y1), "dice": L.dice_loss(lab_preds[0], y1)}
    if len(state.nets) == 2:
        x2, y2 = labeled_view2
        p2 = forward_seg(state.nets[1], x2)
        lab_preds.append(p2)
        sup.append(L.supervised_loss(p2, y2))
        parts["ce"] = parts["ce"] + L.ce_loss(p2, y2)
        parts["dice"] = parts["dice"] + L.dice_loss(p2, y2)

    agree = None
    unl_preds = []
    if unlabeled is not None:
        unl_preds = [forward_seg(net, unlabeled) for net in state.nets]
        if len(unl_preds) == 2:
            conf1 = conf2 = None
            if cfg.confidence_weighted_agreement and psi is not None:
                with torch.no_grad():
                    conf1, conf2 = psi(unl_preds[0]), psi(unl_preds[1])
            agree = L.agreement_loss(
                unl_preds[0], unl_preds[1],
                detach_targets=cfg.detach_agreement_targets, conf1=conf1, conf2=conf2,
            )

    adv = []
    if psi is not None:
        adv1 = L.adv_loss_for_seg(psi, lab_preds)
        adv.append(adv1)
        parts["adv1"] = adv1
        if unl_preds:
            adv2 = L.adv_loss_for_seg(psi, unl_preds)
            adv.append(adv2)
            parts["adv2"] = adv2

    breakdown = L.total_seg_loss(cfg.weights, sup, agree, adv, parts={k: v.detach() for k, v in parts.items()})
    if not torch.isfinite(breakdown.total):
        raise FloatingPointError("non-finite segmentation loss")
    state.seg_opt.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.seg_opt.step()
    state.seg_steps += 1
    if critic is not None:
        _set_grad(critic, True)
    return breakdown


def train_step_critic(state, labeled_view1, labeled_view2=None):
    """One update of the critic on ground truths vs detached labeled predictions.

    Returns the critic loss, or None when the mode has no critic.
    """
    if state.critic is None:
        return None
    critic = state.critic
    with torch.no_grad():
        preds = [forward_seg(state.nets[0], labeled_view1[0])]
        gts = [labeled_view1[1]]
        if len(state.nets) == 2 and labeled_view2 is not None:
            preds.append(forward_seg(state.nets[1], labeled_view2[0]))
            gts.append(labeled_view2[1])
    loss = L.adv_loss_labeled_for_critic(lambda m: forward_critic(critic, m), preds, gts)
    state.critic_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.critic_opt.step()
    state.critic_steps += 1
    return float(loss.detach())


def ema_update(teacher, student, decay):
    with torch.no_grad():
        for t, s in zip(teacher.parameters(), student.parameters()):
            t.mul_(decay).add_(s, alpha=1 - decay)


def train_step_mean_teacher(state, labeled, unlabeled=None):
    cfg = state.config
    student, teacher = state.nets[0], state.teacher
    x, y = labeled
    pred = forward_seg(student, x)
    sup = L.supervised_loss(pred, y)
    cons = None
    if unlabeled is not None and cfg.consistency_weight > 0:
        with torch.no_grad():
            target = forward_seg(teacher, unlabeled)
        cons = ((forward_seg(student, unlabeled) - target) ** 2).mean()
    weights = L.LossWeights(1.0, cfg.consistency_weight, 0.0)
    breakdown = L.total_seg_loss(weights, [sup], cons, parts={"ce": L.ce_loss(pred, y).detach()})
    if not torch.isfinite(breakdown.total):
        raise FloatingPointError("non-finite mean-teacher loss")
    state.seg_opt.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.seg_opt.step()
    ema_update(teacher, student, cfg.ema_decay)
    state.seg_steps += 1
    return breakdown


def pseudo_masks(net, images, batch_size=32):
    """Threshold predictions at 0.5 to make pseudo ground truth."""
    return (predict(net, images, batch_size) >= 0.5).float()


def pseudo_weight_at(epoch, config):
    ramp = config.pseudo_rampup * config.epochs
    if ramp <= 0:
        return config.pseudo_weight
    return config.pseudo_weight * min(1.0, epoch / ramp)


def train_step_pseudo_label(state, labeled, unlabeled_idx=None, unlabeled_images=None):
    x, y = labeled
    pred = forward_seg(state.nets[0], x)
    sup = [L.supervised_loss(pred, y)]
    w = state.pseudo_weight
    pseudo = None
    if unlabeled_idx is not None and w > 0:
        pu = forward_seg(state.nets[0], unlabeled_images[unlabeled_idx])
        pseudo = L.supervised_loss(pu, state.pseudo_masks[unlabeled_idx])
    weights = L.LossWeights(1.0, w, 0.0)
    breakdown = L.total_seg_loss(weights, sup, pseudo, parts={"ce": L.ce_loss(pred, y).detach()})
    if not torch.isfinite(breakdown.total):
        raise FloatingPointError("non-finite pseudo-label loss")
    state.seg_opt.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.seg_opt.step()
    state.seg_steps += 1
    return breakdown


@torch.no_grad()
def predict(net, images, batch_size=32):
    was_training = net.training
    net.eval()
    out = torch.cat([forward_seg(net, images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
    net.train(was_training)
    return out


def predict_state(state, images):
    """Probability maps from the network(s) selected for inference."""
    if state.teacher is not None:
        return predict(state.teacher, images)
    view = state.config.inference
    if len(state.nets) == 1 or view == "f1":
        return predict(state.nets[0], images)
    if view == "f2":
        return predict(state.nets[1], images)
    return 0.5 * (predict(state.nets[0], images) + predict(state.nets[1], images))


def _stack(arrays):
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrays]))


class _Tensors:
    def __init__(self, split, use_unlabeled):
        self.lab_x = _stack([s.image for s in split.train_labeled])
        self.lab_y = _stack([s.mask for s in split.train_labeled])
        self.unl_x = None
        if use_unlabeled and split.train_unlabeled:
            self.unl_x = _stack(split.train_unlabeled)
        self.test_x = _stack([s.image for s in split.test])
        self.test_y = [np.asarray(s.mask) for s in split.test]


def evaluate_state(state, images, targets):
    probs = predict_state(state, images).numpy()
    return evaluate_predictions(list(probs), targets)


def state_dict(state, extra=None):
    cfg = state.config
    return {
        "format": CKPT_FORMAT,
        "train_config": asdict(cfg),
        "epoch": state.epoch,
        "seg_steps": state.seg_steps,
        "critic_steps": state.critic_steps,
        "best_val_dsc": state.best_val_dsc,
        "nets": [n.state_dict() for n in state.nets],
        "critic": state.critic.state_dict() if state.critic is not None else None,
        "teacher": state.teacher.state_dict() if state.teacher is not None else None,
        "seg_opt": state.seg_opt.state_dict(),
        "critic_opt": state.critic_opt.state_dict() if state.critic_opt is not None else None,
        "rng": {
            "samplers": {k: s.state() for k, s in sorted(state.samplers.items())},
            "torch": torch.get_rng_state(),
        },
        **(extra or {}),
    }


def save_checkpoint(state, path, extra=None):
    tmp = path + ".tmp"
    torch.save(state_dict(state, extra), tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a {CKPT_FORMAT} checkpoint (format={ckpt.get('format')!r})")
    return ckpt


def restore_state(ckpt, config, in_channels):
    """Rebuild a TrainState holding the checkpoint's parameters."""
    state = init_state(config, in_channels)
    for net, sd in zip(state.nets, ckpt["nets"]):
        net.load_state_dict(sd)
    if state.critic is not None and ckpt["critic"] is not None:
        state.critic.load_state_dict(ckpt["critic"])
    if state.teacher is not None and ckpt["teacher"] is not None:
        state.teacher.load_state_dict(ckpt["teacher"])
    state.epoch = ckpt["epoch"]
    state.seg_steps = ckpt["seg_steps"]
    state.critic_steps = ckpt["critic_steps"]
    state.best_val_dsc = ckpt["best_val_dsc"]
    return state


def _batches_per_epoch(config, split):
    if config.batches_per_epoch is not None:
        return config.batches_per_epoch
    n = len(split.train_labeled) + len(split.train_unlabeled)
    return math.ceil(n / config.batch_size)


def _mean_dicts(dicts):
    keys = list(dict.fromkeys(k for d in dicts for k in d))
    return {k: math.fsum(d[k] for d in dicts if k in d) / sum(1 for d in dicts if k in d) for k in keys}


def fit(config, split, out_dir=None, extra_ckpt=None):
    """Train ``config.mode`` on ``split``; returns ``(state, MetricsReport)``.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per epoch),
    ``timing.jsonl`` and ``best.pt`` / ``last.pt`` checkpoints.
    """
    config.validate()
    mode = config.mode
    if len(split.train_labeled) < (2 if mode in TWO_NET_MODES else 1):
        raise ValueError(f"mode {mode} needs more labeled samples than {len(split.train_labeled)}")
    T = _Tensors(split, mode in UNLABELED_MODES)
    in_channels = T.lab_x.shape[1]
    state = init_state(config, in_channels, split=split)
    n_batches = _batches_per_epoch(config, split)
    report = MetricsReport(test_hash=split.test_hash)
    best_record = None
    last_good = None
    metrics_path = timing_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        timing_path = os.path.join(out_dir, "timing.jsonl")
        for p in (metrics_path, timing_path):
            open(p, "w").close()

    if state.views is not None:
        v1 = torch.tensor(state.views.view1_ids)
        v2 = torch.tensor(state.views.view2_ids)
        view_x = [T.lab_x[v1], T.lab_x[v2]]
        view_y = [T.lab_y[v1], T.lab_y[v2]]

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        state.epoch = epoch + 1
        if mode == "pseudo_label":
            state.pseudo_weight = pseudo_weight_at(epoch, config)
            if T.unl_x is not None and state.pseudo_weight > 0:
                state.pseudo_masks = pseudo_masks(state.nets[0], T.unl_x)
        seg_logs, critic_logs = [], []
        try:
            for _ in range(n_batches):
                unl_idx = state.samplers["unlabeled"].next() if "unlabeled" in state.samplers else None
                if state.views is not None:
                    i1, i2 = state.samplers["view1"].next(), state.samplers["view2"].next()
                    lab1 = (view_x[0][i1], view_y[0][i1])
                    lab2 = (view_x[1][i2], view_y[1][i2])
                else:
                    i = state.samplers["labeled"].next()
                    lab1, lab2 = (T.lab_x[i], T.lab_y[i]), None
                unl = T.unl_x[unl_idx] if unl_idx is not None else None
                for _ in range(config.k_s):
                    if mode == "mean_teacher":
                        b = train_step_mean_teacher(state, lab1, unl)
                    elif mode == "pseudo_label":
                        b = train_step_pseudo_label(state, lab1, unl_idx, T.unl_x)
                    else:
                        b = train_step_seg(state, lab1, lab2, unl)
                    seg_logs.append(b.to_dict())
                if state.critic is not None:
                    for _ in range(config.k_c):
                        critic_logs.append(train_step_critic(state, lab1, lab2))
        except FloatingPointError as e:
            raise TrainingAborted(f"epoch {state.epoch}: {e}", last_good) from e

        test_dsc, test_mae = evaluate_state(state, T.test_x, T.test_y)
        record = {
            "epoch": state.epoch,
            "mode": mode,
            "label_fraction": config.label_fraction,
            "seed": config.seed,
            "losses": _mean_dicts(seg_logs),
            "critic_loss": math.fsum(critic_logs) / len(critic_logs) if critic_logs else None,
            "test_dsc": test_dsc,
            "test_mae": test_mae,
            "seg_steps": state.seg_steps,
            "critic_steps": state.critic_steps,
        }
        report.history.append(record)
        log.info("%s epoch %d: dsc=%.2f mae=%.4f", mode, state.epoch, test_dsc, test_mae)
        improved = test_dsc > state.best_val_dsc
        if improved:
            state.best_val_dsc = test_dsc
            best_record = MetricRecord(mode, config.label_fraction, test_dsc, test_mae, len(split.test), config.seed)
        if out_dir:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            with open(timing_path, "a") as fh:
                fh.write(json.dumps({"epoch": state.epoch, "wall_time_s": time.perf_counter() - t0}) + "\n")
            if improved:
                last_good = save_checkpoint(state, os.path.join(out_dir, "best.pt"), extra_ckpt)
            if state.epoch == config.epochs:
                save_checkpoint(state, os.path.join(out_dir, "last.pt"), extra_ckpt)

    report.records.append(best_record)
    return state, report


def fit_baseline_mean_teacher(config, split, out_dir=None):
    return fit(replace(config, mode="mean_teacher"), split, out_dir)[1]


def fit_baseline_pseudo_label(config, split, out_dir=None):
    return fit(replace(config, mode="pseudo_label"), split, out_dir)[1]

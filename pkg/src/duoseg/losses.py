"""Loss terms for dual-view adversarial training.

Every pixel reduction is a mean over pixels and batch, so values do not
depend on resolution. Probabilities are clamped to [EPS, 1 - EPS] before any
log is taken.
"""
from dataclasses import dataclass, field

import torch

from .networks import EPS


@dataclass
class LossWeights:
    lambda_s: float = 1.0
    lambda_u: float = 0.3
    lambda_c: float = 0.2

    def __post_init__(self):
        for name in ("lambda_s", "lambda_u", "lambda_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    supervised: torch.Tensor
    unsupervised: torch.Tensor
    critic_adv: torch.Tensor
    parts: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "total": self.total,
            "supervised": self.supervised,
            "unsupervised": self.unsupervised,
            "critic_adv": self.critic_adv,
            **self.parts,
        }
        return {k: float(torch.as_tensor(v).detach()) for k, v in out.items()}


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _clamp(p):
    return p.clamp(EPS, 1 - EPS)


def _finite(x, what):
    if not torch.isfinite(x):
        raise FloatingPointError(f"{what} is not finite")
    return x


def _bce(target, pred):
    pred = _clamp(pred)
    return -(target * torch.log(pred) + (1 - target) * torch.log(1 - pred))


def ce_loss(pred, target):
    """Two-sided binary cross-entropy."""
    _check(pred, target)
    return _bce(target, pred).mean()


def _sample_sums(x):
    # leading axis is the batch for >= 3-d inputs; lower ranks are one sample
    if x.dim() >= 3:
        return x.flatten(1).sum(1)
    return x.sum().reshape(1)


def dice_loss(pred, target, smooth=1.0):
    _check(pred, target)
    inter = _sample_sums(pred * target)
    denom = _sample_sums(target) + _sample_sums(pred)
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def supervised_loss(pred, target, ce_weight=1.0, dice_weight=1.0):
    loss = ce_weight * ce_loss(pred, target)
    if dice_weight:
        loss = loss + dice_weight * dice_loss(pred, target)
    return loss


def agreement_loss(p1, p2, detach_targets=False, conf1=None, conf2=None):
    """Symmetric cross-entropy between two probability maps.

    With ``conf1``/``conf2`` (critic confidence of p1/p2), the term in which
    p_other serves as target is weighted per pixel by conf_other / mean.
    """
    _check(p1, p2)
    t1, t2 = (p1.detach(), p2.detach()) if detach_targets else (p1, p2)
    h12 = _bce(t1, p2)  # p2 pulled toward p1
    h21 = _bce(t2, p1)
    if conf1 is not None:
        w = conf1.detach()
        h12 = h12 * (w / w.mean())
    if conf2 is not None:
        w = conf2.detach()
        h21 = h21 * (w / w.mean())
    return 0.5 * (h12.mean() + h21.mean())


def _cat(maps):
    return torch.cat([m.reshape(-1) for m in maps])


def adv_loss_labeled_for_critic(critic, preds, gts):
    """Critic objective: -mean log psi(Y) - mean log(1 - psi(p)).

    ``critic`` maps a batch of masks to confidences. ``preds`` must already be
    detached from the segmentation networks.
    """
    real = _cat([_clamp(critic(y)) for y in gts])
    fake = _cat([_clamp(critic(p)) for p in preds])
    loss = -torch.log(real).mean() - torch.log(1 - fake).mean()
    return _finite(loss, "critic loss")


def adv_loss_for_seg(critic, preds):
    """Non-saturating generator term -mean log psi(p)."""
    conf = _cat([_clamp(critic(p)) for p in preds])
    return _finite(-torch.log(conf).mean(), "adversarial loss")


def total_seg_loss(weights, sup_terms, agree_term=None, adv_terms=(), parts=None):
    zero = torch.zeros(())
    supervised = sum(sup_terms, zero)
    unsupervised = agree_term if agree_term is not None else zero
    critic_adv = sum(adv_terms, zero)
    total = (
        weights.lambda_s * supervised
        + weights.lambda_u * unsupervised
        + weights.lambda_c * critic_adv
    )
    return LossBreakdown(total, supervised, unsupervised, critic_adv, dict(parts or {}))

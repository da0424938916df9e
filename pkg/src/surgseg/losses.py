"""Training objectives.

The supervised objective is pixel-mean softmax cross-entropy on the
main logits (1/2 scale) plus an auxiliary cross-entropy term (1/16
scale) weighted by ``aux_weight``.  Targets for each term are the
full-resolution labels subsampled by the matching power-of-two stride.
The adversarial game adds, for the segmentor, a spatial BCE pushing the
discriminator's confidence on generated maps towards 1, weighted by
``adv_weight``; the discriminator itself minimizes BCE(real, 1) +
BCE(fake, 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError


@dataclass(frozen=True)
class LossWeights:
    """Blend weights of the total objective."""

    aux_weight: float = 0.4
    adv_weight: float = 0.01

    def __post_init__(self) -> None:
        if self.aux_weight < 0 or self.adv_weight < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")


@dataclass
class LossBreakdown:
    """Individual terms plus their weighted total, as 0-d tensors."""

    main: Tensor
    aux: Tensor
    adv: Tensor
    total: Tensor

    def detached(self) -> dict[str, float]:
        return {
            "main": float(self.main.detach()),
            "aux": float(self.aux.detach()),
            "adv": float(self.adv.detach()),
            "total": float(self.total.detach()),
        }


def _subsample_factor(full: tuple[int, int], coarse: tuple[int, int], what: str) -> int:
    fh, fw = full
    ch, cw = coarse
    if ch == 0 or cw == 0 or fh % ch or fw % cw or fh // ch != fw // cw:
        raise ValueError(f"{what}: label size {fh}x{fw} is not an integer multiple of logits size {ch}x{cw}")
    return fh // ch


def cross_entropy_2d(logits: Tensor, labels: Tensor) -> Tensor:
    """Softmax cross-entropy averaged over all pixels (and batch).

    ``logits`` is (B, K, h, w) against integer ``labels`` (B, h, w);
    the unbatched (K, h, w) / (h, w) forms are accepted too.
    """
    if logits.dim() == 3 and labels.dim() == 2:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    if logits.dim() != 4 or labels.dim() != 3:
        raise ValueError(f"expected (B, K, h, w) logits with (B, h, w) labels, got {tuple(logits.shape)} and {tuple(labels.shape)}")
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} are misaligned")
    if labels.dtype.is_floating_point:
        raise ValueError(f"labels must be integer-typed, got {labels.dtype}")
    k = logits.shape[1]
    if bool(((labels < 0) | (labels >= k)).any()):
        raise ValueError(f"labels outside 0..{k - 1}")
    return F.cross_entropy(logits, labels.long(), reduction="mean")


def subsample_labels(labels: Tensor, factor: int) -> Tensor:
    """Keep every ``factor``-th pixel, anchored top-left (tensor twin of the numpy op)."""
    if factor < 1:
        raise ValueError(f"subsample factor must be positive, got {factor}")
    return labels[..., ::factor, ::factor].contiguous()


def seg_loss(
    main_logits: Tensor,
    aux_logits: Tensor,
    labels: Tensor,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Supervised part of the objective: main + aux cross-entropy.

    ``labels`` is the full-resolution map; targets for each head are
    derived by stride subsampling at the head's scale factor.  The
    returned breakdown carries ``adv = 0`` so it can be fed directly to
    :func:`total_loss`.
    """
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    f_main = _subsample_factor(labels.shape[-2:], main_logits.shape[-2:], "main head")
    f_aux = _subsample_factor(labels.shape[-2:], aux_logits.shape[-2:], "auxiliary head")
    main = cross_entropy_2d(main_logits, subsample_labels(labels, f_main))
    aux = cross_entropy_2d(aux_logits, subsample_labels(labels, f_aux))
    zero = torch.zeros((), dtype=main.dtype, device=main.device)
    return LossBreakdown(main=main, aux=aux, adv=zero, total=main + weights.aux_weight * aux)


def adversarial_loss(confidence: Tensor) -> Tensor:
    """Segmentor-side adversarial term: mean BCE of confidences against target 1.

    Requires confidences strictly inside (0, 1), which the discriminator
    guarantees; equals ``mean(-log c)``.
    """
    if bool((confidence <= 0).any()) or bool((confidence >= 1).any()):
        raise ValueError("confidence values must lie strictly in (0, 1)")
    return (-torch.log(confidence)).mean()


def discriminator_loss(conf_real: Tensor, conf_fake: Tensor) -> Tensor:
    """BCE(real, 1) + BCE(fake, 0) = mean(-log c_real) + mean(-log(1 - c_fake))."""
    for name, c in (("real", conf_real), ("fake", conf_fake)):
        if bool((c <= 0).any()) or bool((c >= 1).any()):
            raise ValueError(f"{name} confidence values must lie strictly in (0, 1)")
    return (-torch.log(conf_real)).mean() + (-torch.log1p(-conf_fake)).mean()


def total_loss(seg: LossBreakdown, adv: Tensor, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Full objective: main + aux_weight * aux + adv_weight * adv."""
    total = seg.main + weights.aux_weight * seg.aux + weights.adv_weight * adv
    return LossBreakdown(main=seg.main, aux=seg.aux, adv=adv, total=total)

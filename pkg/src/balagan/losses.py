"""Loss terms and the two weighted totals for adversarial translation training.

Every term is a mean over the batch (and over elements where applicable), so
the weight semantics do not depend on batch size. All functions are pure and
differentiable; they are safe to evaluate concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteGradient


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the total objectives.

    D total = hinge_D + lambda_ce * CE + lambda_reg * R1;
    G total = hinge_G + lambda_r * reconstruction + lambda_f * feature matching.
    """

    lambda_ce: float = 1.0
    lambda_reg: float = 10.0
    lambda_r: float = 0.1
    lambda_f: float = 1.0

    def __post_init__(self):
        for name in ("lambda_ce", "lambda_reg", "lambda_r", "lambda_f"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def one_hot(labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Indicator vectors for integer modality labels."""
    return F.one_hot(labels.long(), n_classes).to(torch.get_default_dtype())


def hinge_d_loss(adv_real_at_true: torch.Tensor, adv_fake_at_ref: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge loss on per-item scores already indexed at the true
    modality (reals) and at the reference modality (fakes):
    mean(max(0, 1 - real)) + mean(max(0, 1 + fake))."""
    return F.relu(1.0 - adv_real_at_true).mean() + F.relu(1.0 + adv_fake_at_ref).mean()


def hinge_g_loss(adv_fake_at_ref: torch.Tensor) -> torch.Tensor:
    """Generator hinge loss: minus the mean fake score at the reference modality."""
    return -adv_fake_at_ref.mean()


def _as_tensor(x) -> torch.Tensor:
    return x.data if hasattr(x, "data") and not isinstance(x, torch.Tensor) else x


def reconstruction_loss(x, x_rec) -> torch.Tensor:
    """Mean absolute difference between a batch and its self-translation G(x, x)."""
    x, x_rec = _as_tensor(x), _as_tensor(x_rec)
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


def feature_matching_loss(f_fake: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of discriminator-trunk features."""
    if f_fake.shape != f_ref.shape:
        raise ValueError(f"shape mismatch: {tuple(f_fake.shape)} vs {tuple(f_ref.shape)}")
    return (f_fake - f_ref).abs().mean()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy of classification logits against modality indices."""
    return F.cross_entropy(logits, labels.long())


def _adv_scores(d, images: torch.Tensor) -> torch.Tensor:
    out = d(images)
    return out[0] if isinstance(out, tuple) else out


def r1_penalty(d, real_batch, labels: torch.Tensor, mode: str = "true-class",
               create_graph: bool = True) -> torch.Tensor:
    """Mean squared norm of the adversarial score's input gradient at real images.

    `mode` selects what is differentiated: the score at each image's true
    modality index ("true-class", default) or the sum over all class scores
    ("sum"). Applied to real images only; the trainer never routes fakes here.
    """
    images = _as_tensor(real_batch).detach().requires_grad_(True)
    scores = _adv_scores(d, images)
    if mode == "true-class":
        selected = scores[torch.arange(scores.shape[0]), labels.long()]
    elif mode == "sum":
        selected = scores.sum(dim=1)
    else:
        raise ValueError(f"unknown r1 mode {mode!r}")
    (grad,) = torch.autograd.grad(selected.sum(), images, create_graph=create_graph)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("R1 input gradient is not finite")
    return grad.pow(2).sum(dim=(1, 2, 3)).mean()


def total_d_loss(gan_d: torch.Tensor, ce: torch.Tensor, r1: torch.Tensor,
                 w: LossWeights) -> torch.Tensor:
    return gan_d + w.lambda_ce * ce + w.lambda_reg * r1


def total_g_loss(gan_g: torch.Tensor, rec: torch.Tensor, fm: torch.Tensor,
                 w: LossWeights) -> torch.Tensor:
    return gan_g + w.lambda_r * rec + w.lambda_f * fm

"""Scalar training objectives.

L1 norms are per-cell means, so loss values do not depend on grid size and
the default weights mean the same thing at every resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Optional, Union

import torch
import torch.nn.functional as F

Scores = Union[torch.Tensor, Iterable[torch.Tensor]]

GENERATOR_TERMS = ("a_x", "a_w", "g_x", "g_w", "c_x", "c_w")
BREAKDOWN_FIELDS = ("a_x", "a_w", "g_x", "g_w", "c_x", "c_w", "d_x", "d_w", "total")


def _flatten_scores(scores: Scores, what: str) -> torch.Tensor:
    if isinstance(scores, torch.Tensor):
        flat = scores.reshape(-1)
    else:
        parts = [s.reshape(-1) for s in scores]
        flat = torch.cat(parts) if parts else torch.empty(0)
    if flat.numel() == 0:
        raise ValueError(f"{what} needs at least one score")
    return flat


def lsgan_discriminator_loss(real_scores: Scores, fake_scores: Scores) -> torch.Tensor:
    """Mean (s - 1)^2 over real patches plus mean s^2 over fake patches (no 1/2 factor)."""
    real = _flatten_scores(real_scores, "real_scores")
    fake = _flatten_scores(fake_scores, "fake_scores")
    return ((real - 1.0) ** 2).mean() + (fake**2).mean()


def lsgan_generator_loss(fake_scores: Scores) -> torch.Tensor:
    fake = _flatten_scores(fake_scores, "fake_scores")
    return ((fake - 1.0) ** 2).mean()


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def cycle_consistency_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    _same_shape(original, reconstructed)
    return (original - reconstructed).abs().mean()


def masked_alignment_loss(pred: torch.Tensor, y: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over observed cells; zero when nothing is observed."""
    _same_shape(pred, y)
    _same_shape(pred, mask)
    count = mask.sum()
    if count.item() == 0:
        return (pred * 0.0).sum()
    return ((y - pred).abs() * mask).sum() / count


def paired_regression_loss(x_sim: torch.Tensor, x_real: torch.Tensor) -> torch.Tensor:
    _same_shape(x_sim, x_real)
    return (x_sim - x_real).abs().mean()


@dataclass
class LossWeights:
    lambda_gw: float = 1.0
    lambda_cx: float = 10.0
    lambda_cw: float = 10.0
    lambda_aw: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{f.name} must be a non-negative finite number")

    def coefficient(self, term: str) -> float:
        return {
            "a_x": 1.0, "g_x": 1.0,
            "g_w": self.lambda_gw, "c_x": self.lambda_cx,
            "c_w": self.lambda_cw, "a_w": self.lambda_aw,
        }[term]


@dataclass
class LossBreakdown:
    """Named loss values; inactive terms are ``None``.

    Values may be tensors (for backprop) or floats (for logging); use
    :meth:`detached` to get a float-only copy.
    """

    a_x: Optional[object] = None
    a_w: Optional[object] = None
    g_x: Optional[object] = None
    g_w: Optional[object] = None
    c_x: Optional[object] = None
    c_w: Optional[object] = None
    d_x: Optional[object] = None
    d_w: Optional[object] = None
    total: Optional[object] = None

    def detached(self) -> "LossBreakdown":
        def f(v):
            return None if v is None else float(v.detach().item() if isinstance(v, torch.Tensor) else v)
        return LossBreakdown(**{k: f(getattr(self, k)) for k in BREAKDOWN_FIELDS})

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in BREAKDOWN_FIELDS}


def combined_generator_objective(parts: dict, weights: LossWeights, active_terms) -> LossBreakdown:
    """Weighted sum of the active generator-side terms.

    ``active_terms`` uses the names ``a_x, a_w, g_x, g_w, c_x, c_w`` (case
    insensitive). The paired term ``a_x`` carries unit weight.
    """
    active = {t.lower() for t in active_terms}
    unknown = active - set(GENERATOR_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    out = LossBreakdown()
    total = 0.0
    for term in GENERATOR_TERMS:
        if term not in active:
            continue
        if parts.get(term) is None:
            raise ValueError(f"active term {term} has no value")
        value = parts[term]
        setattr(out, term, value)
        total = total + weights.coefficient(term) * value
    out.total = total
    return out


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, class_weights) -> torch.Tensor:
    """Per-cell mean of weight[label] * -log softmax(logits)[label].

    ``logits`` is ``(N, C, A, R)`` and ``labels`` ``(N, A, R)``. Unlike
    ``F.cross_entropy(weight=...)`` this divides by the cell count, not by
    the summed weights.
    """
    if logits.dim() != 4 or labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not match")
    w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
    if w.numel() != logits.shape[1] or torch.any(w <= 0):
        raise ValueError("need one positive weight per class")
    nll = -F.log_softmax(logits, dim=1).gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return (w[labels.long()] * nll).mean()

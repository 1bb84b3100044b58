"""Reconstruction, timbre, perceptual and LSGAN losses and their per-substep weighting."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch.nn import functional as F

from .auxiliary import AsrModel, PitchModel

STEP_TERMS: dict[int, frozenset[str]] = {
    1: frozenset({"adv", "rec", "timbre", "pitch"}),
    2: frozenset({"adv", "timbre", "asr"}),
    3: frozenset({"adv", "rec", "timbre", "pitch"}),
}


class CompositionError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    adv: float = 0.05
    rec: float = 1.0
    timbre: float = 0.1
    pitch: float = 1.0
    asr: float = 0.5

    def __post_init__(self):
        for name in ("adv", "rec", "timbre", "pitch", "asr"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def __getitem__(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class LossBreakdown:
    substep: int
    components: dict[str, torch.Tensor]
    composite: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def as_record(self) -> dict:
        rec = {name: float(v.detach()) for name, v in sorted(self.components.items())}
        rec["composite"] = float(self.composite.detach())
        return rec


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_loss(m: torch.Tensor, m_hat: torch.Tensor) -> torch.Tensor:
    """Element-mean squared error between mels."""
    _same_shape(m, m_hat, "recon_loss")
    return ((m - m_hat) ** 2).mean()


def timbre_loss(e: torch.Tensor, e_hat: torch.Tensor) -> torch.Tensor:
    """``1 - cos(e, e_hat)``, averaged over the batch if the inputs are 2-D."""
    _same_shape(e, e_hat, "timbre_loss")
    if bool((e.norm(dim=-1) == 0).any()) or bool((e_hat.norm(dim=-1) == 0).any()):
        raise ValueError("timbre_loss: zero-norm embedding")
    # rounding can push cosine a hair outside [-1, 1]
    cos = F.cosine_similarity(e, e_hat, dim=-1, eps=0.0).clamp(-1.0, 1.0)
    return (1.0 - cos).mean()


def _embedding_mse(ref: torch.Tensor, hyp: torch.Tensor) -> torch.Tensor:
    return ((ref - hyp) ** 2).mean()


def pitch_perceptual_loss(m: torch.Tensor, m_hat: torch.Tensor, pitch_model: PitchModel) -> torch.Tensor:
    """MSE between first-layer pitch-predictor embeddings; ``m`` is a constant target."""
    _same_shape(m, m_hat, "pitch_perceptual_loss")
    with torch.no_grad():
        ref = pitch_model.first_layer(m)
    return _embedding_mse(ref, pitch_model.first_layer(m_hat))


def asr_perceptual_loss(m: torch.Tensor, m_hat: torch.Tensor, asr_model: AsrModel) -> torch.Tensor:
    """MSE between last-layer ASR embeddings; ``m`` is a constant target."""
    _same_shape(m, m_hat, "asr_perceptual_loss")
    with torch.no_grad():
        ref = asr_model(m).last_hidden
    return _embedding_mse(ref, asr_model(m_hat).last_hidden)


def lsgan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return ((fake_scores - 1.0) ** 2).mean()


def lsgan_discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return ((real_scores - 1.0) ** 2).mean() + (fake_scores**2).mean()


def lsgan_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(g_loss, d_loss)`` with real target 1 and fake target 0."""
    return lsgan_generator_loss(fake_scores), lsgan_discriminator_loss(real_scores, fake_scores)


def compose_step_loss(step: int, components: dict[str, torch.Tensor], weights: LossWeights = LossWeights()) -> LossBreakdown:
    if step not in STEP_TERMS:
        raise CompositionError(f"unknown substep {step}")
    want = STEP_TERMS[step]
    got = set(components)
    if got != want:
        detail = []
        if want - got:
            detail.append(f"missing {sorted(want - got)}")
        if got - want:
            detail.append(f"unexpected {sorted(got - want)}")
        raise CompositionError(f"substep {step}: " + ", ".join(detail))
    composite = sum(weights[name] * components[name] for name in sorted(want))
    return LossBreakdown(step, dict(components), torch.as_tensor(composite), weights)

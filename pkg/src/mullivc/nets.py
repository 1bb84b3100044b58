"""Generator (content encoder, timbre encoder, fine-grained conformer, decoder)
and the patch discriminator.

All tensors are batch-first and time-major: mels are ``(B, T, D)``, hidden
sequences ``(B, T, channels)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .audio import MelSpec


class AlignmentError(ValueError):
    pass


@dataclass
class NetConfig:
    mel_bins: int = 80
    content_channels: int = 256
    content_hidden: int = 256
    content_layers: int = 4
    content_kernel: int = 5
    encoder_layers: int = 5
    encoder_hidden: int = 512
    encoder_kernel: int = 5
    conformer_layers: int = 6
    conformer_heads: int = 4
    conformer_kernel: int = 15
    conformer_ff_mult: int = 4
    max_relative_position: int = 64
    decoder_blocks: int = 5
    decoder_hidden: int = 512
    decoder_kernel: int = 5
    ref_compress_factor: int = 4
    content_upsample: Fraction = Fraction(1)
    fine_grained: bool = True
    disc_channels: int = 32
    # hyperparameters of a frozen frame-rate phone recognizer whose posteriors replace the conv content encoder
    content_model: dict | None = None
    # one-hot argmax posteriors instead of the soft distribution
    content_hard: bool = False

    def __post_init__(self):
        self.content_upsample = Fraction(self.content_upsample)
        if self.content_channels <= 0:
            raise ValueError("content_channels must be positive")
        if self.ref_compress_factor < 1:
            raise ValueError("ref_compress_factor must be >= 1")
        if self.content_upsample <= 0:
            raise ValueError("content_upsample must be positive")
        if (2 * self.content_channels) % self.conformer_heads:
            raise ValueError("2 * content_channels must be divisible by conformer_heads")
        if self.content_model is not None and len(self.content_model["vocab"]) + 1 != self.content_channels:
            raise ValueError("content_channels must equal the content recognizer's vocabulary size plus blank")

    @classmethod
    def tiny(cls, mel_bins: int = 32, **overrides) -> "NetConfig":
        """Desk-scale configuration used by tests and the synthetic recipes."""
        base = dict(mel_bins=mel_bins, content_channels=16, content_hidden=32, content_layers=2,
                    encoder_layers=3, encoder_hidden=32, conformer_layers=2, conformer_heads=2,
                    conformer_kernel=5, conformer_ff_mult=2, max_relative_position=32,
                    decoder_blocks=2, decoder_hidden=48, disc_channels=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["content_upsample"] = str(self.content_upsample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown NetConfig field(s): {sorted(unknown)}")
        d = dict(d)
        if "content_upsample" in d:
            d["content_upsample"] = Fraction(d["content_upsample"])
        return cls(**d)


def content_length(frames: int, ratio: Fraction) -> int:
    return max(1, int(round(frames * ratio)))


def resample_nearest(x: torch.Tensor, length: int) -> torch.Tensor:
    """Nearest-neighbour resampling of ``(B, L, C)`` along time to ``length``."""
    n = x.shape[1]
    if n == length:
        return x
    idx = ((torch.arange(length, dtype=torch.float64) + 0.5) * n / length).floor().long().clamp_(max=n - 1)
    return x[:, idx]


class DeskContentEncoder(nn.Module):
    """Trainable convolutional content encoder with instance norm over time."""

    def __init__(self, config: NetConfig, frozen: bool = False):
        super().__init__()
        k = config.content_kernel
        chans = [config.mel_bins] + [config.content_hidden] * (config.content_layers - 1) + [config.content_channels]
        self.convs = nn.ModuleList(nn.Conv1d(a, b, k, padding=k // 2) for a, b in zip(chans[:-1], chans[1:]))
        self.ratio = config.content_upsample
        self.frozen = frozen
        if frozen:
            self.requires_grad_(False)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = mel.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        # strips per-utterance channel statistics, which carry most speaker offset
        x = (x - x.mean(dim=2, keepdim=True)) / torch.sqrt(x.var(dim=2, unbiased=False, keepdim=True) + 1e-5)
        x = x.transpose(1, 2)
        return resample_nearest(x, content_length(mel.shape[1], self.ratio))


class ExternalContentEncoder(nn.Module):
    """Frozen wrapper around externally computed content features.

    ``feature_fn`` maps a ``(B, T, D)`` mel batch to ``(B, L, C)`` features at
    ``ratio`` times the mel frame rate (for example a pretrained SSL model, or
    a lookup of precomputed features).
    """

    frozen = True

    def __init__(self, feature_fn: Callable[[torch.Tensor], torch.Tensor], ratio: Fraction = Fraction(1)):
        super().__init__()
        self.feature_fn = feature_fn
        self.ratio = Fraction(ratio)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            feats = torch.as_tensor(self.feature_fn(mel), dtype=mel.dtype)
        want = content_length(mel.shape[1], self.ratio)
        if abs(feats.shape[1] - want) > 1:
            raise AlignmentError(f"external content features have {feats.shape[1]} frames, expected {want} +/- 1")
        return resample_nearest(feats, want)


class PosteriorContentEncoder(nn.Module):
    """Frozen frame-rate phone recognizer; its per-frame phone posteriors are the content features.

    Posteriors keep what is said and drop most of who says it, which is the
    property a pretrained self-supervised content model provides at scale.
    """

    frozen = True

    def __init__(self, recognizer: nn.Module, ratio: Fraction = Fraction(1), hard: bool = False):
        super().__init__()
        self.recognizer = recognizer.requires_grad_(False).eval()
        self.ratio = Fraction(ratio)
        self.hard = hard

    def train(self, mode: bool = True):
        super().train(mode)
        self.recognizer.eval()
        return self

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            logits = self.recognizer(mel).logits
            if self.hard:
                # CTC output is mostly blank, so pick the likeliest phone, never the blank (index 0)
                post = F.one_hot(logits[..., 1:].argmax(dim=-1) + 1, logits.shape[-1]).to(mel.dtype)
            else:
                post = torch.softmax(logits, dim=-1)
        return resample_nearest(post, content_length(mel.shape[1], self.ratio))


class FrameSpectralEncoder(nn.Module):
    """Frame-wise spectral conv stack followed by an order-free temporal mean.

    The convolutions run along the frequency axis of each frame; pooling sorts
    frame features before averaging, so the result is bit-identical under any
    permutation of input frames.
    """

    def __init__(self, mel_bins: int, layers: int, hidden: int, kernel: int):
        super().__init__()
        convs, bins, ch = [], mel_bins, 1
        for i in range(layers):
            stride = 1 if i == 0 else 2
            convs.append(nn.Conv1d(ch, hidden, kernel, stride=stride, padding=kernel // 2))
            bins = (bins + 2 * (kernel // 2) - kernel) // stride + 1
            ch = hidden
        self.convs = nn.ModuleList(convs)
        self.proj = nn.Linear(hidden * bins, hidden)
        self.hidden = hidden

    def frame_features(self, mel: torch.Tensor) -> torch.Tensor:
        b, t, d = mel.shape
        x = mel.reshape(b * t, 1, d)
        for conv in self.convs:
            x = F.relu(conv(x))
        return F.relu(self.proj(x.flatten(1))).reshape(b, t, self.hidden)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.frame_features(mel)
        return torch.sort(h, dim=1).values.mean(dim=1)


class TimbreEncoder(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.body = FrameSpectralEncoder(config.mel_bins, config.encoder_layers, config.encoder_hidden,
                                         config.encoder_kernel)
        self.out = nn.Linear(config.encoder_hidden, config.content_channels)

    def forward(self, ref_mel: torch.Tensor) -> torch.Tensor:
        return self.out(self.body(ref_mel))


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with a learned per-head relative-position bias."""

    def __init__(self, dim: int, heads: int, max_distance: int):
        super().__init__()
        self.heads = heads
        self.max_distance = max_distance
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * max_distance + 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, dim = x.shape
        dh = dim // self.heads
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        pos = torch.arange(n)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.max_distance, self.max_distance) + self.max_distance
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh) + self.rel_bias[:, rel]
        y = torch.softmax(scores, dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(b, n, dim))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.net = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, mult * dim), nn.SiLU(), nn.Linear(mult * dim, dim))

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        # LayerNorm instead of BatchNorm keeps samples independent within a batch
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Linear(dim, dim)

    def forward(self, x):
        y = F.glu(self.pointwise_in(self.norm(x)), dim=-1)
        y = self.depthwise(y.transpose(1, 2)).transpose(1, 2)
        return self.pointwise_out(F.silu(self.mid_norm(y)))


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, kernel: int, ff_mult: int, max_distance: int):
        super().__init__()
        self.ff1 = FeedForward(dim, ff_mult)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = RelativeSelfAttention(dim, heads, max_distance)
        self.conv = ConvModule(dim, kernel)
        self.ff2 = FeedForward(dim, ff_mult)
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(self.attn_norm(x))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class Fused(NamedTuple):
    out: torch.Tensor  # (B, T, 2C)
    z_u: torch.Tensor  # (B, T, 2C)
    ref_compressed: torch.Tensor  # (B, ceil(T'/d), 2C)


def stack_frames(mel: torch.Tensor, factor: int) -> torch.Tensor:
    """Concatenate ``factor`` consecutive frames; the tail is zero-padded."""
    b, t, d = mel.shape
    groups = -(-t // factor)
    pad = groups * factor - t
    if pad:
        mel = F.pad(mel, (0, 0, 0, pad))
    return mel.reshape(b, groups, factor * d)


class FineGrainedTimbreConformer(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        dim = 2 * config.content_channels
        self.factor = config.ref_compress_factor
        self.ref_proj = nn.Linear(config.ref_compress_factor * config.mel_bins, dim)
        self.layers = nn.ModuleList(
            ConformerBlock(dim, config.conformer_heads, config.conformer_kernel, config.conformer_ff_mult,
                           config.max_relative_position)
            for _ in range(config.conformer_layers)
        )

    def forward(self, z_c: torch.Tensor, S: torch.Tensor, ref_mel: torch.Tensor, zero_reference: bool = False) -> Fused:
        t, c = z_c.shape[1], z_c.shape[2]
        z_s = S[:, None, :].expand(-1, t, -1)
        z_u = torch.cat([z_c, z_s], dim=-1)
        m_c = self.ref_proj(stack_frames(ref_mel, self.factor))
        if zero_reference:
            m_c = torch.zeros_like(m_c)
        x = torch.cat([z_u, m_c], dim=1)
        assert z_u.shape[-1] == 2 * c and x.shape[1] == t + -(-ref_mel.shape[1] // self.factor)
        for layer in self.layers:
            x = layer(x)
        return Fused(x[:, :t], z_u, m_c)


class MelDecoder(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        k = config.decoder_kernel
        h = config.decoder_hidden
        self.pre = nn.Conv1d(2 * config.content_channels, h, k, padding=k // 2)
        self.convs = nn.ModuleList(nn.Conv1d(h, h, k, padding=k // 2) for _ in range(config.decoder_blocks))
        self.norms = nn.ModuleList(nn.LayerNorm(h) for _ in range(config.decoder_blocks))
        self.out = nn.Linear(h, config.mel_bins)
        self.ratio = config.content_upsample

    def forward(self, h: torch.Tensor, target_frames: int) -> torch.Tensor:
        if h.shape[1] != content_length(target_frames, self.ratio):
            raise ValueError(f"decoder input has {h.shape[1]} frames; {target_frames} target frames "
                             f"need {content_length(target_frames, self.ratio)}")
        x = self.pre(h.transpose(1, 2))
        for conv, norm in zip(self.convs, self.norms):
            x = x + norm(F.relu(conv(x)).transpose(1, 2)).transpose(1, 2)
        y = self.out(x.transpose(1, 2))
        return resample_nearest(y, target_frames)


def _default_content_encoder(config: NetConfig) -> nn.Module:
    if config.content_model is None:
        return DeskContentEncoder(config)
    from .auxiliary import AsrModel  # the recognizer module imports this one

    # placeholder weights: only valid when a generator checkpoint is loaded on top;
    # training must pass the trained recognizer as content_encoder
    return PosteriorContentEncoder(AsrModel(**config.content_model), config.content_upsample, config.content_hard)


class Generator(nn.Module):
    def __init__(self, config: NetConfig, content_encoder: nn.Module | None = None):
        super().__init__()
        self.config = config
        if content_encoder is None:
            content_encoder = _default_content_encoder(config)
        self.content_encoder = content_encoder
        self.timbre_encoder = TimbreEncoder(config)
        if config.fine_grained:
            self.fusion = FineGrainedTimbreConformer(config)
        else:
            dim = 2 * config.content_channels
            self.fusion_linear = nn.Linear(dim, dim)
        self.decoder = MelDecoder(config)

    def encode_content(self, mel: torch.Tensor) -> torch.Tensor:
        return self.content_encoder(mel)

    def encode_timbre(self, ref_mel: torch.Tensor) -> torch.Tensor:
        return self.timbre_encoder(ref_mel)

    def fuse(self, z_c: torch.Tensor, S: torch.Tensor, ref_mel: torch.Tensor, zero_reference: bool = False) -> Fused:
        if self.config.fine_grained:
            return self.fusion(z_c, S, ref_mel, zero_reference)
        z_u = torch.cat([z_c, S[:, None, :].expand(-1, z_c.shape[1], -1)], dim=-1)
        return Fused(self.fusion_linear(z_u), z_u, z_u.new_zeros(z_u.shape[0], 0, z_u.shape[2]))

    def decode(self, h: torch.Tensor, target_frames: int) -> torch.Tensor:
        return self.decoder(h, target_frames)

    def forward(self, content_mel: torch.Tensor, ref_mel: torch.Tensor) -> torch.Tensor:
        z_c = self.encode_content(content_mel)
        S = self.encode_timbre(ref_mel)
        return self.decode(self.fuse(z_c, S, ref_mel).out, content_mel.shape[1])


class PatchDiscriminator(nn.Module):
    """Four stride-2 3x3 convolutions over the mel image, then a 1-channel 3x3 score map.

    A ``T x D`` mel yields a ``ceil(T/16) x ceil(D/16)`` score grid.
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        chans = [1, channels, 2 * channels, 4 * channels, 8 * channels]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        self.score = nn.Conv2d(chans[-1], 1, 3, padding=1)

    @staticmethod
    def grid_shape(frames: int, bins: int) -> tuple[int, int]:
        return -(-frames // 16), -(-bins // 16)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = mel[:, None]
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.score(x)[:, 0]


def _mel_tensor(mel: MelSpec) -> torch.Tensor:
    return torch.from_numpy(np.asarray(mel.values, dtype=np.float32))[None]


@torch.no_grad()
def convert(content_mel: MelSpec, timbre_mel: MelSpec, generator: Generator) -> MelSpec:
    """Inference path: content of ``content_mel`` spoken with the timbre of ``timbre_mel``."""
    was_training = generator.training
    generator.eval()
    try:
        out = generator(_mel_tensor(content_mel), _mel_tensor(timbre_mel))
    finally:
        generator.train(was_training)
    return MelSpec(out[0].numpy())


@torch.no_grad()
def discriminate(mel: MelSpec, discriminator: PatchDiscriminator) -> np.ndarray:
    return discriminator(_mel_tensor(mel))[0].numpy()

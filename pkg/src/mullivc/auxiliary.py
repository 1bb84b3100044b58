"""Frozen auxiliary networks used by the losses: speaker verification,
CTC phoneme recognition and pitch prediction, with their training routines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .audio import MelSpec
from .checkpoint import load_checkpoint, load_module, module_tensors, save_checkpoint
from .corpus import Corpus, Utterance
from .nets import FrameSpectralEncoder, NetConfig, stack_frames

logger = logging.getLogger(__name__)

SV_DIM = 256
ASR_REDUCTION = 4
BLANK = 0
# returned for label sequences that no alignment can produce
CTC_INFEASIBLE = 1.0e4
_NEG = -1.0e30


def freeze(model: nn.Module) -> nn.Module:
    model.requires_grad_(False)
    model.eval()
    return model


# --- speaker verification ------------------------------------------------

class SVModel(nn.Module):
    """Timbre-encoder body with a final 512 -> 256 projection (hidden size configurable)."""

    kind = "sv"

    def __init__(self, mel_bins: int, layers: int = 5, hidden: int = 512, kernel: int = 5):
        super().__init__()
        self.hparams = dict(mel_bins=mel_bins, layers=layers, hidden=hidden, kernel=kernel)
        self.body = FrameSpectralEncoder(mel_bins, layers, hidden, kernel)
        self.proj = nn.Linear(hidden, SV_DIM)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.proj(self.body(mel))


# --- ASR ------------------------------------------------------------------

class AsrOutputs(NamedTuple):
    logits: torch.Tensor  # (B, ceil(T/4), V + 1), blank at index 0
    last_hidden: torch.Tensor  # (B, ceil(T/4), H)


class AsrModel(nn.Module):
    """Frame-stacking (x4) front, residual conv blocks, CTC head over phones + blank."""

    kind = "asr"

    def __init__(self, mel_bins: int, vocab: Sequence[str], hidden: int = 256, layers: int = 3, kernel: int = 5,
                 reduction: int = ASR_REDUCTION):
        super().__init__()
        self.vocab = list(vocab)
        self.reduction = reduction
        self.hparams = dict(mel_bins=mel_bins, vocab=self.vocab, hidden=hidden, layers=layers, kernel=kernel,
                            reduction=reduction)
        self.front = nn.Linear(reduction * mel_bins, hidden)
        self.convs = nn.ModuleList(nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2) for _ in range(layers))
        self.norms = nn.ModuleList(nn.LayerNorm(hidden) for _ in range(layers))
        self.head = nn.Linear(hidden, len(self.vocab) + 1)

    def forward(self, mel: torch.Tensor) -> AsrOutputs:
        x = torch.tanh(self.front(stack_frames(mel, self.reduction)))
        for conv, norm in zip(self.convs, self.norms):
            x = norm(x + F.relu(conv(x.transpose(1, 2)).transpose(1, 2)))
        return AsrOutputs(self.head(x), x)

    def encode_labels(self, tokens: Sequence[str]) -> list[int]:
        index = {t: i + 1 for i, t in enumerate(self.vocab)}
        return [index[t] for t in tokens]


def _label_lists(labels) -> list[list[int]]:
    if isinstance(labels, torch.Tensor):
        labels = labels.tolist()
    if not len(labels) or not isinstance(labels[0], (list, tuple)):
        return [list(labels)]
    return [list(x) for x in labels]


def ctc_feasible(label: Sequence[int], frames: int) -> bool:
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats <= frames


def ctc_loss(logits: torch.Tensor, labels, input_lengths: Sequence[int] | None = None) -> torch.Tensor:
    """Negative log marginal likelihood of each label under the CTC lattice.

    ``logits`` is ``(T, V)`` for one sequence or ``(B, T, V)``; blank is index
    0. Returns a scalar for one sequence, else a ``(B,)`` vector. Labels that
    need more frames than available score :data:`CTC_INFEASIBLE` (no gradient).
    """
    single = logits.dim() == 2
    if single:
        logits = logits[None]
    lab = _label_lists(labels)
    b, t_max, _ = logits.shape
    if len(lab) != b:
        raise ValueError(f"{len(lab)} label sequences for a batch of {b}")
    lengths = list(input_lengths) if input_lengths is not None else [t_max] * b
    feasible = [ctc_feasible(l, n) for l, n in zip(lab, lengths)]
    out = logits.new_full((b,), CTC_INFEASIBLE)
    rows = [i for i, ok in enumerate(feasible) if ok]
    if rows:
        out = out.index_put((torch.tensor(rows),), _ctc_nll(
            logits[rows], [lab[i] for i in rows], [lengths[i] for i in rows]))
    return out[0] if single else out


def _ctc_nll(logits: torch.Tensor, labels: list[list[int]], lengths: list[int]) -> torch.Tensor:
    log_probs = F.log_softmax(logits, dim=-1)
    b, t_max, _ = log_probs.shape
    max_len = max((len(l) for l in labels), default=0)
    s = 2 * max_len + 1
    ext = torch.full((b, s), BLANK, dtype=torch.long)
    skip = torch.zeros((b, s), dtype=torch.bool)
    for i, lab in enumerate(labels):
        for j, tok in enumerate(lab):
            ext[i, 2 * j + 1] = tok
            if j > 0 and lab[j - 1] != tok:
                skip[i, 2 * j + 1] = True
    emit = log_probs.gather(2, ext[:, None, :].expand(b, t_max, s))  # (B, T, S)
    neg = log_probs.new_full((b, 1), _NEG)
    alpha = torch.cat([emit[:, 0, :2], log_probs.new_full((b, s - 2), _NEG)], dim=1) if s > 1 else emit[:, 0, :1]
    length_t = torch.tensor(lengths)
    for t in range(1, t_max):
        prev1 = torch.cat([neg, alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg, neg, alpha[:, :-2]], dim=1)[:, :s]
        prev2 = torch.where(skip, prev2, torch.full_like(prev2, _NEG))
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        alpha = torch.where((t < length_t)[:, None], new, alpha)
    ends = []
    for i, lab in enumerate(labels):
        last = 2 * len(lab)
        if last == 0:
            ends.append(alpha[i, 0])
        else:
            ends.append(torch.logsumexp(alpha[i, last - 1 : last + 1], dim=0))
    return -torch.stack(ends)


def ctc_decode(logits: torch.Tensor, vocab: Sequence[str] | None = None) -> list:
    """Best-path decode of ``(T, V)`` logits: argmax, collapse repeats, drop blanks."""
    path = torch.as_tensor(logits).argmax(dim=-1).tolist()
    out, prev = [], None
    for k in path:
        if k != prev and k != BLANK:
            out.append(vocab[k - 1] if vocab is not None else k)
        prev = k
    return out


# --- pitch ----------------------------------------------------------------

class PitchOutputs(NamedTuple):
    first_hidden: torch.Tensor  # (B, T, H)
    log_f0: torch.Tensor  # (B, T); 0 on unvoiced frames


class PitchModel(nn.Module):
    """Two conv/ReLU/LayerNorm layers and a linear head, as in variance predictors."""

    kind = "pitch"
    # predictions below log(60 Hz) / 2 are read as unvoiced
    voicing_cut = 0.5 * math.log(60.0)

    def __init__(self, mel_bins: int, hidden: int = 256, kernel: int = 3):
        super().__init__()
        self.hparams = dict(mel_bins=mel_bins, hidden=hidden, kernel=kernel)
        self.conv1 = nn.Conv1d(mel_bins, hidden, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(hidden)
        self.head = nn.Linear(hidden, 1)

    def first_layer(self, mel: torch.Tensor) -> torch.Tensor:
        return self.norm1(F.relu(self.conv1(mel.transpose(1, 2))).transpose(1, 2))

    def forward(self, mel: torch.Tensor) -> PitchOutputs:
        h1 = self.first_layer(mel)
        h2 = self.norm2(F.relu(self.conv2(h1.transpose(1, 2))).transpose(1, 2))
        return PitchOutputs(h1, self.head(h2)[..., 0])

    @staticmethod
    def to_hz(log_f0: torch.Tensor) -> torch.Tensor:
        return torch.where(log_f0 > PitchModel.voicing_cut, torch.exp(log_f0), torch.zeros_like(log_f0))


def f0_target(f0: np.ndarray) -> np.ndarray:
    return np.where(f0 > 0, np.log(np.maximum(f0, 1e-6)), 0.0).astype(np.float32)


# --- MelSpec-level wrappers -------------------------------------------------

def _mel(mel: MelSpec) -> torch.Tensor:
    return torch.from_numpy(np.asarray(mel.values, dtype=np.float32))[None]


@torch.no_grad()
def embed_sv(mel: MelSpec, model: SVModel) -> np.ndarray:
    return model(_mel(mel))[0].numpy()


@torch.no_grad()
def asr_forward(mel: MelSpec, model: AsrModel) -> AsrOutputs:
    out = model(_mel(mel))
    return AsrOutputs(out.logits[0], out.last_hidden[0])


@torch.no_grad()
def pitch_forward(mel: MelSpec, model: PitchModel) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(first_hidden, f0_hz)`` for one mel."""
    out = model(_mel(mel))
    return out.first_hidden[0].numpy(), PitchModel.to_hz(out.log_f0[0]).numpy()


# --- training -------------------------------------------------------------

@dataclass
class AuxTrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    crop_frames: int = 48
    seed: int = 0
    hidden: int = 256
    layers: int | None = None
    margin: float = 0.2
    scale: float = 30.0
    log_interval: int = 100
    # ASR only: random frequency-axis shift (max bins) and spectral tilt per utterance
    voice_shift: float = 0.0
    voice_tilt: float = 0.0


def _rng_and_seed(config: AuxTrainConfig) -> np.random.Generator:
    torch.manual_seed(config.seed)
    return np.random.default_rng(config.seed)


def _random_crops(utts: Sequence[Utterance], crop: int, rng: np.random.Generator) -> tuple[torch.Tensor, list[int]]:
    n = min(crop, min(u.frames for u in utts))
    starts = [int(rng.integers(u.frames - n + 1)) for u in utts]
    batch = np.stack([u.mel.values[s : s + n] for u, s in zip(utts, starts)])
    return torch.from_numpy(batch), starts


def train_sv(corpus: Corpus, mode: str = "supervised", config: AuxTrainConfig = AuxTrainConfig(),
             teacher: Mapping[str, np.ndarray] | None = None, losses: list | None = None) -> SVModel:
    """Train the SV embedder and return it frozen.

    ``distill`` regresses precomputed teacher vectors (MSE); ``supervised``
    uses an additive-margin softmax over corpus speakers.
    """
    if mode not in ("distill", "supervised"):
        raise ValueError(f"unknown SV training mode {mode!r}")
    if mode == "distill":
        if not teacher:
            raise ValueError("distill mode needs teacher embeddings for every utterance")
        missing = [u.utterance_id for u in corpus.utterances if u.utterance_id not in teacher]
        if missing:
            raise ValueError(f"no teacher embedding for {len(missing)} utterance(s), e.g. {missing[0]!r}")
    elif len(corpus.speakers) < 2:
        raise ValueError("supervised SV training needs at least 2 speakers")
    rng = _rng_and_seed(config)
    model = SVModel(corpus.mel_bins, layers=config.layers or 5, hidden=config.hidden)
    speakers = corpus.speakers
    class_w = nn.Parameter(torch.randn(len(speakers), SV_DIM) * 0.1)
    params = list(model.parameters()) + ([class_w] if mode == "supervised" else [])
    opt = torch.optim.Adam(params, lr=config.lr)
    spk_index = {s: i for i, s in enumerate(speakers)}
    utts = corpus.utterances
    for step in range(config.steps):
        picked = [utts[i] for i in rng.integers(len(utts), size=config.batch_size)]
        mel, _ = _random_crops(picked, config.crop_frames, rng)
        emb = model(mel)
        if mode == "distill":
            target = torch.from_numpy(np.stack([np.asarray(teacher[u.utterance_id], np.float32) for u in picked]))
            loss = F.mse_loss(emb, target)
        else:
            y = torch.tensor([spk_index[u.speaker_id] for u in picked])
            cos = F.normalize(emb, dim=1) @ F.normalize(class_w, dim=1).T
            logits = config.scale * (cos - config.margin * F.one_hot(y, len(speakers)))
            loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if losses is not None:
            losses.append(float(loss.detach()))
        if config.log_interval and step % config.log_interval == 0:
            logger.info("sv step %d loss %.4f", step, float(loss.detach()))
    return freeze(model)


def perturb_voice(mel: np.ndarray, rng: np.random.Generator, max_shift: float, max_tilt: float) -> np.ndarray:
    """Shift each ``(T, D)`` item of a batch along frequency (linear interpolation, edge clamped) and add a tilt.

    A cheap stand-in for vocal-tract-length perturbation, which makes a
    recognizer trained on few speakers less sensitive to who is talking.
    """
    b, _, d = mel.shape
    bins = np.arange(d, dtype=np.float64)
    out = np.empty_like(mel)
    for i in range(b):
        src = np.clip(bins - rng.uniform(-max_shift, max_shift), 0, d - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, d - 1)
        frac = (src - lo)[None, :]
        tilt = rng.uniform(-max_tilt, max_tilt) * (bins - (d - 1) / 2.0)
        out[i] = (1 - frac) * mel[i][:, lo] + frac * mel[i][:, hi] + tilt[None, :]
    return out


def train_asr(corpus: Corpus, config: AuxTrainConfig = AuxTrainConfig(), losses: list | None = None,
              reduction: int = ASR_REDUCTION) -> AsrModel:
    rng = _rng_and_seed(config)
    model = AsrModel(corpus.mel_bins, corpus.phone_inventory(), hidden=config.hidden, layers=config.layers or 3,
                     reduction=reduction)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    utts = corpus.utterances
    for step in range(config.steps):
        picked = [utts[i] for i in rng.integers(len(utts), size=config.batch_size)]
        t_max = max(u.frames for u in picked)
        mel = np.zeros((len(picked), t_max, corpus.mel_bins), np.float32)
        for i, u in enumerate(picked):
            mel[i, : u.frames] = u.mel.values
        if config.voice_shift or config.voice_tilt:
            mel = perturb_voice(mel, rng, config.voice_shift, config.voice_tilt)
        out = model(torch.from_numpy(mel))
        labels = [model.encode_labels(u.tokens) for u in picked]
        lengths = [-(-u.frames // reduction) for u in picked]
        loss = ctc_loss(out.logits, labels, lengths).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if losses is not None:
            losses.append(float(loss.detach()))
        if config.log_interval and step % config.log_interval == 0:
            logger.info("asr step %d loss %.4f", step, float(loss.detach()))
    return freeze(model)


def train_content_recognizer(corpus: Corpus, config: AuxTrainConfig = AuxTrainConfig(),
                             losses: list | None = None) -> AsrModel:
    """Frame-rate (no time reduction) CTC phone recognizer, for use as a posterior content encoder."""
    return train_asr(corpus, config, losses, reduction=1)


def posterior_net_config(base: NetConfig, recognizer: AsrModel) -> NetConfig:
    """``base`` rewired so its content features are ``recognizer``'s phone posteriors."""
    if recognizer.reduction != 1:
        raise ValueError("a content recognizer must run at the mel frame rate (reduction 1)")
    heads = base.conformer_heads
    channels = len(recognizer.vocab) + 1
    if (2 * channels) % heads:
        heads = 1
    return replace(base, content_channels=channels, content_model=dict(recognizer.hparams), conformer_heads=heads)


def train_pitch(corpus: Corpus, config: AuxTrainConfig = AuxTrainConfig(), losses: list | None = None) -> PitchModel:
    rng = _rng_and_seed(config)
    model = PitchModel(corpus.mel_bins, hidden=config.hidden)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    utts = corpus.utterances
    for step in range(config.steps):
        picked = [utts[i] for i in rng.integers(len(utts), size=config.batch_size)]
        mel, starts = _random_crops(picked, config.crop_frames, rng)
        n = mel.shape[1]
        target = torch.from_numpy(np.stack([f0_target(u.f0[s : s + n]) for u, s in zip(picked, starts)]))
        loss = F.mse_loss(model(mel).log_f0, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if losses is not None:
            losses.append(float(loss.detach()))
        if config.log_interval and step % config.log_interval == 0:
            logger.info("pitch step %d loss %.4f", step, float(loss.detach()))
    return freeze(model)


# --- persistence ----------------------------------------------------------

_KINDS = {"sv": SVModel, "asr": AsrModel, "pitch": PitchModel}


def save_aux(model: nn.Module, path) -> None:
    save_checkpoint(path, model.kind, model.hparams, module_tensors(model, model.kind))


def load_aux(path, kind: str | None = None) -> nn.Module:
    meta, arrays = load_checkpoint(path, kind)
    cls = _KINDS.get(meta["kind"])
    if cls is None:
        raise ValueError(f"{path}: not an auxiliary checkpoint (kind {meta['kind']!r})")
    model = cls(**meta["config"])
    load_module(model, arrays, meta["kind"])
    return freeze(model)


@dataclass
class AuxModels:
    sv: SVModel
    asr: AsrModel
    pitch: PitchModel

    def modules(self):
        return (self.sv, self.asr, self.pitch)

    def freeze(self) -> "AuxModels":
        for m in self.modules():
            freeze(m)
        return self


def load_teacher_embeddings(paths: Mapping[str, str]) -> dict[str, np.ndarray]:
    """Read one flat little-endian float32 file of 256 values per utterance."""
    out = {}
    for utt_id, path in paths.items():
        v = np.fromfile(path, dtype="<f4")
        if v.size != SV_DIM:
            raise ValueError(f"{path}: teacher embedding has {v.size} values, expected {SV_DIM}")
        out[utt_id] = v
    return out

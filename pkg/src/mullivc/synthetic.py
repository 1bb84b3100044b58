"""Synthetic corpora with known content, timbre and prosody factors.

Every mel is rendered in two stages::

    neutral[t] = template[phone(t)] + pitch_bump(f0[t]) + noise[t]
    mel[t, b]  = neutral[t, clip(b - shift)] + tilt * (b - (D - 1) / 2)

The first stage carries content and prosody, the second is the speaker's
timbre transform (a frequency-axis shift plus a linear spectral tilt).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .audio import MelSpec
from .corpus import Corpus, Utterance

F0_LO, F0_HI = 60.0, 500.0


@dataclass(frozen=True)
class SpeakerTimbre:
    shift: int
    tilt: float
    base_f0: float


@dataclass(frozen=True)
class SyntheticSpec:
    n_languages: int = 2
    phonemes_per_language: int = 8
    speakers_per_language: int = 2
    utterances_per_speaker: int = 8
    phones_per_utterance: tuple[int, int] = (6, 10)
    phone_duration: tuple[int, int] = (4, 9)
    mel_bins: int = 32
    unvoiced_fraction: float = 0.25
    shift_range: tuple[int, int] = (-3, 3)
    tilt_range: tuple[float, float] = (-0.08, 0.08)
    f0_range: tuple[float, float] = (90.0, 250.0)
    noise: float = 0.05
    bilingual: bool = False
    timbres: tuple[SpeakerTimbre, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("n_languages", "phonemes_per_language", "speakers_per_language",
                     "utterances_per_speaker", "mel_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.phones_per_utterance
        if not 1 <= lo <= hi:
            raise ValueError("phones_per_utterance must satisfy 1 <= lo <= hi")
        lo, hi = self.phone_duration
        if not 1 <= lo <= hi:
            raise ValueError("phone_duration must satisfy 1 <= lo <= hi")
        if self.timbres is not None and len(self.timbres) != self.n_speakers:
            raise ValueError(f"timbres lists {len(self.timbres)} speakers, spec has {self.n_speakers}")

    @property
    def n_speakers(self) -> int:
        return self.speakers_per_language if self.bilingual else self.n_languages * self.speakers_per_language

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec field(s): {sorted(unknown)}")
        d = dict(d)
        for key in ("phones_per_utterance", "phone_duration", "shift_range", "tilt_range", "f0_range"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("timbres") is not None:
            d["timbres"] = tuple(SpeakerTimbre(**t) if isinstance(t, dict) else SpeakerTimbre(*t) for t in d["timbres"])
        return cls(**d)


def apply_timbre(neutral: np.ndarray, timbre: SpeakerTimbre) -> np.ndarray:
    """Shift every frame ``timbre.shift`` bins up the frequency axis and add the tilt."""
    d = neutral.shape[1]
    src = np.clip(np.arange(d) - timbre.shift, 0, d - 1)
    tilt = timbre.tilt * (np.arange(d) - (d - 1) / 2.0)
    return (neutral[:, src] + tilt[None, :]).astype(np.float32)


def pitch_bin(f0: float, mel_bins: int) -> float:
    span = 0.2 * mel_bins
    return 1.0 + span * (math.log(f0) - math.log(F0_LO)) / (math.log(F0_HI) - math.log(F0_LO))


@dataclass
class LanguageProsody:
    declination: float
    tone_depth: float
    tone_period: float


@dataclass
class SyntheticWorld:
    """Fixed templates, prosody and speaker factors drawn from one spec."""

    spec: SyntheticSpec
    templates: dict[str, np.ndarray] = field(init=False)
    voiced: dict[str, bool] = field(init=False)
    inventories: list[list[str]] = field(init=False)
    prosody: list[LanguageProsody] = field(init=False)
    timbres: dict[str, SpeakerTimbre] = field(init=False)
    speaker_languages: dict[str, list[int]] = field(init=False)

    def __post_init__(self):
        spec = self.spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
        d = spec.mel_bins
        bins = np.arange(d)
        self.templates, self.voiced, self.inventories, self.prosody = {}, {}, [], []
        n_unvoiced = int(round(spec.unvoiced_fraction * spec.phonemes_per_language))
        for lang in range(spec.n_languages):
            inv = [f"L{lang}p{i}" for i in range(spec.phonemes_per_language)]
            self.inventories.append(inv)
            for i, token in enumerate(inv):
                env = np.full(d, -6.0)
                for _ in range(3):
                    c = rng.uniform(0.15 * d, 0.9 * d)
                    w = rng.uniform(0.04 * d, 0.08 * d)
                    env += rng.uniform(2.5, 4.5) * np.exp(-0.5 * ((bins - c) / w) ** 2)
                self.templates[token] = env
                self.voiced[token] = i >= n_unvoiced
            self.prosody.append(LanguageProsody(
                declination=float(rng.uniform(-0.35, 0.1)),
                tone_depth=float(rng.uniform(0.05, 0.25)),
                tone_period=float(rng.uniform(8.0, 24.0)),
            ))

        names = self._speaker_names()
        if spec.timbres is not None:
            timbres = list(spec.timbres)
        else:
            n = len(names)
            shifts = np.round(np.linspace(*spec.shift_range, n)).astype(int) if n > 1 else np.array([0])
            tilts = np.linspace(*spec.tilt_range, n) if n > 1 else np.zeros(1)
            f0s = np.geomspace(*spec.f0_range, n) if n > 1 else np.array([math.sqrt(spec.f0_range[0] * spec.f0_range[1])])
            shifts, tilts, f0s = rng.permutation(shifts), rng.permutation(tilts), rng.permutation(f0s)
            tilt_step = (spec.tilt_range[1] - spec.tilt_range[0]) / max(n, 1)
            timbres = [
                SpeakerTimbre(int(s), float(t + rng.uniform(-0.2, 0.2) * tilt_step), float(f * rng.uniform(0.97, 1.03)))
                for s, t, f in zip(shifts, tilts, f0s)
            ]
        self.timbres = dict(zip(names, timbres))

    def _speaker_names(self) -> list[str]:
        spec = self.spec
        if spec.bilingual:
            names = [f"S{k}" for k in range(spec.speakers_per_language)]
            self.speaker_languages = {s: list(range(spec.n_languages)) for s in names}
        else:
            names, self.speaker_languages = [], {}
            for lang in range(spec.n_languages):
                for k in range(spec.speakers_per_language):
                    name = f"L{lang}S{k}"
                    names.append(name)
                    self.speaker_languages[name] = [lang]
        return names

    def draw_script(self, lang: int, base_f0: float, rng: np.random.Generator):
        """Random phone sequence with aligned spans and an F0 contour."""
        spec = self.spec
        inv = self.inventories[lang]
        n = int(rng.integers(spec.phones_per_utterance[0], spec.phones_per_utterance[1] + 1))
        tokens = []
        for _ in range(n):
            choices = [t for t in inv if not tokens or t != tokens[-1]] or inv
            tokens.append(choices[rng.integers(len(choices))])
        durations = rng.integers(spec.phone_duration[0], spec.phone_duration[1] + 1, size=n)
        phones, start = [], 0
        for tok, dur in zip(tokens, durations):
            phones.append((tok, start, start + int(dur)))
            start += int(dur)
        total = start
        pros = self.prosody[lang]
        t = np.arange(total)
        phase = rng.uniform(0, 2 * np.pi)
        contour = base_f0 * np.exp(pros.declination * t / total
                                   + pros.tone_depth * np.sin(2 * np.pi * t / pros.tone_period + phase))
        f0 = np.zeros(total)
        for tok, s, e in phones:
            if self.voiced[tok]:
                f0[s:e] = np.clip(contour[s:e], F0_LO, F0_HI)
        return phones, f0.astype(np.float32)

    def render_neutral(self, phones, f0, noise: np.ndarray) -> np.ndarray:
        d = self.spec.mel_bins
        bins = np.arange(d)
        out = np.empty((len(f0), d))
        for tok, s, e in phones:
            out[s:e] = self.templates[tok]
        for t in np.flatnonzero(f0 > 0):
            out[t] += 2.0 * np.exp(-0.5 * ((bins - pitch_bin(float(f0[t]), d)) / 0.8) ** 2)
        return (out + noise).astype(np.float32)

    def render(self, phones, f0, timbre: SpeakerTimbre, noise: np.ndarray) -> np.ndarray:
        return apply_timbre(self.render_neutral(phones, f0, noise), timbre)

    def noise_for(self, key: tuple[int, ...], frames: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.spec.seed, 1, *key]))
        return (self.spec.noise * rng.standard_normal((frames, self.spec.mel_bins))).astype(np.float32)

    def build(self) -> Corpus:
        spec = self.spec
        utterances = []
        for k, (speaker, timbre) in enumerate(self.timbres.items()):
            for lang in self.speaker_languages[speaker]:
                for i in range(spec.utterances_per_speaker):
                    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, k, lang, i]))
                    phones, f0 = self.draw_script(lang, timbre.base_f0, rng)
                    noise = self.noise_for((k, lang, i), len(f0))
                    mel = self.render(phones, f0, timbre, noise)
                    utterances.append(Utterance(speaker, f"L{lang}", f"{speaker}_L{lang}_{i:03d}",
                                                MelSpec(mel), phones, f0))
        return Corpus(utterances, allow_multilingual=spec.bilingual)


def generate_synthetic_corpus(spec: SyntheticSpec) -> tuple[Corpus, dict[str, SpeakerTimbre]]:
    world = SyntheticWorld(spec)
    return world.build(), dict(world.timbres)


def reference_population(spec: SyntheticSpec, speakers: int = 16, utterances_per_speaker: int = 16,
                         seed_offset: int = 1000) -> tuple[Corpus, dict[str, SpeakerTimbre]]:
    """Bilingual speakers drawn from the same world as ``spec`` (same phone templates and prosody).

    Scorers trained here never see language and speaker confounded, which a
    monolingual training corpus cannot avoid. Timbres cover a slightly wider
    range than ``spec`` and, like the scripts, come from an independent stream.
    """
    lo, hi = spec.shift_range
    tlo, thi = 1.25 * spec.tilt_range[0], 1.25 * spec.tilt_range[1]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seed_offset]))
    log_f0 = np.log(spec.f0_range)
    timbres = tuple(SpeakerTimbre(int(rng.integers(lo - 1, hi + 2)), float(rng.uniform(tlo, thi)),
                                  float(np.exp(rng.uniform(*log_f0))))
                    for _ in range(speakers))
    pop = replace(spec, bilingual=True, speakers_per_language=speakers, utterances_per_speaker=utterances_per_speaker,
                  shift_range=(lo - 1, hi + 1), tilt_range=(tlo, thi), timbres=timbres)
    world = SyntheticWorld(pop)
    # templates are fixed by the original seed; scripts and noise follow the offset one
    world.spec = replace(pop, seed=spec.seed + seed_offset)
    return world.build(), dict(world.timbres)

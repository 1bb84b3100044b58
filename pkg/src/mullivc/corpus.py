"""Corpus data model, manifest I/O and the cycle-batch sampler."""

from __future__ import annotations

import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import AudioConfig, MelSpec, estimate_f0, extract_mel

logger = logging.getLogger(__name__)

MIN_SPEAKER_UTTERANCES = 3


class ManifestError(ValueError):
    pass


class CorpusConsistencyError(ValueError):
    pass


class InfeasibleCorpusError(ValueError):
    pass


Phone = tuple[str, int, int]


@dataclass(frozen=True, eq=False)
class Utterance:
    speaker_id: str
    language_id: str
    utterance_id: str
    mel: MelSpec
    phonemes: tuple[Phone, ...]
    f0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phonemes", tuple((str(t), int(s), int(e)) for t, s, e in self.phonemes))
        object.__setattr__(self, "f0", np.asarray(self.f0, dtype=np.float32))
        self.validate()

    @property
    def frames(self) -> int:
        return self.mel.frames

    @property
    def tokens(self) -> list[str]:
        return [p[0] for p in self.phonemes]

    def validate(self, f0_range: tuple[float, float] = (0.0, np.inf)) -> None:
        prev_end = 0
        for token, start, end in self.phonemes:
            if not (prev_end <= start < end <= self.frames):
                raise ValueError(f"{self.utterance_id}: phone span ({token}, {start}, {end}) is out of order or range")
            prev_end = end
        if self.f0.shape != (self.frames,):
            raise ValueError(f"{self.utterance_id}: f0 has length {self.f0.shape}, mel has {self.frames} frames")
        voiced = self.f0[self.f0 != 0]
        if np.any(voiced < f0_range[0]) or np.any(voiced > f0_range[1]):
            raise ValueError(f"{self.utterance_id}: voiced f0 outside {f0_range}")


class Corpus:
    """Immutable collection of utterances indexed by speaker and language.

    Speakers are monolingual unless ``allow_multilingual`` is set, which only
    the synthetic bilingual generator uses.
    """

    def __init__(self, utterances: Iterable[Utterance] = (), allow_multilingual: bool = False):
        self.utterances: tuple[Utterance, ...] = tuple(utterances)
        self.allow_multilingual = allow_multilingual
        self.report: list[str] = []
        by_speaker: dict[str, list[Utterance]] = defaultdict(list)
        by_pair: dict[tuple[str, str], list[Utterance]] = defaultdict(list)
        languages: dict[str, set[str]] = defaultdict(set)
        ids = set()
        for u in self.utterances:
            if u.utterance_id in ids:
                raise CorpusConsistencyError(f"duplicate utterance id {u.utterance_id!r}")
            ids.add(u.utterance_id)
            by_speaker[u.speaker_id].append(u)
            by_pair[u.speaker_id, u.language_id].append(u)
            languages[u.speaker_id].add(u.language_id)
        if not allow_multilingual:
            for spk, langs in languages.items():
                if len(langs) > 1:
                    raise CorpusConsistencyError(f"speaker {spk!r} appears under languages {sorted(langs)}")
        self.by_speaker = {k: tuple(v) for k, v in by_speaker.items()}
        self.by_speaker_language = {k: tuple(v) for k, v in by_pair.items()}
        spk_by_lang: dict[str, list[str]] = defaultdict(list)
        for spk in self.by_speaker:
            for lang in sorted(languages[spk]):
                spk_by_lang[lang].append(spk)
        self.speakers_by_language = {k: tuple(v) for k, v in sorted(spk_by_lang.items())}
        for spk, utts in self.by_speaker.items():
            if len(utts) < MIN_SPEAKER_UTTERANCES:
                msg = f"speaker {spk!r} has {len(utts)} utterances; cycle sampling needs {MIN_SPEAKER_UTTERANCES}"
                self.report.append(msg)
                logger.warning(msg)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def speakers(self) -> list[str]:
        return list(self.by_speaker)

    @property
    def languages(self) -> list[str]:
        return list(self.speakers_by_language)

    @property
    def mel_bins(self) -> int:
        return self.utterances[0].mel.bins

    def language_of(self, speaker_id: str) -> str:
        return self.by_speaker[speaker_id][0].language_id

    def phone_inventory(self) -> list[str]:
        return sorted({t for u in self.utterances for t in u.tokens})

    def split(self, holdout: int) -> tuple["Corpus", "Corpus"]:
        """Hold out the last ``holdout`` utterances of every (speaker, language) group."""
        train, test = [], []
        for utts in self.by_speaker_language.values():
            cut = max(len(utts) - holdout, 0)
            train.extend(utts[:cut])
            test.extend(utts[cut:])
        return Corpus(train, self.allow_multilingual), Corpus(test, self.allow_multilingual)


# --- mel cache files -------------------------------------------------------

def write_mel_cache(path, mel: MelSpec) -> None:
    v = np.ascontiguousarray(mel.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *v.shape))
        f.write(v.tobytes())


def read_mel_cache(path) -> MelSpec:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated mel cache header")
    frames, bins = struct.unpack("<II", raw[:8])
    body = np.frombuffer(raw, dtype="<f4", offset=8)
    if body.size != frames * bins:
        raise ValueError(f"{path}: expected {frames}x{bins} floats, found {body.size}")
    return MelSpec(body.reshape(frames, bins).copy())


def read_wav(path, config: AudioConfig) -> np.ndarray:
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if rate != config.sample_rate:
        raise ValueError(f"{path}: sample rate {rate} != {config.sample_rate}")
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    return data.astype(np.float64)


# --- manifest -------------------------------------------------------------

_REQUIRED = ("speaker", "language", "utt_id", "phones")


def _parse_record(line: str, lineno: int, base: Path, config: AudioConfig) -> Utterance:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: not a JSON object ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise ManifestError(f"line {lineno}: record is not an object")
    for name in _REQUIRED:
        if name not in rec:
            raise ManifestError(f"line {lineno}: missing required field {name!r}")
    if "mel" not in rec and "audio" not in rec:
        raise ManifestError(f"line {lineno}: record needs 'audio' or 'mel'")
    try:
        waveform = None
        if "mel" in rec:
            mel = read_mel_cache(base / rec["mel"])
        else:
            waveform = read_wav(base / rec["audio"], config)
            mel = extract_mel(waveform, config)
        if rec.get("f0") is not None:
            f0 = np.asarray(rec["f0"], dtype=np.float32)
        elif waveform is not None:
            f0 = estimate_f0(waveform, config)
        elif "audio" in rec:
            f0 = estimate_f0(read_wav(base / rec["audio"], config), config)
        else:
            raise ManifestError(f"line {lineno}: 'f0' is required when only a mel cache is given")
        phones = [tuple(p) for p in rec["phones"]]
        if any(len(p) != 3 for p in phones):
            raise ManifestError(f"line {lineno}: 'phones' entries must be [token, start, end]")
        return Utterance(str(rec["speaker"]), str(rec["language"]), str(rec["utt_id"]), mel, phones, f0)
    except ManifestError:
        raise
    except (OSError, ValueError, TypeError) as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc


def load_manifest(path, audio_config: AudioConfig = AudioConfig(), allow_multilingual: bool = False) -> Corpus:
    path = Path(path)
    base = path.parent
    utterances = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            utterances.append(_parse_record(line, lineno, base, audio_config))
    return Corpus(utterances, allow_multilingual=allow_multilingual)


def read_manifest_column(path, column: str) -> dict[str, str]:
    """Map utt_id to an extra manifest column, resolved against the manifest directory."""
    path = Path(path)
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                if column in rec:
                    out[rec["utt_id"]] = str(path.parent / rec[column])
    return out


def write_manifest(corpus: Corpus, out_dir, mel_subdir: str = "mels") -> Path:
    out_dir = Path(out_dir)
    (out_dir / mel_subdir).mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for u in corpus.utterances:
            rel = f"{mel_subdir}/{u.utterance_id}.mel"
            write_mel_cache(out_dir / rel, u.mel)
            rec = {
                "speaker": u.speaker_id,
                "language": u.language_id,
                "utt_id": u.utterance_id,
                "mel": rel,
                "phones": [list(p) for p in u.phonemes],
                "f0": [round(float(x), 4) for x in u.f0],
            }
            f.write(json.dumps(rec) + "\n")
    return manifest


# --- cycle sampling -------------------------------------------------------

@dataclass(frozen=True)
class CycleSample:
    """One sextuple of utterance roles for a three-substep step.

    ``step2_timbre`` is the step-1 timbre reference by construction.
    """

    step1_content: Utterance
    step1_timbre: Utterance
    step2_content: Utterance
    step3_content: Utterance

    @property
    def step2_timbre(self) -> Utterance:
        return self.step1_timbre

    def check(self) -> None:
        a, r, c2, c3 = self.step1_content, self.step1_timbre, self.step2_content, self.step3_content
        assert a.speaker_id == r.speaker_id == c3.speaker_id
        assert a.language_id == r.language_id == c3.language_id
        assert c2.speaker_id != a.speaker_id
        assert c2.language_id != a.language_id
        assert len({a.utterance_id, r.utterance_id, c3.utterance_id, c2.utterance_id}) == 4


@dataclass(frozen=True)
class CycleBatch:
    samples: tuple[CycleSample, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.samples)

    def role(self, name: str) -> list[Utterance]:
        return [getattr(s, name) for s in self.samples]


def _feasible_roles(corpus: Corpus) -> dict[str, tuple[list[tuple[str, str]], dict[str, list[str]]]]:
    """For each candidate role-A language: eligible speaker-1s and speaker-2 pools per language B."""
    out = {}
    langs = corpus.languages
    for lang_a in langs:
        s1 = [spk for spk in corpus.speakers_by_language[lang_a]
              if len(corpus.by_speaker_language[spk, lang_a]) >= MIN_SPEAKER_UTTERANCES]
        if not s1:
            continue
        pools = {}
        for lang_b in langs:
            if lang_b == lang_a:
                continue
            pool = list(corpus.speakers_by_language[lang_b])
            if pool:
                pools[lang_b] = pool
        # a bilingual-only pool may contain nobody but speaker 1; filtered per draw
        if pools:
            out[lang_a] = ([(spk, lang_a) for spk in s1], pools)
    return out


def sample_cycle_batch(corpus: Corpus, batch_size: int, rng: np.random.Generator,
                       swap_languages: bool = True) -> CycleBatch:
    """Draw ``batch_size`` independent cycle sextuples.

    With ``swap_languages`` the language playing role A is drawn uniformly per
    sextuple; otherwise the first feasible language (sorted) is always A.
    Speaker 1's three utterances keep their corpus order across roles.
    """
    if len(corpus.languages) < 2:
        raise InfeasibleCorpusError(f"cycle sampling needs >= 2 languages, corpus has {len(corpus.languages)}")
    roles = _feasible_roles(corpus)
    if not roles:
        raise InfeasibleCorpusError(
            f"no language has a speaker with >= {MIN_SPEAKER_UTTERANCES} utterances plus another-language partner")
    choices = sorted(roles)
    samples = []
    for _ in range(batch_size):
        lang_a = choices[rng.integers(len(choices))] if swap_languages else choices[0]
        s1_pool, pools = roles[lang_a]
        langs_b = sorted(pools)
        lang_b = langs_b[rng.integers(len(langs_b))] if swap_languages else langs_b[0]
        spk1, _ = s1_pool[rng.integers(len(s1_pool))]
        partners = [s for s in pools[lang_b] if s != spk1]
        if not partners:
            raise InfeasibleCorpusError(f"language {lang_b!r} has no speaker other than {spk1!r}")
        spk2 = partners[rng.integers(len(partners))]
        own = corpus.by_speaker_language[spk1, lang_a]
        i1, i2, i3 = sorted(rng.choice(len(own), size=3, replace=False))
        other = corpus.by_speaker_language[spk2, lang_b]
        sample = CycleSample(own[i1], own[i2], other[rng.integers(len(other))], own[i3])
        sample.check()
        samples.append(sample)
    return CycleBatch(tuple(samples))


class CycleSampler:
    """Seeded sampler whose generator state can be checkpointed."""

    def __init__(self, corpus: Corpus, seed: int = 0, swap_languages: bool = True):
        self.corpus = corpus
        self.swap_languages = swap_languages
        self.rng = np.random.default_rng(seed)
        sample_cycle_batch(corpus, 1, np.random.default_rng(0), swap_languages)  # fail fast

    def sample(self, batch_size: int) -> CycleBatch:
        return sample_cycle_batch(self.corpus, batch_size, self.rng, self.swap_languages)

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def crop_stack(mels: Sequence[np.ndarray], max_frames: int | None = None) -> np.ndarray:
    """Crop each mel to the shortest length (optionally capped) and stack to ``(B, T, D)``."""
    n = min(m.shape[0] for m in mels)
    if max_frames is not None:
        n = min(n, max_frames)
    return np.stack([m[:n] for m in mels]).astype(np.float32)

"""Speaker-similarity and phoneme-error metrics, SIM matrices, embedding export
and the ablation runner."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .audio import MelSpec
from .auxiliary import AsrModel, AuxModels, SVModel, ctc_decode
from .corpus import Corpus, Utterance
from .nets import Generator, NetConfig, convert

ConvertFn = Callable[[MelSpec, MelSpec], MelSpec]


def cosine_sim(e1, e2) -> float:
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine_sim: zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def phoneme_error_rate(hyp: Sequence, ref: Sequence) -> float:
    """Levenshtein distance between token sequences over the reference length."""
    if len(ref) == 0:
        raise ValueError("phoneme_error_rate: empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


@torch.no_grad()
def sv_embeddings(mels: Sequence[MelSpec], sv: SVModel) -> np.ndarray:
    return np.stack([sv(torch.from_numpy(m.values)[None])[0].numpy() for m in mels])


@torch.no_grad()
def decode_phones(mel: MelSpec, asr: AsrModel) -> list[str]:
    return ctc_decode(asr(torch.from_numpy(mel.values)[None]).logits[0], asr.vocab)


# --- SIM matrix -----------------------------------------------------------

Label = tuple[str, str]


@dataclass
class SimMatrix:
    rows: list[Label]
    cols: list[Label]
    cells: np.ndarray

    def cell(self, row: Label, col: Label) -> float:
        return float(self.cells[self.rows.index(row), self.cols.index(col)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow([""] + [f"{s}|{l}" for s, l in self.cols])
            for label, row in zip(self.rows, self.cells):
                w.writerow([f"{label[0]}|{label[1]}"] + [f"{v:.6f}" for v in row])


def sim_matrix(corpus: Corpus, sv: SVModel, rows: Sequence[Label] | None = None, cols: Sequence[Label] | None = None,
               pairs_per_cell: int | None = None, seed: int = 0) -> SimMatrix:
    """Mean cosine similarity between the utterances of each (speaker, language) cell pair.

    Without ``pairs_per_cell`` every cross pair is used; a pair never pairs an
    utterance with itself. Rows default to the groups of the first language,
    columns to those of the second (or the first, for one-language corpora).
    """
    groups = corpus.by_speaker_language
    langs = corpus.languages
    if rows is None:
        rows = [k for k in groups if k[1] == langs[0]]
    if cols is None:
        col_lang = langs[1] if len(langs) > 1 else langs[0]
        cols = [k for k in groups if k[1] == col_lang]
    rows, cols = [tuple(r) for r in rows], [tuple(c) for c in cols]
    for label in rows + cols:
        if not groups.get(label):
            raise ValueError(f"sim_matrix: no utterances for speaker {label[0]!r} language {label[1]!r}")
    needed = {u.utterance_id: u for label in set(rows) | set(cols) for u in groups[label]}
    ids = list(needed)
    emb = dict(zip(ids, sv_embeddings([needed[i].mel for i in ids], sv)))
    rng = np.random.default_rng(seed)
    cells = np.zeros((len(rows), len(cols)))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            pairs = [(a.utterance_id, b.utterance_id) for a in groups[r] for b in groups[c]
                     if a.utterance_id != b.utterance_id]
            if not pairs:
                raise ValueError(f"sim_matrix: no distinct utterance pairs for cell {r} x {c}")
            if pairs_per_cell is not None:
                pick = rng.integers(len(pairs), size=pairs_per_cell)
                pairs = [pairs[k] for k in pick]
            cells[i, j] = math.fsum(cosine_sim(emb[a], emb[b]) for a, b in pairs) / len(pairs)
    return SimMatrix(rows, cols, cells)


# --- conversion evaluation ------------------------------------------------

@dataclass
class EvalReport:
    pairs: list[dict]
    mean_sim: float
    mean_source_sim: float
    target_closer_rate: float
    per: float
    count: int
    config: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_pairs(cls, pairs: list[dict], config: dict) -> "EvalReport":
        n = len(pairs)
        return cls(
            pairs=pairs,
            mean_sim=math.fsum(p["sim"] for p in pairs) / n,
            mean_source_sim=math.fsum(p["source_sim"] for p in pairs) / n,
            target_closer_rate=sum(p["sim"] > p["source_sim"] for p in pairs) / n,
            per=math.fsum(p["per"] for p in pairs) / n,
            count=n,
            config=config,
        )


def sample_pairs(corpus: Corpus, n_pairs: int, mode: str, seed: int) -> list[tuple[Utterance, Utterance, Utterance]]:
    """``(source, target reference, source-speaker comparison)`` triples.

    ``cross`` draws the target speaker from another language, ``same`` from
    the source language. The comparison utterance is another recording of the
    source speaker when one exists.
    """
    if mode not in ("cross", "same"):
        raise ValueError(f"unknown pair mode {mode!r}")
    if n_pairs < 1:
        raise ValueError("evaluation needs at least one sampled pair")
    rng = np.random.default_rng(seed)
    utts = corpus.utterances
    out = []
    attempts = 0
    while len(out) < n_pairs:
        attempts += 1
        if attempts > 100 * n_pairs:
            raise ValueError(f"corpus cannot supply {mode}-language pairs")
        src = utts[rng.integers(len(utts))]
        targets = [(s, l) for (s, l) in corpus.by_speaker_language
                   if s != src.speaker_id and ((l != src.language_id) if mode == "cross" else (l == src.language_id))]
        if not targets:
            continue
        tgt_group = corpus.by_speaker_language[targets[rng.integers(len(targets))]]
        ref = tgt_group[rng.integers(len(tgt_group))]
        own = [u for u in corpus.by_speaker[src.speaker_id] if u.utterance_id != src.utterance_id]
        comp = own[rng.integers(len(own))] if own else src
        out.append((src, ref, comp))
    return out


def evaluate_conversion(generator: Generator | ConvertFn, aux: AuxModels, corpus: Corpus, n_pairs: int = 200,
                        mode: str = "cross", seed: int = 0, scorer: SVModel | None = None) -> EvalReport:
    """Convert sampled pairs and score them.

    SIM uses ``scorer`` when given (an SV model independent of training, as an
    external verifier would be), else ``aux.sv``. PER always uses ``aux.asr``.
    """
    scorer = aux.sv if scorer is None else scorer
    convert_fn = generator if not isinstance(generator, torch.nn.Module) else (
        lambda c, r: convert(c, r, generator))
    rows = []
    for src, ref, comp in sample_pairs(corpus, n_pairs, mode, seed):
        out = convert_fn(src.mel, ref.mel)
        e_out, e_ref, e_src = sv_embeddings([out, ref.mel, comp.mel], scorer)
        rows.append({
            "source": src.utterance_id,
            "target_ref": ref.utterance_id,
            "source_speaker": src.speaker_id,
            "target_speaker": ref.speaker_id,
            "sim": cosine_sim(e_out, e_ref),
            "source_sim": cosine_sim(e_out, e_src),
            "per": phoneme_error_rate(decode_phones(out, aux.asr), src.tokens),
        })
    return EvalReport.from_pairs(rows, {"mode": mode, "n_pairs": n_pairs, "seed": seed})


# --- embedding export -----------------------------------------------------

def pca_2d(embeddings: np.ndarray) -> np.ndarray:
    """Exact PCA projection to two dimensions with a deterministic sign convention."""
    x = np.asarray(embeddings, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    proj = x @ comps.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def save_embeddings(path, embeddings: np.ndarray, labels: Sequence[str]) -> None:
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2 or len(labels) != emb.shape[0]:
        raise ValueError("need one label per embedding row")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *emb.shape))
        f.write(emb.tobytes())
    Path(str(path) + ".labels").write_text("".join(f"{l}\n" for l in labels), encoding="utf-8")


def load_embeddings(path) -> tuple[np.ndarray, list[str]]:
    raw = Path(path).read_bytes()
    n, d = struct.unpack("<II", raw[:8])
    emb = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, d).copy()
    labels = Path(str(path) + ".labels").read_text(encoding="utf-8").splitlines()
    return emb, labels


def export_embeddings(mels: Sequence[MelSpec], labels: Sequence[str], sv: SVModel, path,
                      projection: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Write labelled SV embeddings to ``path`` and optionally their PCA projection to ``path.pca.csv``."""
    if len(mels) < 2:
        raise ValueError("export_embeddings needs at least two utterances")
    emb = sv_embeddings(mels, sv)
    save_embeddings(path, emb, labels)
    proj = None
    if projection:
        proj = pca_2d(emb)
        with open(str(path) + ".pca.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["label", "pc1", "pc2"])
            for label, (a, b) in zip(labels, proj):
                w.writerow([label, f"{a:.6f}", f"{b:.6f}"])
    return emb, proj


def cluster_distance_ratio(points: np.ndarray, labels: Sequence[str]) -> tuple[float, float]:
    """Mean intra-label and inter-label Euclidean distances between points."""
    intra, inter = [], []
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            d = float(np.linalg.norm(points[i] - points[j]))
            (intra if labels[i] == labels[j] else inter).append(d)
    return float(np.mean(intra)), float(np.mean(inter))


# --- ablations ------------------------------------------------------------

ABLATION_SETTINGS = {"#1": "full", "#2": "wo_step3", "#3": "wo_step23", "#4": "wo_asr", "#5": "wo_conformer"}


@dataclass
class AblationReport:
    rows: list[dict]

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.rows, indent=2) + "\n", encoding="utf-8")

    def table(self) -> str:
        lines = [f"{'setting':8s} {'ablation':14s} {'SIM':>8s} {'PER':>8s} {'closer':>8s}"]
        for r in self.rows:
            lines.append(f"{r['setting']:8s} {r['ablation']:14s} {r['sim']:8.4f} {r['per']:8.4f} {r['target_closer_rate']:8.3f}")
        return "\n".join(lines)


def run_ablation(settings: Sequence[str], base_config, net_config: NetConfig, train_corpus: Corpus, eval_corpus: Corpus,
                 aux: AuxModels, seed: int = 0, n_pairs: int = 200, out_dir=None,
                 content_encoder=None, scorer: SVModel | None = None) -> AblationReport:
    """Train the full model plus each requested ablation identically and compare cross-language SIM/PER."""
    from .trainer import CycleTrainer

    unknown = set(settings) - set(ABLATION_SETTINGS)
    if unknown:
        raise ValueError(f"unknown ablation setting(s) {sorted(unknown)}; choose from #2..#5")
    rows = []
    for setting in ["#1"] + sorted(s for s in set(settings) if s != "#1"):
        cfg = replace(base_config, ablation=ABLATION_SETTINGS[setting], seed=seed)
        trainer = CycleTrainer(net_config, cfg, aux, train_corpus, content_encoder)
        log_dir = Path(out_dir) / setting.lstrip("#") if out_dir is not None else None
        trainer.train(cfg.steps, log_dir)
        report = evaluate_conversion(trainer.generator, aux, eval_corpus, n_pairs=n_pairs, mode="cross", seed=seed,
                                     scorer=scorer)
        rows.append({"setting": setting, "ablation": cfg.ablation, "sim": report.mean_sim, "per": report.per,
                     "source_sim": report.mean_source_sim, "target_closer_rate": report.target_closer_rate})
    return AblationReport(rows)

"""Command-line entry point: synth-corpus, train-aux, train, convert, evaluate, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from . import __version__
from .audio import AudioConfig, MelSpec, extract_mel, griffin_lim
from .auxiliary import (AuxModels, AuxTrainConfig, load_aux, load_teacher_embeddings, posterior_net_config, save_aux,
                        train_asr, train_content_recognizer, train_pitch, train_sv)
from .checkpoint import CheckpointError
from .corpus import (CorpusConsistencyError, InfeasibleCorpusError, ManifestError, load_manifest, read_manifest_column,
                     read_mel_cache, read_wav, write_manifest, write_mel_cache)
from .evaluation import ABLATION_SETTINGS, evaluate_conversion, run_ablation, sim_matrix, sv_embeddings
from .nets import NetConfig, PosteriorContentEncoder, convert
from .synthetic import SyntheticSpec, generate_synthetic_corpus, reference_population
from .trainer import TrainConfig, TrainingDivergence, load_generator, train

logger = logging.getLogger("mullivc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
AUX_KINDS = ("sv", "asr", "pitch")
DATA_ERRORS = (ValueError, KeyError, OSError, ManifestError, CorpusConsistencyError, InfeasibleCorpusError,
               CheckpointError, TrainingDivergence)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- config files -----------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> dict:
    """Read a JSON object, or ``section.key = value`` lines (values parsed as JSON when possible).

    Sections: ``synthetic``, ``aux``, ``train``, ``net``, ``audio``.
    """
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        cfg = json.loads(text)
    else:
        cfg = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'section.key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            section, _, name = key.rpartition(".")
            if not section:
                raise UsageError(f"{path}:{lineno}: key {key!r} needs a section prefix")
            cfg.setdefault(section, {})[name] = _parse_value(value)
    unknown = set(cfg) - {"synthetic", "aux", "train", "net", "audio"}
    if unknown:
        raise UsageError(f"{path}: unknown config section(s) {sorted(unknown)}")
    return cfg


def _build(cls, overrides: dict, section: str):
    names = {f.name for f in fields(cls)}
    bad = set(overrides) - names
    if bad:
        raise UsageError(f"config section {section!r}: unknown field(s) {sorted(bad)}")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(overrides)
    return cls(**overrides)


def _jsonable(obj):
    if is_dataclass(obj):
        return {k: _jsonable(v) for k, v in (obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (int, float, str, bool)) or obj is None:
        return obj
    return str(obj)


def write_echo(out: Path, args: argparse.Namespace, **resolved) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = {"version": __version__, "command": args.command,
            "args": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"},
            "resolved": _jsonable(resolved)}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- shared loaders -----------------------------------------------------------

def _load_corpus(path, allow_multilingual: bool = True):
    return load_manifest(path, allow_multilingual=allow_multilingual)


def _load_aux_dir(aux_dir) -> AuxModels:
    aux_dir = Path(aux_dir)
    models = {}
    for kind in AUX_KINDS:
        path = aux_dir / f"{kind}.npz"
        if not path.exists():
            raise FileNotFoundError(f"missing {kind} auxiliary checkpoint: {path}")
        models[kind] = load_aux(path, kind)
    return AuxModels(**models)


def _net_config(args, cfg: dict, mel_bins: int) -> tuple[NetConfig, PosteriorContentEncoder | None]:
    """Resolve the generator config plus, with --content-recognizer, the trained content encoder."""
    overrides = dict(cfg.get("net", {}))
    overrides.setdefault("mel_bins", mel_bins)
    net = NetConfig.tiny(**overrides) if args.preset == "desk" else _build(NetConfig, overrides, "net")
    if net.mel_bins != mel_bins:
        raise ValueError(f"net mel_bins {net.mel_bins} does not match the corpus ({mel_bins})")
    if args.content_recognizer is None:
        return net, None
    recognizer = load_aux(args.content_recognizer, "asr")
    net = posterior_net_config(net, recognizer)
    return net, PosteriorContentEncoder(recognizer, net.content_upsample, net.content_hard)


def _train_config(args, cfg: dict, **extra) -> TrainConfig:
    overrides = dict(cfg.get("train", {}))
    overrides.update({k: v for k, v in extra.items() if v is not None})
    overrides["seed"] = args.seed
    return _build(TrainConfig, overrides, "train")


def _read_input_mel(path, audio: AudioConfig) -> MelSpec:
    path = Path(path)
    if path.suffix == ".mel":
        return read_mel_cache(path)
    return extract_mel(read_wav(path, audio), audio)


# --- commands -------------------------------------------------------------------

def cmd_synth_corpus(args, cfg: dict) -> int:
    spec_dict = dict(cfg.get("synthetic", {}))
    spec_dict["seed"] = args.seed
    spec = _build(SyntheticSpec, spec_dict, "synthetic")
    out = Path(args.out)
    warnings = []
    if spec.n_languages < 2:
        warnings.append("cycle training needs >= 2 languages; this corpus can train auxiliary models only")
    corpus, factors = generate_synthetic_corpus(spec)
    write_manifest(corpus, out)
    if args.reference_speakers:
        write_manifest(reference_population(spec, args.reference_speakers)[0], out / "reference")
    (out / "factors.json").write_text(json.dumps({k: asdict(v) for k, v in sorted(factors.items())}, indent=2) + "\n",
                                      encoding="utf-8")
    summary = {"speakers": corpus.speakers, "languages": corpus.languages, "utterances": len(corpus.utterances),
               "warnings": warnings + list(corpus.report)}
    (out / "corpus.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for w in warnings:
        logger.warning(w)
    write_echo(out, args, synthetic=spec, warnings=warnings)
    return EXIT_OK


def cmd_train_aux(args, cfg: dict) -> int:
    corpus = _load_corpus(args.corpus)
    overrides = dict(cfg.get("aux", {}))
    overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    config = _build(AuxTrainConfig, overrides, "aux")
    out = Path(args.out)
    losses: list[float] = []
    if args.kind == "sv":
        teacher = None
        if args.mode == "distill" and args.teacher_sv:
            ids = [u.utterance_id for u in corpus.utterances]
            teacher = dict(zip(ids, sv_embeddings([u.mel for u in corpus.utterances], load_aux(args.teacher_sv, "sv"))))
        elif args.mode == "distill":
            column = read_manifest_column(args.corpus, args.teacher_column)
            if not column:
                raise ValueError(f"distill mode: manifest has no {args.teacher_column!r} column with teacher files")
            base = Path(args.corpus).parent
            teacher = load_teacher_embeddings({k: str(base / v) for k, v in column.items()})
        model = train_sv(corpus, args.mode, config, teacher=teacher, losses=losses)
    elif args.kind == "asr":
        model = train_asr(corpus, config, losses)
    elif args.kind == "content":
        model = train_content_recognizer(corpus, config, losses)
    else:
        model = train_pitch(corpus, config, losses)
    out.mkdir(parents=True, exist_ok=True)
    save_aux(model, out / f"{args.kind}.npz")
    with open(out / f"{args.kind}_losses.jsonl", "w", encoding="utf-8") as f:
        for step, loss in enumerate(losses):
            f.write(json.dumps({"step": step, "loss": loss}) + "\n")
    write_echo(out, args, aux=config)
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    corpus = _load_corpus(args.corpus)
    aux = _load_aux_dir(args.aux_dir)
    net, content_encoder = _net_config(args, cfg, corpus.mel_bins)
    config = _train_config(args, cfg, steps=args.steps, ablation=args.ablation, detach_cycle=args.detach_cycle or None)
    out = Path(args.out)
    write_echo(out, args, train=config, net=net)
    trainer = train(config, corpus, aux, net, out, resume=args.resume, content_encoder=content_encoder)
    logger.info("trained %d steps; generator written to %s", trainer.step, out / "generator.npz")
    return EXIT_OK


def cmd_convert(args, cfg: dict) -> int:
    generator = load_generator(args.generator)
    audio_overrides = dict(cfg.get("audio", {}))
    audio_overrides.setdefault("mel_bins", generator.config.mel_bins)
    audio = _build(AudioConfig, audio_overrides, "audio")
    source = _read_input_mel(args.source, audio)
    reference = _read_input_mel(args.reference, audio)
    for name, mel in (("source", source), ("reference", reference)):
        if mel.bins != generator.config.mel_bins:
            raise ValueError(f"{name} mel has {mel.bins} bins, generator expects {generator.config.mel_bins}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    converted = convert(source, reference, generator)
    write_mel_cache(out / "converted.mel", converted)
    resolved = {"frames": converted.frames, "bins": converted.bins}
    if args.wav:
        wave = griffin_lim(converted, audio, iterations=args.gl_iterations, seed=args.seed)
        wavfile.write(out / "converted.wav", audio.sample_rate, wave.astype(np.float32))
        header = {"phase_reconstruction": "griffin-lim", "iterations": args.gl_iterations, "seed": args.seed,
                  "sample_rate": audio.sample_rate}
        (out / "converted.wav.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
        resolved["waveform"] = header
    write_echo(out, args, **resolved)
    return EXIT_OK


def cmd_evaluate(args, cfg: dict) -> int:
    corpus = _load_corpus(args.corpus)
    aux = _load_aux_dir(args.aux_dir)
    generator = load_generator(args.generator)
    if args.pairs < 1:
        raise ValueError("--pairs must be at least 1; an empty report is not produced")
    out = Path(args.out)
    scorer = load_aux(args.scorer, "sv") if args.scorer else None
    report = evaluate_conversion(generator, aux, corpus, n_pairs=args.pairs, mode=args.mode, seed=args.seed,
                                 scorer=scorer)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    if len(corpus.languages) > 1:
        sim_matrix(corpus, scorer or aux.sv, seed=args.seed).to_csv(out / "sim_matrix.csv")
    write_echo(out, args, mean_sim=report.mean_sim, per=report.per, count=report.count)
    print(f"pairs {report.count}  SIM {report.mean_sim:.4f}  PER {report.per:.4f}  "
          f"closer-to-target {report.target_closer_rate:.3f}")
    return EXIT_OK


def cmd_ablate(args, cfg: dict) -> int:
    corpus = _load_corpus(args.corpus)
    aux = _load_aux_dir(args.aux_dir)
    net, content_encoder = _net_config(args, cfg, corpus.mel_bins)
    config = _train_config(args, cfg, steps=args.steps)
    settings = [s if s.startswith("#") else f"#{s}" for s in args.settings.split(",") if s.strip()] if args.settings else []
    train_corpus, eval_corpus = corpus.split(args.holdout) if args.holdout else (corpus, corpus)
    out = Path(args.out)
    write_echo(out, args, train=config, net=net, settings=settings)
    report = run_ablation(settings, config, net, train_corpus, eval_corpus, aux, seed=args.seed, n_pairs=args.pairs,
                          out_dir=out, content_encoder=content_encoder,
                          scorer=load_aux(args.scorer, "sv") if args.scorer else None)
    report.to_json(out / "ablation.json")
    (out / "ablation.txt").write_text(report.table() + "\n", encoding="utf-8")
    print(report.table())
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON or 'section.key = value' config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mullivc", description="Multilingual voice conversion with cycle training.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-corpus", parents=[common], help="generate a synthetic multilingual corpus")
    p.add_argument("--reference-speakers", type=int, default=0,
                   help="also write N bilingual speakers of the same world under reference/ (for training a SIM scorer)")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("train-aux", parents=[common], help="train an auxiliary model")
    p.add_argument("--kind", required=True, choices=AUX_KINDS + ("content",))
    p.add_argument("--corpus", required=True, help="manifest.jsonl")
    p.add_argument("--mode", choices=("supervised", "distill"), default="supervised", help="SV training mode")
    p.add_argument("--teacher-column", default="teacher", help="manifest column naming teacher embedding files")
    p.add_argument("--teacher-sv", help="distill mode: SV checkpoint that embeds the corpus as teacher")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_aux)

    def model_flags(p):
        p.add_argument("--corpus", required=True, help="manifest.jsonl")
        p.add_argument("--aux-dir", required=True, help="directory holding sv.npz, asr.npz and pitch.npz")
        p.add_argument("--preset", choices=("full", "desk"), default="full", help="network size: full-scale defaults or the tiny desk config")
        p.add_argument("--content-recognizer", help="frame-rate recognizer checkpoint used as content encoder")
        p.add_argument("--steps", type=int)

    p = sub.add_parser("train", parents=[common], help="cycle-train the generator")
    model_flags(p)
    p.add_argument("--ablation", choices=("full", "wo_step3", "wo_step23", "wo_asr", "wo_conformer"))
    p.add_argument("--detach-cycle", action="store_true")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", parents=[common], help="convert one utterance")
    p.add_argument("--generator", required=True)
    p.add_argument("--source", required=True, help=".mel cache or .wav file providing content")
    p.add_argument("--reference", required=True, help=".mel cache or .wav file providing timbre")
    p.add_argument("--wav", action="store_true", help="also write a Griffin-Lim waveform")
    p.add_argument("--gl-iterations", type=int, default=60)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", parents=[common], help="SIM / PER evaluation on sampled pairs")
    p.add_argument("--generator", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--aux-dir", required=True)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--mode", choices=("cross", "same"), default="cross")
    p.add_argument("--scorer", help="SV checkpoint used for SIM instead of the aux-dir one")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="train and compare ablation settings")
    model_flags(p)
    p.add_argument("--settings", default="", help=f"comma list from {sorted(ABLATION_SETTINGS)[1:]}")
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--holdout", type=int, default=0, help="utterances per speaker held out for evaluation")
    p.add_argument("--scorer", help="SV checkpoint used for SIM instead of the aux-dir one")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(args.seed)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"mullivc {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"mullivc {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

import json

import numpy as np
import pytest
import torch

from mullivc.auxiliary import load_aux
from mullivc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, load_config, main
from mullivc.corpus import read_mel_cache
from mullivc.trainer import load_generator

SMALL = {"synthetic": {"mel_bins": 16, "utterances_per_speaker": 6}, "aux": {"hidden": 16, "batch_size": 4},
         "train": {"batch_size": 2, "max_frames": 24, "log_interval": 1}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(root / "corpus")]) == EXIT_OK
    manifest = root / "corpus" / "manifest.jsonl"
    for kind in ("sv", "asr", "pitch", "content"):
        code = main(["train-aux", "--kind", kind, "--corpus", str(manifest), "--steps", "3", "--config", str(cfg),
                     "--out", str(root / "aux")])
        assert code == EXIT_OK
    return root, cfg, manifest


def lines(path):
    return [json.loads(l) for l in open(path, encoding="utf-8")]


class TestSynthCorpus:
    def test_counts_echo_and_determinism(self, workspace, tmp_path):
        root, cfg, manifest = workspace
        assert len(lines(manifest)) == 2 * 2 * 6
        assert json.load(open(root / "corpus" / "config.json"))["command"] == "synth-corpus"
        assert main(["synth-corpus", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "manifest.jsonl").read_bytes() == manifest.read_bytes()

    def test_default_spec_line_count(self, tmp_path):
        assert main(["synth-corpus", "--out", str(tmp_path)]) == EXIT_OK
        assert len(lines(tmp_path / "manifest.jsonl")) == 4 * 8

    def test_one_language_is_flagged(self, tmp_path):
        cfg = tmp_path / "one.cfg"
        cfg.write_text("synthetic.n_languages = 1\nsynthetic.mel_bins = 16\n")
        assert main(["synth-corpus", "--config", str(cfg), "--out", str(tmp_path / "c")]) == EXIT_OK
        summary = json.load(open(tmp_path / "c" / "corpus.json"))
        assert any("2 languages" in w for w in summary["warnings"])

    def test_bad_spec_names_field(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"synthetic": {"speakerz": 3}}))
        assert main(["synth-corpus", "--config", str(cfg), "--out", str(tmp_path / "c")]) == EXIT_USAGE
        assert "speakerz" in capsys.readouterr().err


class TestUsage:
    def test_unknown_flag_and_missing_command(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["synth-corpus", "--out", str(tmp_path), "--bogus"])
        assert e.value.code == EXIT_USAGE
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == EXIT_USAGE

    def test_key_value_config(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\ntrain.lr = 0.001\nnet.fine_grained = false\naux.hidden = 8\n")
        assert load_config(cfg) == {"train": {"lr": 0.001}, "net": {"fine_grained": False}, "aux": {"hidden": 8}}


class TestTrainAux:
    def test_checkpoints_carry_kind(self, workspace):
        root, _, _ = workspace
        for kind in ("sv", "asr", "pitch"):
            assert load_aux(root / "aux" / f"{kind}.npz").kind == kind
        assert load_aux(root / "aux" / "content.npz", "asr").reduction == 1

    def test_distill_without_teachers(self, workspace, tmp_path, capsys):
        _, _, manifest = workspace
        code = main(["train-aux", "--kind", "sv", "--mode", "distill", "--corpus", str(manifest), "--steps", "1",
                     "--out", str(tmp_path)])
        assert code == EXIT_RUNTIME
        assert "teacher" in capsys.readouterr().err

    def test_distill_from_teacher_checkpoint(self, workspace, tmp_path):
        root, cfg, manifest = workspace
        code = main(["train-aux", "--kind", "sv", "--mode", "distill", "--teacher-sv", str(root / "aux" / "sv.npz"),
                     "--corpus", str(manifest), "--steps", "20", "--config", str(cfg), "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert load_aux(tmp_path / "sv.npz").kind == "sv"
        losses = [r["loss"] for r in lines(tmp_path / "sv_losses.jsonl")]
        assert len(losses) == 20 and np.mean(losses[-5:]) < np.mean(losses[:5])


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg, manifest = workspace
    out = root / "gen"
    code = main(["train", "--corpus", str(manifest), "--aux-dir", str(root / "aux"), "--preset", "desk",
                 "--content-recognizer", str(root / "aux" / "content.npz"), "--steps", "50",
                 "--config", str(cfg), "--out", str(out)])
    assert code == EXIT_OK
    return out


class TestTrainConvertEvaluate:
    def test_smoke_run_writes_checkpoint(self, trained):
        gen = load_generator(trained / "generator.npz")
        assert gen.config.content_model is not None
        assert len(lines(trained / "steps.jsonl")) == 50
        assert json.load(open(trained / "config.json"))["resolved"]["train"]["steps"] == 50

    def test_content_encoder_uses_trained_recognizer(self, workspace, trained):
        root, _, _ = workspace
        recognizer = load_aux(root / "aux" / "content.npz", "asr")
        used = load_generator(trained / "generator.npz").content_encoder.recognizer
        for name, value in recognizer.state_dict().items():
            torch.testing.assert_close(used.state_dict()[name], value, rtol=0, atol=0)

    def test_missing_aux_names_kind(self, workspace, tmp_path, capsys):
        root, _, manifest = workspace
        (tmp_path / "aux").mkdir()
        for kind in ("sv", "asr"):
            (tmp_path / "aux" / f"{kind}.npz").write_bytes((root / "aux" / f"{kind}.npz").read_bytes())
        code = main(["train", "--corpus", str(manifest), "--aux-dir", str(tmp_path / "aux"), "--steps", "1",
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_RUNTIME
        assert "pitch" in capsys.readouterr().err

    def test_step1_only_log(self, workspace, tmp_path):
        root, cfg, manifest = workspace
        code = main(["train", "--corpus", str(manifest), "--aux-dir", str(root / "aux"), "--preset", "desk",
                     "--steps", "3", "--ablation", "wo_step23", "--config", str(cfg), "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert {r["substep"] for r in lines(tmp_path / "losses.jsonl")} == {1}

    def test_convert_mel_and_wav(self, trained, workspace, tmp_path):
        root, _, manifest = workspace
        recs = lines(manifest)
        src, ref = root / "corpus" / recs[0]["mel"], root / "corpus" / recs[-1]["mel"]
        code = main(["convert", "--generator", str(trained / "generator.npz"), "--source", str(src),
                     "--reference", str(ref), "--wav", "--gl-iterations", "4", "--out", str(tmp_path)])
        assert code == EXIT_OK
        out = read_mel_cache(tmp_path / "converted.mel")
        assert out.frames == read_mel_cache(src).frames
        assert json.load(open(tmp_path / "converted.wav.json"))["iterations"] == 4
        assert (tmp_path / "converted.wav").stat().st_size > 0
        assert (tmp_path / "config.json").exists()

    def test_evaluate_with_reference_scorer(self, trained, workspace, tmp_path):
        root, cfg, manifest = workspace
        ref_dir = tmp_path / "corpus"
        assert main(["synth-corpus", "--config", str(cfg), "--reference-speakers", "3", "--out", str(ref_dir)]) == EXIT_OK
        ref_rows = lines(ref_dir / "reference" / "manifest.jsonl")
        assert {r["speaker"] for r in ref_rows} == {"S0", "S1", "S2"}
        assert main(["train-aux", "--kind", "sv", "--corpus", str(ref_dir / "reference" / "manifest.jsonl"),
                     "--steps", "3", "--config", str(cfg), "--out", str(tmp_path / "scorer")]) == EXIT_OK
        args = ["evaluate", "--generator", str(trained / "generator.npz"), "--corpus", str(manifest),
                "--aux-dir", str(root / "aux"), "--pairs", "4"]
        assert main(args + ["--out", str(tmp_path / "own")]) == EXIT_OK
        assert main(args + ["--scorer", str(tmp_path / "scorer" / "sv.npz"), "--out", str(tmp_path / "ext")]) == EXIT_OK
        own, ext = (json.load(open(tmp_path / d / "report.json")) for d in ("own", "ext"))
        assert [p["per"] for p in own["pairs"]] == [p["per"] for p in ext["pairs"]]
        assert own["mean_sim"] != ext["mean_sim"]

    def test_evaluate_report(self, trained, workspace, tmp_path):
        root, _, manifest = workspace
        args = ["evaluate", "--generator", str(trained / "generator.npz"), "--corpus", str(manifest),
                "--aux-dir", str(root / "aux")]
        assert main(args + ["--pairs", "0", "--out", str(tmp_path / "none")]) == EXIT_RUNTIME
        assert not (tmp_path / "none" / "report.json").exists()
        assert main(args + ["--pairs", "6", "--out", str(tmp_path)]) == EXIT_OK
        rep = json.load(open(tmp_path / "report.json"))
        assert rep["count"] == len(rep["pairs"]) == 6
        assert rep["mean_sim"] == pytest.approx(np.mean([p["sim"] for p in rep["pairs"]]))
        assert rep["per"] == pytest.approx(np.mean([p["per"] for p in rep["pairs"]]))
        assert (tmp_path / "sim_matrix.csv").exists()

    def test_ablate(self, workspace, tmp_path):
        root, cfg, manifest = workspace
        code = main(["ablate", "--corpus", str(manifest), "--aux-dir", str(root / "aux"), "--preset", "desk",
                     "--steps", "2", "--settings", "3,#4", "--pairs", "3", "--holdout", "2", "--config", str(cfg),
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = json.load(open(tmp_path / "ablation.json"))
        assert [r["setting"] for r in rows] == ["#1", "#3", "#4"]

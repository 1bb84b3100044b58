import json

import numpy as np
import pytest
import torch

from mullivc.auxiliary import AsrModel, AuxModels, PitchModel, SVModel
from mullivc.checkpoint import load_checkpoint
from mullivc.corpus import Corpus, InfeasibleCorpusError
from mullivc.losses import STEP_TERMS, LossWeights, compose_step_loss, recon_loss
from mullivc.nets import NetConfig
from mullivc.synthetic import SyntheticSpec, generate_synthetic_corpus
from mullivc.trainer import CycleTrainer, RoleTensors, TrainConfig, TrainingDivergence, batch_tensors, train

BINS = 16


@pytest.fixture(scope="module")
def corpus():
    c, _ = generate_synthetic_corpus(SyntheticSpec(mel_bins=BINS, seed=1))
    return c


def make_aux(corpus, seed=0):
    torch.manual_seed(seed)
    return AuxModels(SVModel(BINS, 2, 16), AsrModel(BINS, corpus.phone_inventory(), hidden=16, layers=1),
                     PitchModel(BINS, hidden=16))


NET = NetConfig.tiny(mel_bins=BINS, content_channels=8)


def make_trainer(corpus, **kw):
    kw.setdefault("max_frames", 24)
    return CycleTrainer(NET, TrainConfig(**kw), make_aux(corpus), corpus)


@pytest.fixture
def trainer(corpus):
    return make_trainer(corpus)


@pytest.fixture
def roles(trainer):
    return batch_tensors(trainer.sampler.sample(4), 24)


def gen_grads(trainer):
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in trainer.generator.named_parameters() if p.requires_grad}


def state(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def test_config_defaults_and_roundtrip():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.batch_size, cfg.steps) == (1e-4, 0.9, 0.999, 1e-9, 8, 240_000)
    assert not cfg.detach_cycle
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        TrainConfig(ablation="nope")
    assert TrainConfig(ablation="wo_asr").effective_weights.asr == 0


class TestSubstep1:
    def test_copy_generator_zeroes_rec_and_pitch(self, trainer, roles, monkeypatch):
        monkeypatch.setattr(trainer.generator, "forward", lambda content, ref: content.clone())
        bd, m_hat = trainer.run_substep1(roles)
        assert float(bd.components["rec"].detach()) == 0
        assert float(bd.components["pitch"]) == 0

    def test_finite_and_composite(self, trainer, roles):
        bd, m_hat = trainer.run_substep1(roles)
        assert set(bd.components) == STEP_TERMS[1]
        assert all(torch.isfinite(v) for v in bd.components.values())
        w = LossWeights()
        want = sum(w[k] * float(v.detach()) for k, v in bd.components.items())
        assert float(bd.composite.detach()) == pytest.approx(want, rel=1e-6)
        assert float(bd.components["rec"].detach()) == pytest.approx(float(recon_loss(roles.c1, m_hat).detach()))


class TestSubstep2:
    def test_terms_and_length(self, trainer, roles):
        bd, m_hat = trainer.run_substep2(roles)
        assert set(bd.components) == {"adv", "timbre", "asr"}
        assert m_hat.shape == roles.c2.shape

    def test_zero_timbre_and_asr_weights_leave_pure_adversarial_gradient(self, corpus, roles):
        tr = make_trainer(corpus, weights=LossWeights(timbre=0.0, asr=0.0))
        bd, _ = tr.run_substep2(roles)
        bd.composite.backward()
        full = gen_grads(tr)
        tr.generator.zero_grad()
        bd, _ = tr.run_substep2(roles)
        (0.05 * bd.components["adv"]).backward()
        adv = gen_grads(tr)
        for name in full:
            torch.testing.assert_close(full[name], adv[name], rtol=1e-5, atol=1e-9)


class TestSubstep3:
    def test_detached_cycle_blocks_gradient(self, trainer, roles):
        _, m_hat2 = trainer.run_substep2(roles)
        bd, _, ref = trainer.run_substep3(roles, m_hat2, detach_cycle=True)
        (g,) = torch.autograd.grad(bd.composite, m_hat2, allow_unused=True)
        assert g is None
        assert ref.data_ptr() == m_hat2.data_ptr()

    def test_attached_cycle_reaches_step2(self, trainer, roles):
        _, m_hat2 = trainer.run_substep2(roles)
        bd, _, ref = trainer.run_substep3(roles, m_hat2, detach_cycle=False)
        assert ref is m_hat2
        (g,) = torch.autograd.grad(bd.composite, m_hat2, retain_graph=True)
        assert g.abs().sum() > 0
        params = [p for p in trainer.generator.parameters() if p.requires_grad]
        attached = torch.autograd.grad(bd.composite, params, allow_unused=True)
        _, m_hat2 = trainer.run_substep2(roles)
        bd_det, _, _ = trainer.run_substep3(roles, m_hat2, detach_cycle=True)
        detached = torch.autograd.grad(bd_det.composite, params, allow_unused=True)
        diffs = [(a - (d if d is not None else 0)).abs().max() for a, d in zip(attached, detached) if a is not None]
        assert max(diffs) > 0

    def test_reconstruction_target_is_step3_content(self, trainer, roles):
        _, m_hat2 = trainer.run_substep2(roles)
        bd, m_hat3, _ = trainer.run_substep3(roles, m_hat2)
        assert float(bd.components["rec"].detach()) == float(recon_loss(roles.c3, m_hat3).detach())
        assert set(bd.components) == STEP_TERMS[3]


class TestTrainingStep:
    def test_wiring_over_twenty_steps(self, corpus):
        tr = make_trainer(corpus)
        aux_before = [state(m) for m in tr.aux.modules()]
        seen = []
        original = tr.run_substep3

        def spy(roles, m_hat2, detach_cycle=None):
            out = original(roles, m_hat2, detach_cycle)
            seen.append(out[2] is m_hat2)
            return out

        tr.run_substep3 = spy
        for _ in range(20):
            art = tr.training_step(tr.sampler.sample(2))
            assert {k: set(bd.components) for k, bd in art.breakdowns.items()} == STEP_TERMS
            assert art.total == pytest.approx(sum(float(bd.composite.detach()) for bd in art.breakdowns.values()), rel=1e-5)
            for m in tr.aux.modules():
                assert all(p.grad is None for p in m.parameters())
        assert seen == [True] * 20
        for m, before in zip(tr.aux.modules(), aux_before):
            for k, v in m.state_dict().items():
                assert torch.equal(v, before[k]), k

    def test_deterministic_trajectories(self, corpus):
        a = make_trainer(corpus, seed=5).train(20)
        b = make_trainer(corpus, seed=5).train(20)
        assert a == b

    def test_zero_weights_freeze_generator(self, corpus):
        tr = make_trainer(corpus, weights=LossWeights(0, 0, 0, 0, 0))
        before = state(tr.generator)
        tr.training_step(tr.sampler.sample(2))
        for k, v in tr.generator.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_updates_touch_only_their_own_model(self, corpus):
        tr = make_trainer(corpus)
        checks = []

        def guard(opt, other):
            step = opt.step

            def wrapped(*a, **k):
                snap = state(other)
                out = step(*a, **k)
                checks.append(all(torch.equal(v, snap[n]) for n, v in other.state_dict().items()))
                return out
            opt.step = wrapped

        guard(tr.g_opt, tr.discriminator)
        guard(tr.d_opt, tr.generator)
        for _ in range(3):
            tr.training_step(tr.sampler.sample(2))
        assert checks == [True] * 6

    def test_detached_gradient_is_sum_of_substep_gradients(self, corpus, roles):
        tr = make_trainer(corpus, detach_cycle=True)
        tr.generator.zero_grad()
        tr.forward_losses(roles).total.backward()
        together = gen_grads(tr)
        parts = []
        bd1, _ = tr.run_substep1(roles)
        bd2, m2 = tr.run_substep2(roles)
        bd3, _, _ = tr.run_substep3(roles, m2)
        for bd in (bd1, bd2, bd3):
            tr.generator.zero_grad()
            bd.composite.backward(retain_graph=True)
            parts.append(gen_grads(tr))
        for name, g in together.items():
            summed = sum(p[name] for p in parts)
            scale = max(float(g.norm()), float(summed.norm()), 1e-12)
            assert float((g - summed).norm()) / scale < 1e-6, name

    def test_single_step_descends_for_most_seeds(self, corpus):
        better = 0
        for seed in range(20):
            tr = make_trainer(corpus, seed=seed, lr=1e-4)
            roles = batch_tensors(tr.sampler.sample(4), 24)
            before = float(tr.forward_losses(roles).total.detach())
            tr.training_step(roles)
            after = float(tr.forward_losses(roles).total.detach())
            better += after < before
        assert better > 10

    def test_non_finite_loss_names_component(self, trainer, roles, monkeypatch):
        monkeypatch.setattr(trainer.aux.pitch, "first_layer", lambda m: m * float("nan"))
        with pytest.raises(TrainingDivergence, match="substep 1 component 'pitch'"):
            trainer.training_step(roles)


class TestTrainLoop:
    def test_step1_only_ablation(self, corpus):
        tr = make_trainer(corpus, ablation="wo_step23")
        art = tr.training_step(tr.sampler.sample(2))
        assert list(art.breakdowns) == [1]
        tr = make_trainer(corpus, ablation="wo_step3")
        assert list(tr.training_step(tr.sampler.sample(2)).breakdowns) == [1, 2]

    def test_one_language_corpus_fails_before_training(self, corpus):
        lang = corpus.languages[0]
        one = Corpus([u for u in corpus.utterances if u.language_id == lang])
        with pytest.raises(InfeasibleCorpusError):
            make_trainer(one)

    def test_zero_steps_saves_initialization(self, corpus, tmp_path):
        cfg = TrainConfig(steps=0, seed=3, max_frames=24)
        train(cfg, corpus, make_aux(corpus), NET, tmp_path)
        fresh = CycleTrainer(NET, cfg, make_aux(corpus), corpus)
        _, arrays = load_checkpoint(tmp_path / "generator.npz", "generator")
        for k, v in fresh.generator.state_dict().items():
            np.testing.assert_array_equal(arrays[f"generator.{k}"], v.numpy())

    def test_logs_one_record_per_substep(self, corpus, tmp_path):
        make_trainer(corpus).train(3, tmp_path)
        recs = [json.loads(l) for l in open(tmp_path / "losses.jsonl")]
        assert [(r["step"], r["substep"]) for r in recs] == [(s, k) for s in (1, 2, 3) for k in (1, 2, 3)]
        assert set(recs[1]) == {"step", "substep", "adv", "timbre", "asr", "composite"}

    def test_resume_matches_uninterrupted_run(self, corpus, tmp_path):
        cfg = TrainConfig(steps=20, seed=7, batch_size=2, max_frames=24, checkpoint_interval=10)
        full = train(cfg, corpus, make_aux(corpus), NET, tmp_path / "full")
        resumed = train(cfg, corpus, make_aux(corpus), NET, tmp_path / "resumed",
                        resume=tmp_path / "full" / "checkpoint_0000010.npz")
        assert resumed.step == 20
        for k, v in full.generator.state_dict().items():
            torch.testing.assert_close(resumed.generator.state_dict()[k], v, rtol=0, atol=1e-6)
        tail = lambda p: [json.loads(l) for l in open(p / "steps.jsonl")][-10:]
        for a, b in zip(tail(tmp_path / "full"), tail(tmp_path / "resumed")):
            assert a["step"] == b["step"]
            assert a["g_loss"] == pytest.approx(b["g_loss"], abs=1e-6)

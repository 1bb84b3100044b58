import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mullivc.auxiliary import AsrModel, PitchModel
from mullivc.losses import (STEP_TERMS, CompositionError, LossWeights, asr_perceptual_loss, compose_step_loss,
                            lsgan_losses, pitch_perceptual_loss, recon_loss, timbre_loss)

from gradcheck import analytic_grad, numeric_grad, rel_err

t = lambda *v: torch.tensor(v, dtype=torch.float64)


def test_default_weights():
    w = LossWeights()
    assert (w.adv, w.rec, w.timbre, w.pitch, w.asr) == (0.05, 1.0, 0.1, 1.0, 0.5)
    with pytest.raises(ValueError):
        LossWeights(adv=-1)


class TestRecon:
    def test_identity_and_offset(self):
        m = torch.randn(5, 4)
        assert float(recon_loss(m, m)) == 0
        assert float(recon_loss(m, m + 1)) == pytest.approx(1.0)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        total = 0.0
        for i in range(3):
            for j in range(4):
                total += (a[i, j] - b[i, j]) ** 2
        assert float(recon_loss(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(total / 12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            recon_loss(torch.zeros(3, 4), torch.zeros(4, 4))


class TestTimbre:
    def test_special_angles(self):
        e = t(1.0, 2.0, 3.0)
        assert float(timbre_loss(e, e)) == pytest.approx(0.0, abs=1e-12)
        assert float(timbre_loss(e, -e)) == pytest.approx(2.0)
        assert float(timbre_loss(t(1.0, 0.0), t(0.0, 3.0))) == pytest.approx(1.0)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            timbre_loss(t(0.0, 0.0), t(1.0, 0.0))

    def test_range_over_many_pairs(self):
        rng = np.random.default_rng(0)
        e, f = torch.from_numpy(rng.normal(size=(10_000, 8))), torch.from_numpy(rng.normal(size=(10_000, 8)))
        per_pair = torch.stack([timbre_loss(e[i], f[i]) for i in range(0, 10_000, 50)])
        assert float(per_pair.min()) >= 0 and float(per_pair.max()) <= 2
        batched = 1 - torch.nn.functional.cosine_similarity(e, f)
        assert float(batched.min()) >= 0 and float(batched.max()) <= 2
        assert float(timbre_loss(e, f)) == pytest.approx(float(batched.mean()))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)),
           st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, e, f, a, b):
        if np.linalg.norm(e) < 1e-3 or np.linalg.norm(f) < 1e-3:
            return
        e, f = torch.from_numpy(e), torch.from_numpy(f)
        base = float(timbre_loss(e, f))
        assert 0 <= base <= 2 + 1e-12
        assert float(timbre_loss(a * e, b * f)) == pytest.approx(base, abs=1e-9)


@pytest.fixture
def pitch_model():
    return PitchModel(6, hidden=8).double().requires_grad_(False)


@pytest.fixture
def asr_model():
    return AsrModel(6, ["a", "b"], hidden=8, layers=2).double().requires_grad_(False)


class TestPerceptual:
    def test_zero_on_identical(self, pitch_model, asr_model):
        m = torch.randn(1, 9, 6, dtype=torch.float64)
        assert float(pitch_perceptual_loss(m, m, pitch_model)) == 0
        assert float(asr_perceptual_loss(m, m, asr_model)) == 0
        m2 = m + 0.5
        assert float(pitch_perceptual_loss(m, m2, pitch_model)) > 0
        assert float(asr_perceptual_loss(m, m2, asr_model)) > 0

    def test_two_pass_recomputation(self, pitch_model, asr_model):
        m, h = torch.randn(2, 1, 9, 6, dtype=torch.float64)
        e1, e2 = pitch_model(m).first_hidden, pitch_model(h).first_hidden
        assert float(pitch_perceptual_loss(m, h, pitch_model)) == pytest.approx(float(((e1 - e2) ** 2).mean()))
        a1, a2 = asr_model(m).last_hidden, asr_model(h).last_hidden
        assert float(asr_perceptual_loss(m, h, asr_model)) == pytest.approx(float(((a1 - a2) ** 2).mean()))

    def test_quadratic_in_embedding_discrepancy(self, asr_model, monkeypatch):
        ref = torch.randn(1, 3, 8, dtype=torch.float64)
        delta = torch.randn(1, 3, 8, dtype=torch.float64)
        outputs = {}
        monkeypatch.setattr(asr_model, "forward", lambda m: type("O", (), {"last_hidden": outputs[id(m)]})())
        m, h1, h2 = (torch.zeros(1, 9, 6, dtype=torch.float64) for _ in range(3))
        outputs.update({id(m): ref, id(h1): ref + delta, id(h2): ref + 2 * delta})
        one = float(asr_perceptual_loss(m, h1, asr_model))
        assert float(asr_perceptual_loss(m, h2, asr_model)) == pytest.approx(4 * one)

    def test_gradient_flows_into_generated_side_only(self, pitch_model, asr_model):
        for loss in (lambda a, b: pitch_perceptual_loss(a, b, pitch_model),
                     lambda a, b: asr_perceptual_loss(a, b, asr_model)):
            m = torch.randn(1, 8, 6, dtype=torch.float64, requires_grad=True)
            h = torch.randn(1, 8, 6, dtype=torch.float64, requires_grad=True)
            loss(m, h).backward()
            assert m.grad is None and h.grad.abs().sum() > 0

    def test_gradients_match_finite_differences(self, pitch_model, asr_model):
        m = torch.randn(1, 8, 6, dtype=torch.float64)
        h = torch.randn(1, 8, 6, dtype=torch.float64, requires_grad=True)
        for f in (lambda: pitch_perceptual_loss(m, h, pitch_model), lambda: asr_perceptual_loss(m, h, asr_model),
                  lambda: recon_loss(m, h)):
            assert rel_err(analytic_grad(f, h), numeric_grad(f, h)) < 1e-3

    def test_shape_mismatch(self, pitch_model):
        with pytest.raises(ValueError):
            pitch_perceptual_loss(torch.zeros(1, 8, 6), torch.zeros(1, 9, 6), pitch_model)


class TestLsgan:
    @pytest.mark.parametrize("real,fake,g,d", [(1.0, 0.0, 1.0, 0.0), (0.3, 1.0, 0.0, 1.49), (0.5, 0.5, 0.25, 0.5)])
    def test_target_values(self, real, fake, g, d):
        g_loss, d_loss = lsgan_losses(torch.full((1, 1), real), torch.full((1, 1), fake))
        assert float(g_loss) == pytest.approx(g)
        assert float(d_loss) == pytest.approx(d)

    def test_gradient_matches_finite_differences(self):
        real = torch.randn(3, 4, dtype=torch.float64)
        fake = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        for i in range(2):
            f = lambda: lsgan_losses(real, fake)[i]
            assert rel_err(analytic_grad(f, fake), numeric_grad(f, fake)) < 1e-3


class TestCompose:
    def test_step1_worked_example(self):
        bd = compose_step_loss(1, {"adv": t(0.4), "rec": t(0.9), "timbre": t(0.5), "pitch": t(0.2)})
        assert float(bd.composite) == pytest.approx(0.05 * 0.4 + 0.9 + 0.1 * 0.5 + 0.2)
        assert float(bd.composite) == pytest.approx(1.17)

    def test_step2_worked_example(self):
        bd = compose_step_loss(2, {"adv": t(0.4), "timbre": t(0.5), "asr": t(0.6)})
        assert float(bd.composite) == pytest.approx(0.37)

    def test_step3_uses_step1_formula(self):
        comps = {"adv": t(0.4), "rec": t(0.9), "timbre": t(0.5), "pitch": t(0.2)}
        assert float(compose_step_loss(3, comps).composite) == float(compose_step_loss(1, comps).composite)

    @pytest.mark.parametrize("step,comps", [
        (2, {"adv": 1, "timbre": 1, "asr": 1, "rec": 1}),
        (1, {"adv": 1, "rec": 1, "timbre": 1}),
        (3, {"adv": 1, "rec": 1, "timbre": 1, "pitch": 1, "asr": 1}),
        (4, {}),
    ])
    def test_wrong_components(self, step, comps):
        with pytest.raises(CompositionError):
            compose_step_loss(step, {k: t(float(v)) for k, v in comps.items()})

    @settings(max_examples=100, deadline=None)
    @given(st.sampled_from([1, 2, 3]), st.data())
    def test_linear_with_lambda_coefficients(self, step, data):
        weights = LossWeights(*(data.draw(st.floats(0, 5)) for _ in range(5)))
        base = {k: t(data.draw(st.floats(-10, 10))) for k in STEP_TERMS[step]}
        name = data.draw(st.sampled_from(sorted(STEP_TERMS[step])))
        bump = data.draw(st.floats(-10, 10))
        moved = dict(base, **{name: base[name] + bump})
        diff = float(compose_step_loss(step, moved, weights).composite - compose_step_loss(step, base, weights).composite)
        assert diff == pytest.approx(weights[name] * bump, abs=1e-9)

    def test_record(self):
        bd = compose_step_loss(2, {"adv": t(0.4), "timbre": t(0.5), "asr": t(0.6)})
        assert bd.as_record() == pytest.approx({"adv": 0.4, "asr": 0.6, "timbre": 0.5, "composite": 0.37})

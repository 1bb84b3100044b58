import numpy as np
import pytest
import torch

from mullivc.audio import MelSpec
from mullivc.corpus import Corpus, Utterance


def make_utt(speaker, language, utt_id, frames=12, bins=8, seed=0):
    rng = np.random.default_rng(seed)
    mel = MelSpec(rng.normal(-4.0, 1.0, size=(frames, bins)))
    half = frames // 2
    phones = [(f"{language}a", 0, half), (f"{language}b", half, frames)]
    return Utterance(speaker, language, utt_id, mel, phones, np.zeros(frames))


@pytest.fixture
def make_utterance():
    return make_utt


@pytest.fixture
def two_language_corpus():
    utts = [make_utt("s1", "A", f"u{i}", seed=i) for i in (1, 2, 4)]
    utts.append(make_utt("s2", "B", "u3", seed=3))
    return Corpus(utts)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for r in reports if getattr(r, "when", "") == "call"
             for key, value in r.user_properties if key == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

"""Three-substep cycle training: one generator update from the summed substep
losses, then one discriminator update on the detached outputs."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .auxiliary import AuxModels
from .checkpoint import (load_checkpoint, load_module, load_optimizer, module_tensors, optimizer_tensors,
                         save_checkpoint)
from .corpus import CycleBatch, CycleSampler, Corpus, crop_stack
from .losses import (STEP_TERMS, LossBreakdown, LossWeights, compose_step_loss, lsgan_discriminator_loss,
                     lsgan_generator_loss, pitch_perceptual_loss, asr_perceptual_loss, recon_loss, timbre_loss)
from .nets import Generator, NetConfig, PatchDiscriminator

logger = logging.getLogger(__name__)

ABLATIONS = {
    "full": (1, 2, 3),
    "wo_step3": (1, 2),
    "wo_step23": (1,),
    "wo_asr": (1, 2, 3),
    "wo_conformer": (1, 2, 3),
}


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    batch_size: int = 8
    steps: int = 240_000
    seed: int = 0
    detach_cycle: bool = False
    checkpoint_interval: int = 0
    log_interval: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: str = "full"
    max_frames: int | None = 64
    swap_languages: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")

    @property
    def substeps(self) -> tuple[int, ...]:
        return ABLATIONS[self.ablation]

    @property
    def effective_weights(self) -> LossWeights:
        return replace(self.weights, asr=0.0) if self.ablation == "wo_asr" else self.weights

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)


class RoleTensors(NamedTuple):
    c1: torch.Tensor  # step-1 content: speaker 1, language A
    ref: torch.Tensor  # step-1 and step-2 timbre reference: speaker 1, language A
    c2: torch.Tensor  # step-2 content: speaker 2, language B
    c3: torch.Tensor  # step-3 content: speaker 1, language A


def batch_tensors(batch: CycleBatch, max_frames: int | None = None) -> RoleTensors:
    def stack(role):
        return torch.from_numpy(crop_stack([u.mel.values for u in batch.role(role)], max_frames))
    return RoleTensors(stack("step1_content"), stack("step1_timbre"), stack("step2_content"), stack("step3_content"))


@dataclass
class StepArtifacts:
    outputs: dict[int, torch.Tensor]
    breakdowns: dict[int, LossBreakdown]
    total: float
    d_loss: float
    step3_reference: torch.Tensor | None = None


class CycleTrainer:
    def __init__(self, net_config: NetConfig, config: TrainConfig, aux: AuxModels, corpus: Corpus | None = None,
                 content_encoder: torch.nn.Module | None = None):
        self.config = config
        if config.ablation == "wo_conformer":
            net_config = replace(net_config, fine_grained=False)
        self.net_config = net_config
        self.aux = aux.freeze()
        torch.manual_seed(config.seed)
        self.generator = Generator(net_config, content_encoder)
        self.discriminator = PatchDiscriminator(net_config.disc_channels)
        opt_kw = dict(lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
        self.g_opt = torch.optim.Adam([p for p in self.generator.parameters() if p.requires_grad], **opt_kw)
        self.d_opt = torch.optim.Adam(self.discriminator.parameters(), **opt_kw)
        self.sampler = CycleSampler(corpus, config.seed, config.swap_languages) if corpus is not None else None
        self.step = 0

    # --- substeps -------------------------------------------------------

    def _adv(self, m_hat: torch.Tensor) -> torch.Tensor:
        return lsgan_generator_loss(self.discriminator(m_hat))

    def _sv_target(self, mel: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.aux.sv(mel)

    def _compose(self, step: int, comps: dict) -> LossBreakdown:
        return compose_step_loss(step, comps, self.config.effective_weights)

    def run_substep1(self, roles: RoleTensors) -> tuple[LossBreakdown, torch.Tensor]:
        m_hat = self.generator(roles.c1, roles.ref)
        comps = {
            "adv": self._adv(m_hat),
            "rec": recon_loss(roles.c1, m_hat),
            "timbre": timbre_loss(self._sv_target(roles.ref), self.aux.sv(m_hat)),
            "pitch": pitch_perceptual_loss(roles.c1, m_hat, self.aux.pitch),
        }
        return self._compose(1, comps), m_hat

    def run_substep2(self, roles: RoleTensors) -> tuple[LossBreakdown, torch.Tensor]:
        m_hat = self.generator(roles.c2, roles.ref)
        comps = {
            "adv": self._adv(m_hat),
            "timbre": timbre_loss(self._sv_target(roles.ref), self.aux.sv(m_hat)),
            "asr": asr_perceptual_loss(roles.c2, m_hat, self.aux.asr),
        }
        return self._compose(2, comps), m_hat

    def run_substep3(self, roles: RoleTensors, m_hat2: torch.Tensor,
                     detach_cycle: bool | None = None) -> tuple[LossBreakdown, torch.Tensor, torch.Tensor]:
        detach = self.config.detach_cycle if detach_cycle is None else detach_cycle
        reference = m_hat2.detach() if detach else m_hat2
        m_hat = self.generator(roles.c3, reference)
        comps = {
            "adv": self._adv(m_hat),
            "rec": recon_loss(roles.c3, m_hat),
            "timbre": timbre_loss(self._sv_target(roles.c3), self.aux.sv(m_hat)),
            "pitch": pitch_perceptual_loss(roles.c3, m_hat, self.aux.pitch),
        }
        return self._compose(3, comps), m_hat, reference

    def forward_losses(self, roles: RoleTensors) -> StepArtifacts:
        """Run the configured substeps and sum their composites, without updating anything."""
        self.discriminator.requires_grad_(False)
        try:
            bds, outs, ref3 = {}, {}, None
            bds[1], outs[1] = self.run_substep1(roles)
            if 2 in self.config.substeps:
                bds[2], outs[2] = self.run_substep2(roles)
            if 3 in self.config.substeps:
                bds[3], outs[3], ref3 = self.run_substep3(roles, outs[2])
        finally:
            self.discriminator.requires_grad_(True)
        for k, bd in bds.items():
            assert set(bd.components) == STEP_TERMS[k]
            for name, value in bd.components.items():
                if not torch.isfinite(value):
                    raise TrainingDivergence(f"step {self.step}: substep {k} component {name!r} is {float(value.detach())}")
        total = sum(bd.composite for bd in bds.values())
        return StepArtifacts(outs, bds, total, float("nan"), ref3)

    def training_step(self, batch: CycleBatch | RoleTensors) -> StepArtifacts:
        roles = batch if isinstance(batch, RoleTensors) else batch_tensors(batch, self.config.max_frames)
        self.generator.train()
        art = self.forward_losses(roles)
        self.g_opt.zero_grad(set_to_none=False)
        art.total.backward()
        self.g_opt.step()

        reals = {1: roles.c1, 2: roles.c2, 3: roles.c3}
        d_loss = sum(lsgan_discriminator_loss(self.discriminator(reals[k]), self.discriminator(m.detach()))
                     for k, m in art.outputs.items()) / len(art.outputs)
        self.d_opt.zero_grad(set_to_none=False)
        d_loss.backward()
        self.d_opt.step()

        art.total = float(art.total.detach())
        art.d_loss = float(d_loss.detach())
        art.outputs = {k: v.detach() for k, v in art.outputs.items()}
        self.step += 1
        return art

    # --- loop -----------------------------------------------------------

    def train(self, steps: int, out_dir=None) -> list[StepArtifacts | dict]:
        """Run ``steps`` sampled training steps; returns per-step loss records."""
        if self.sampler is None:
            raise ValueError("trainer has no corpus to sample from")
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        history = []
        for _ in range(steps):
            batch = self.sampler.sample(self.config.batch_size)
            art = self.training_step(batch)
            records = [{"step": self.step, "substep": k, **bd.as_record()} for k, bd in art.breakdowns.items()]
            summary = {"step": self.step, "g_loss": art.total, "d_loss": art.d_loss}
            history.append(summary | {"substeps": records})
            if out is not None and self.config.log_interval and self.step % self.config.log_interval == 0:
                with open(out / "losses.jsonl", "a", encoding="utf-8") as f:
                    for rec in records:
                        f.write(json.dumps(rec) + "\n")
                with open(out / "steps.jsonl", "a", encoding="utf-8") as f:
                    f.write(json.dumps(summary) + "\n")
            if out is not None and self.config.checkpoint_interval and self.step % self.config.checkpoint_interval == 0:
                self.save(out / f"checkpoint_{self.step:07d}.npz")
        return history

    # --- persistence ----------------------------------------------------

    def save(self, path) -> Path:
        tensors = module_tensors(self.generator, "generator") | module_tensors(self.discriminator, "discriminator")
        g_state, g_header = optimizer_tensors(self.g_opt, "g_opt")
        d_state, d_header = optimizer_tensors(self.d_opt, "d_opt")
        extra = {
            "train_config": self.config.to_dict(),
            "step": self.step,
            "g_opt": g_header,
            "d_opt": d_header,
            "sampler_state": self.sampler.get_state() if self.sampler is not None else None,
        }
        return save_checkpoint(path, "generator", self.net_config.to_dict(), tensors | g_state | d_state, extra)

    @classmethod
    def from_checkpoint(cls, path, aux: AuxModels, corpus: Corpus | None = None,
                        config: TrainConfig | None = None) -> "CycleTrainer":
        meta, arrays = load_checkpoint(path, "generator")
        extra = meta["extra"]
        net_config = NetConfig.from_dict(meta["config"])
        saved = TrainConfig.from_dict(extra["train_config"])
        trainer = cls(net_config, config or saved, aux, corpus)
        load_module(trainer.generator, arrays, "generator")
        load_module(trainer.discriminator, arrays, "discriminator")
        load_optimizer(trainer.g_opt, arrays, "g_opt", extra["g_opt"])
        load_optimizer(trainer.d_opt, arrays, "d_opt", extra["d_opt"])
        trainer.step = extra["step"]
        if trainer.sampler is not None and extra.get("sampler_state") is not None:
            trainer.sampler.set_state(extra["sampler_state"])
        return trainer


def load_generator(path) -> Generator:
    meta, arrays = load_checkpoint(path, "generator")
    gen = Generator(NetConfig.from_dict(meta["config"]))
    load_module(gen, arrays, "generator")
    gen.eval()
    return gen


def train(config: TrainConfig, corpus: Corpus, aux: AuxModels, net_config: NetConfig, out_dir=None,
          resume=None, content_encoder: torch.nn.Module | None = None) -> CycleTrainer:
    if resume is not None:
        trainer = CycleTrainer.from_checkpoint(resume, aux, corpus, config)
    else:
        trainer = CycleTrainer(net_config, config, aux, corpus, content_encoder)
    remaining = max(config.steps - trainer.step, 0)
    trainer.train(remaining, out_dir)
    if out_dir is not None:
        trainer.save(Path(out_dir) / "generator.npz")
    return trainer

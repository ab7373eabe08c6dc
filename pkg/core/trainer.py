"""
Coupled cGAN training: a shared balanced-pair training loop, the per-step
loss monitor and the cpGAN learner with its alternating D/G schedule.
"""

import copy
import csv
import json
import math
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from .checkpoint import Checkpoint
from .config import RunConfig, config_from_dict
from .console import get_logger, success
from .datamodel import DatasetManifest, Domain, PairBatch, sample_pair_batch
from .errors import ArchitectureMismatchError, ConfigError, NonFiniteLossError, PipelineError
from .losses import (LossBreakdown, LossWeights, coupling_loss, cgan_losses, contrastive_loss,
                     generator_adversarial_loss, l2_reconstruction, objective, perceptual_loss)
from .networks import (build_discriminator, build_generator, build_perceptual, parameter_checksum,
                       set_trainable)

logger = get_logger(__name__)

# Fixed offsets so that equally named modules get equal initial weights across learners
MODULE_SEEDS = {"g_pr": 0, "g_fr": 1, "d_pr": 2, "d_fr": 3, "classifier": 4, "embed_disc": 5}


def module_seed(seed: int, name: str) -> int:
    return (seed * 7919 + MODULE_SEEDS[name]) % (2 ** 63)


# ==========================================
#  MONITOR
# ==========================================

class TrainingMonitor:
    """Records every step, raises anomaly alerts and writes the CSV log"""

    def __init__(self, log_path: Optional[Path] = None, window: int = 10,
                 spike_factor: float = 3.0, append: bool = False):
        self.window = window
        self.spike_factor = spike_factor
        self.history: List[Dict] = []
        self.alerts: List[Dict] = []
        self.start_time = datetime.now()
        self.log_path = Path(log_path) if log_path else None
        self._handle = None
        self._writer = None
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            resuming = append and self.log_path.exists()
            self._handle = open(self.log_path, "a" if resuming else "w", newline="", encoding="utf-8")
            self._writer = csv.DictWriter(self._handle, fieldnames=["epoch", "step"] + LossBreakdown.columns())
            if not resuming:
                self._writer.writeheader()

    def record(self, epoch: int, step: int, breakdown: LossBreakdown) -> None:
        row = {"epoch": epoch, "step": step, **breakdown.to_row()}
        self._check_anomalies(step, breakdown)
        self.history.append(row)
        if self._writer:
            self._writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
            self._handle.flush()

    def _check_anomalies(self, step: int, breakdown: LossBreakdown) -> None:
        if not breakdown.is_finite():
            bad = [k for k, v in breakdown.to_row().items() if v is not None and not math.isfinite(v)]
            self._generate_alert("NON_FINITE", step, f"non-finite terms: {', '.join(bad)}")
            return
        recent = [r["l_tot"] for r in self.history[-self.window:]]
        if len(recent) == self.window:
            mean = sum(recent) / len(recent)
            if mean > 0 and breakdown.l_tot > self.spike_factor * mean:
                self._generate_alert("LOSS_SPIKE", step,
                                     f"l_tot={breakdown.l_tot:.4g} vs trailing mean {mean:.4g}")

    def _generate_alert(self, kind: str, step: int, message: str) -> None:
        self.alerts.append({"timestamp": datetime.now().isoformat(), "kind": kind,
                            "step": step, "message": message})
        logger.warning("[%s] step %d: %s", kind, step, message)

    def epoch_means(self, epoch: int) -> Dict[str, float]:
        rows = [r for r in self.history if r["epoch"] == epoch]
        means = {}
        for key in LossBreakdown.columns():
            values = [r[key] for r in rows if r[key] is not None]
            if values:
                means[key] = float(np.mean(values))
        return means

    def get_summary(self) -> Dict:
        return {
            "steps": len(self.history),
            "alerts": len(self.alerts),
            "final": self.history[-1] if self.history else None,
            "elapsed_s": (datetime.now() - self.start_time).total_seconds(),
        }

    def close(self) -> None:
        if self._handle:
            self._handle.close()
            self._handle = None


# ==========================================
#  SHARED PAIR-TRAINING LOOP
# ==========================================

class PairTrainer:
    """Base loop: sample, step, log, checkpoint. Subclasses build the modules."""

    model_kind = ""

    def __init__(self, manifest: DatasetManifest, config: RunConfig,
                 checkpoint: Optional[Checkpoint] = None):
        self.manifest = manifest
        self.config = config
        self.weights: LossWeights = config.weights
        self.device = torch.device(config.train.device)
        self._check_manifest()
        self.train_folds, self.test_folds = manifest.split(config.train.test_folds)
        if not self.train_folds:
            raise ConfigError("no training folds left after holding out test folds", field="test_folds")
        self.out_dir = Path(config.paths.out)

        self.modules: Dict[str, torch.nn.Module] = {}
        self.optimizers: Dict[str, torch.optim.Optimizer] = {}
        self.schedulers: Dict[str, torch.optim.lr_scheduler.StepLR] = {}
        self.build()
        for module in self.modules.values():
            module.to(self.device)
        self._make_schedulers()

        self.rng = np.random.default_rng(self.rng_seed())
        self.epoch = 0
        self.step = 0
        if checkpoint is not None:
            self.restore(checkpoint)
        self.monitor: Optional[TrainingMonitor] = None

    # -- hooks ---------------------------------------------------------
    def build(self) -> None:
        raise NotImplementedError

    def train_step(self, batch: PairBatch) -> LossBreakdown:
        raise NotImplementedError

    def rng_seed(self):
        return self.config.train.seed

    def next_batch(self):
        return sample_pair_batch(self.manifest, self.train_folds, self.config.train.batch_size, self.rng)

    def snapshot_extra(self) -> Dict:
        return {}

    # -- setup ---------------------------------------------------------
    def _check_manifest(self) -> None:
        h, w, c = self.manifest.image_size
        model = self.config.model
        if (h, w, c) != (model.image_size, model.image_size, model.channels):
            raise ArchitectureMismatchError(
                f"manifest images are {h}x{w}x{c}, model expects "
                f"{model.image_size}x{model.image_size}x{model.channels}", field="image_size")

    def adam(self, modules: Sequence[torch.nn.Module]) -> torch.optim.Adam:
        params = [p for m in modules for p in m.parameters()]
        t = self.config.train
        return torch.optim.Adam(params, lr=t.learning_rate, betas=(t.adam_beta1, t.adam_beta2))

    def _make_schedulers(self) -> None:
        t = self.config.train
        if t.lr_decay_every > 0 and t.lr_decay_gamma < 1.0:
            for name, opt in self.optimizers.items():
                self.schedulers[name] = torch.optim.lr_scheduler.StepLR(
                    opt, step_size=t.lr_decay_every, gamma=t.lr_decay_gamma)

    def steps_per_epoch(self) -> int:
        if self.config.train.steps_per_epoch:
            return self.config.train.steps_per_epoch
        profiles = len(self.manifest.select(self.train_folds, Domain.PROFILE))
        return max(1, math.ceil(profiles / self.config.train.batch_size))

    def to_device(self, *tensors: torch.Tensor):
        return tuple(t.to(self.device) for t in tensors)

    # -- phase integrity ---------------------------------------------
    def checksum(self, names: Sequence[str]) -> Optional[str]:
        if not self.config.train.verify_phases:
            return None
        return parameter_checksum([self.modules[n] for n in names])

    def verify_unchanged(self, names: Sequence[str], before: Optional[str], phase: str) -> None:
        if before is None:
            return
        if parameter_checksum([self.modules[n] for n in names]) != before:
            raise PipelineError(f"{phase} phase mutated parameters of {', '.join(names)}")

    # -- non-finite guard -------------------------------------------
    def ensure_finite(self, value: torch.Tensor, what: str, batch: PairBatch,
                      breakdown: Optional[LossBreakdown] = None) -> None:
        if torch.isfinite(value).all():
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        snapshot = self.snapshot()
        ckpt_path = snapshot.save(self.out_dir / "nan_snapshot.pfck")
        diagnostic = {
            "epoch": self.epoch,
            "step": self.step,
            "term": what,
            "value": float(value.detach().float().mean()),
            "breakdown": breakdown.to_row() if breakdown else None,
            "batch": [
                {"profile": p.profile.source_path, "frontal": p.frontal.source_path, "label_y": p.label_y}
                for p in batch.pairs
            ],
            "checkpoint": str(ckpt_path),
        }
        diag_path = self.out_dir / "nan_snapshot.json"
        diag_path.write_text(json.dumps(diagnostic, indent=2), encoding="utf-8")
        raise NonFiniteLossError(f"{what} became non-finite at epoch {self.epoch} step {self.step}",
                                 snapshot_path=str(diag_path))

    # -- state -----------------------------------------------------------
    def snapshot(self) -> Checkpoint:
        return Checkpoint(
            model=self.model_kind,
            epoch=self.epoch,
            step=self.step,
            modules={n: {k: v.detach().cpu().clone() for k, v in m.state_dict().items()}
                     for n, m in self.modules.items()},
            optimizers={n: copy.deepcopy(o.state_dict()) for n, o in self.optimizers.items()},
            schedulers={n: s.state_dict() for n, s in self.schedulers.items()},
            rng_state=copy.deepcopy(self.rng.bit_generator.state),
            config=self.config.to_dict(),
            **self.snapshot_extra(),
        )

    def restore(self, checkpoint: Checkpoint) -> None:
        if checkpoint.model != self.model_kind:
            raise ConfigError(f"checkpoint holds a {checkpoint.model} model, not {self.model_kind}",
                              field="model")
        checkpoint.check_architecture(self.config.model.architecture())
        for name, module in self.modules.items():
            checkpoint.load_into(name, module)
        for name, opt in self.optimizers.items():
            if name in checkpoint.optimizers:
                opt.load_state_dict(checkpoint.optimizers[name])
        for name, sched in self.schedulers.items():
            if name in checkpoint.schedulers:
                sched.load_state_dict(checkpoint.schedulers[name])
        if checkpoint.rng_state is not None:
            self.rng.bit_generator.state = checkpoint.rng_state
        self.epoch = checkpoint.epoch
        self.step = checkpoint.step

    # -- loop --------------------------------------------------------------
    def train(self, epochs: int) -> Checkpoint:
        """Run `epochs` more epochs; checkpoints after each one and at the end"""
        if epochs < 0:
            raise ConfigError("must be >= 0", field="epochs")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.monitor = TrainingMonitor(self.out_dir / self.log_name(), append=self.epoch > 0)
        steps = self.steps_per_epoch()
        final_epoch = self.epoch + epochs
        logger.info("%s: %d epoch(s) x %d step(s), batch %d, train folds %s",
                    self.label(), epochs, steps, self.config.train.batch_size, self.train_folds)
        try:
            while self.epoch < final_epoch:
                for module in self.modules.values():
                    module.train()
                progress = tqdm(range(steps), desc=f"{self.label()} epoch {self.epoch + 1}/{final_epoch}",
                                disable=not self.config.train.progress, leave=False, file=sys.stderr)
                for _ in progress:
                    breakdown = self.train_step(self.next_batch())
                    self.monitor.record(self.epoch, self.step, breakdown)
                    self.step += 1
                    progress.set_postfix(l_tot=f"{breakdown.l_tot:.4f}")
                for sched in self.schedulers.values():
                    sched.step()
                self.epoch += 1
                self.end_of_epoch()
                means = self.monitor.epoch_means(self.epoch - 1)
                logger.info("%s epoch %d: %s", self.label(), self.epoch,
                            " ".join(f"{k}={means[k]:.4f}" for k in self.log_keys() if k in means))
                self.snapshot().save(self.out_dir / "checkpoints" / f"{self.checkpoint_stem()}_epoch_{self.epoch:03d}.pfck")
        finally:
            self.monitor.close()

        final = self.snapshot()
        final.save(self.out_dir / f"{self.checkpoint_stem()}.pfck")
        success(logger, "%s finished at epoch %d (%d steps, %d alert(s))",
                self.label(), self.epoch, self.step, len(self.monitor.alerts))
        return final

    def end_of_epoch(self) -> None:
        pass

    def label(self) -> str:
        return self.model_kind

    def log_name(self) -> str:
        return "train_log.csv"

    def checkpoint_stem(self) -> str:
        return "checkpoint"

    def log_keys(self) -> Sequence[str]:
        return ("l_tot", "l_cpl", "genuine_distance")


def scalar(value) -> float:
    """Plain float of a loss term, off the autograd graph"""
    if isinstance(value, torch.Tensor):
        return value.detach().item()
    return float(value)


def genuine_distance(z1: torch.Tensor, z2: torch.Tensor, y: torch.Tensor) -> Optional[float]:
    """Mean embedding distance over the genuine (Y=0) pairs of a batch"""
    mask = y == 0
    if not bool(mask.any()):
        return None
    with torch.no_grad():
        return float(torch.linalg.vector_norm(z1[mask] - z2[mask], dim=-1).mean())


# ==========================================
#  COUPLED cGAN
# ==========================================

class CoupledGanTrainer(PairTrainer):
    """Alternating D/G updates of two coupled conditional U-Net GANs"""

    model_kind = "cpgan"

    def build(self) -> None:
        cfg, seed = self.config.model, self.config.train.seed
        self.modules = {
            "g_pr": build_generator(cfg, module_seed(seed, "g_pr")),
            "g_fr": build_generator(cfg, module_seed(seed, "g_fr")),
            "d_pr": build_discriminator(cfg, module_seed(seed, "d_pr")),
            "d_fr": build_discriminator(cfg, module_seed(seed, "d_fr")),
        }
        self.perceptual = build_perceptual(cfg).to(self.device)
        self.optimizers = {
            "generators": self.adam([self.modules["g_pr"], self.modules["g_fr"]]),
            "discriminators": self.adam([self.modules["d_pr"], self.modules["d_fr"]]),
        }

    def _weighted(self, weight: float, compute):
        # zero-weight terms are still logged but stay out of the graph
        if weight > 0:
            return compute()
        with torch.no_grad():
            return compute()

    def train_step(self, batch: PairBatch) -> LossBreakdown:
        g_pr, g_fr = self.modules["g_pr"], self.modules["g_fr"]
        d_pr, d_fr = self.modules["d_pr"], self.modules["d_fr"]
        w = self.weights
        zero_skips = self.config.model.zero_skips
        x_pr, x_fr, y = self.to_device(*batch.to_tensors())

        rec_pr, enc_pr = g_pr(x_pr, zero_skips=zero_skips)
        rec_fr, enc_fr = g_fr(x_fr, zero_skips=zero_skips)

        # (1) discriminators, generators frozen
        d_loss_pr = d_loss_fr = None
        if w.lambda1 > 0:
            before = self.checksum(["g_pr", "g_fr"])
            opt_d = self.optimizers["discriminators"]
            for _ in range(self.config.train.d_steps_per_g_step):
                # condition = input = ground truth
                d_pr_loss, _ = cgan_losses(d_pr(x_pr, x_pr), d_pr(x_pr, rec_pr.detach()))
                d_fr_loss, _ = cgan_losses(d_fr(x_fr, x_fr), d_fr(x_fr, rec_fr.detach()))
                d_total = d_pr_loss + d_fr_loss
                self.ensure_finite(d_total, "discriminator loss", batch)
                opt_d.zero_grad(set_to_none=True)
                d_total.backward()
                opt_d.step()
                d_loss_pr, d_loss_fr = scalar(d_pr_loss), scalar(d_fr_loss)
            self.verify_unchanged(["g_pr", "g_fr"], before, "discriminator")

        # (2) generators jointly, discriminators frozen
        before = self.checksum(["d_pr", "d_fr"])
        set_trainable([d_pr, d_fr], False)
        try:
            l_cont = contrastive_loss(enc_pr.embedding, enc_fr.embedding, y, w.margin_m).mean()
            l_cpl = coupling_loss(enc_pr.embedding, enc_fr.embedding, y, w.margin_m, w.coupling)
            l_pr = self._weighted(w.lambda1, lambda: generator_adversarial_loss(d_pr(x_pr, rec_pr)))
            l_fr = self._weighted(w.lambda1, lambda: generator_adversarial_loss(d_fr(x_fr, rec_fr)))
            l2_pr = self._weighted(w.lambda3, lambda: l2_reconstruction(rec_pr, x_pr))
            l2_fr = self._weighted(w.lambda3, lambda: l2_reconstruction(rec_fr, x_fr))
            with torch.no_grad():
                target_pr, target_fr = self.perceptual(x_pr), self.perceptual(x_fr)
            lp_pr = self._weighted(w.lambda2, lambda: perceptual_loss(self.perceptual(rec_pr), target_pr))
            lp_fr = self._weighted(w.lambda2, lambda: perceptual_loss(self.perceptual(rec_fr), target_fr))

            loss = l_cpl
            for weight, term in ((w.lambda1, l_pr + l_fr), (w.lambda2, lp_pr + lp_fr),
                                 (w.lambda3, l2_pr + l2_fr)):
                if weight > 0:
                    loss = loss + weight * term

            parts = dict(
                l_cont=scalar(l_cont), l_cpl=scalar(l_cpl),
                l_pr=scalar(l_pr), l_fr=scalar(l_fr), l_gan=scalar(l_pr) + scalar(l_fr),
                l2_pr=scalar(l2_pr), l2_fr=scalar(l2_fr), l_2=scalar(l2_pr) + scalar(l2_fr),
                lp_pr=scalar(lp_pr), lp_fr=scalar(lp_fr), l_p=scalar(lp_pr) + scalar(lp_fr),
            )
            breakdown = LossBreakdown(
                **parts,
                l_tot=float(objective(parts["l_cpl"], parts["l_gan"], parts["l_p"], parts["l_2"], w)),
                d_pr=d_loss_pr, d_fr=d_loss_fr,
                genuine_distance=genuine_distance(enc_pr.embedding, enc_fr.embedding, y),
            )
            self.ensure_finite(loss, "generator objective", batch, breakdown)

            opt_g = self.optimizers["generators"]
            opt_g.zero_grad(set_to_none=True)
            loss.backward()
            opt_g.step()
        finally:
            set_trainable([d_pr, d_fr], True)
        self.verify_unchanged(["d_pr", "d_fr"], before, "generator")
        return breakdown


def train_cpgan(manifest: DatasetManifest, config: RunConfig) -> Checkpoint:
    """Train the coupled cGAN for config.train.epochs epochs"""
    return CoupledGanTrainer(manifest, config).train(config.train.epochs)


def resume(checkpoint: Checkpoint, manifest: DatasetManifest, extra_epochs: int,
           config: Optional[RunConfig] = None, out_dir: Optional[Path] = None) -> Checkpoint:
    """Continue training with the restored optimizer, scheduler and sampler state.

    `config` is only compared against the checkpoint's architecture; training
    always continues with the configuration echoed into the checkpoint.
    """
    if config is not None:
        checkpoint.check_architecture(config.model.architecture())
    restored = config_from_dict(checkpoint.config)
    if out_dir is not None:
        restored.paths.out = str(out_dir)
    restored.validate()

    from .baselines import trainer_for  # baselines builds on this module
    trainer = trainer_for(checkpoint, manifest, restored)
    return trainer.train(extra_epochs)

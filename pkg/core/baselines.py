"""
Comparison learners: the coupled CNN (contrastive loss only) and the
two-stage adversarial domain adaptation model with coupled contrastive
regularisation. Both reuse the pair-training loop of the trainer module.
"""

from pathlib import Path
from typing import Dict, List, Optional

import torch

from .checkpoint import Checkpoint
from .config import RunConfig
from .console import get_logger, success
from .datamodel import DatasetManifest, Domain, PairBatch
from .errors import ConfigError, PipelineError, StageDependencyError
from .losses import LossBreakdown, adda_losses, classification_loss, contrastive_loss, coupling_loss
from .networks import (build_classifier, build_embedding_discriminator, build_encoder, parameter_checksum,
                       set_trainable)
from .trainer import (CoupledGanTrainer, PairTrainer, genuine_distance, module_seed, scalar,
                      train_cpgan)

logger = get_logger(__name__)


# ==========================================
#  COUPLED CNN
# ==========================================

class CoupledCnnTrainer(PairTrainer):
    """Two independent encoders tied only by the coupling loss"""

    model_kind = "cpcnn"

    def build(self) -> None:
        cfg, seed = self.config.model, self.config.train.seed
        # same seeds as the cGAN generators, so both learners start from one encoder init
        self.modules = {
            "enc_pr": build_encoder(cfg, module_seed(seed, "g_pr")),
            "enc_fr": build_encoder(cfg, module_seed(seed, "g_fr")),
        }
        self.optimizers = {"encoders": self.adam(list(self.modules.values()))}

    def train_step(self, batch: PairBatch) -> LossBreakdown:
        x_pr, x_fr, y = self.to_device(*batch.to_tensors())
        z_pr = self.modules["enc_pr"](x_pr).embedding
        z_fr = self.modules["enc_fr"](x_fr).embedding
        w = self.weights
        l_cpl = coupling_loss(z_pr, z_fr, y, w.margin_m, w.coupling)
        l_cont = contrastive_loss(z_pr, z_fr, y, w.margin_m).mean()
        breakdown = LossBreakdown(l_cont=scalar(l_cont), l_cpl=scalar(l_cpl), l_tot=scalar(l_cpl),
                                  genuine_distance=genuine_distance(z_pr, z_fr, y))
        self.ensure_finite(l_cpl, "coupling loss", batch, breakdown)
        opt = self.optimizers["encoders"]
        opt.zero_grad(set_to_none=True)
        l_cpl.backward()
        opt.step()
        return breakdown


def train_cpcnn(manifest: DatasetManifest, config: RunConfig) -> Checkpoint:
    trainer = CoupledCnnTrainer(manifest, config)
    discriminator_or_decoder = [n for n in trainer.modules if not n.startswith("enc_")]
    if discriminator_or_decoder:
        raise PipelineError(f"coupled CNN must own encoders only, found {discriminator_or_decoder}")
    return trainer.train(config.train.epochs)


# ==========================================
#  ADVERSARIAL DOMAIN ADAPTATION
# ==========================================

class FrontalBatch:
    """Stage-1 batch: frontal images with class indices"""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, paths: List[str]):
        self.images = images
        self.labels = labels
        self.pairs = []  # no pairs; keeps the non-finite snapshot uniform
        self.paths = paths


class AddaTrainer(PairTrainer):
    """Stage 1 pretrains the frontal encoder and classifier; stage 2 adapts the profile encoder.

    The frontal (source) encoder and the classifier are bit-frozen in stage 2,
    and their outputs enter the stage-2 losses as constants.
    """

    model_kind = "adda"
    FROZEN = ("enc_fr", "classifier")

    def __init__(self, manifest: DatasetManifest, config: RunConfig, stage: str,
                 checkpoint: Optional[Checkpoint] = None, source: Optional[Checkpoint] = None):
        if stage not in ("1", "2"):
            raise ConfigError("must be '1' or '2'", field="stage")
        self.stage = stage
        self.source = source
        self.frozen_checksum: Optional[str] = None
        self.class_of: Dict[int, int] = {}
        super().__init__(manifest, config, checkpoint)
        if stage == "2":
            set_trainable([self.modules[n] for n in self.FROZEN], False)
            self.frozen_checksum = parameter_checksum([self.modules[n] for n in self.FROZEN])

    # -- construction --------------------------------------------------
    def build(self) -> None:
        cfg, seed = self.config.model, self.config.train.seed
        self.class_of = {identity: k for k, identity in enumerate(self.manifest.identities(self.train_folds))}
        self.num_classes = len(self.class_of)
        self.modules = {
            "enc_fr": build_encoder(cfg, module_seed(seed, "g_fr")),
            "classifier": build_classifier(cfg, self.num_classes, module_seed(seed, "classifier")),
        }
        if self.stage == "1":
            self.optimizers = {"stage1": self.adam([self.modules["enc_fr"], self.modules["classifier"]])}
            return

        if self.source is not None:
            if self.source.num_classes != self.num_classes:
                raise ConfigError(
                    f"stage-1 checkpoint has {self.source.num_classes} classes, "
                    f"training folds hold {self.num_classes}", field="stage1_checkpoint")
            self.source.check_architecture(cfg.architecture())
            self.source.load_into("enc_fr", self.modules["enc_fr"])
            self.source.load_into("classifier", self.modules["classifier"])
        # the target encoder starts from the source encoder weights
        enc_pr = build_encoder(cfg, module_seed(seed, "g_pr"))
        enc_pr.load_state_dict(self.modules["enc_fr"].state_dict())
        self.modules["enc_pr"] = enc_pr
        self.modules["embed_disc"] = build_embedding_discriminator(cfg, module_seed(seed, "embed_disc"))
        self.optimizers = {
            "enc_pr": self.adam([enc_pr]),
            "embed_disc": self.adam([self.modules["embed_disc"]]),
        }

    def rng_seed(self):
        return [self.config.train.seed, int(self.stage)]

    def snapshot_extra(self) -> Dict:
        return {"stage": self.stage, "num_classes": self.num_classes,
                "extra": {"classes": [int(i) for i in self.class_of]}}

    def restore(self, checkpoint: Checkpoint) -> None:
        if checkpoint.stage != self.stage:
            raise ConfigError(f"checkpoint is from stage {checkpoint.stage}, not {self.stage}", field="stage")
        super().restore(checkpoint)

    def label(self) -> str:
        return f"adda stage {self.stage}"

    def log_name(self) -> str:
        return f"train_log_stage{self.stage}.csv"

    def checkpoint_stem(self) -> str:
        return "stage1" if self.stage == "1" else "checkpoint"

    def log_keys(self):
        if self.stage == "1":
            return ("l_cls", "accuracy")
        return ("l_adv_d", "l_adv_g", "l_cont", "genuine_distance")

    # -- batches -------------------------------------------------------
    def next_batch(self):
        if self.stage == "2":
            return super().next_batch()
        frontals = self.manifest.select(self.train_folds, Domain.FRONTAL)
        picks = self.rng.integers(len(frontals), size=self.config.train.batch_size)
        entries = [frontals[int(i)] for i in picks]
        labels = torch.tensor([self.class_of[e.identity] for e in entries], dtype=torch.long)
        return FrontalBatch(self.manifest.tensor(entries), labels, [e.path for e in entries])

    def steps_per_epoch(self) -> int:
        if self.stage == "2" or self.config.train.steps_per_epoch:
            return super().steps_per_epoch()
        frontals = len(self.manifest.select(self.train_folds, Domain.FRONTAL))
        return max(1, -(-frontals // self.config.train.batch_size))

    # -- steps ---------------------------------------------------------
    def train_step(self, batch) -> LossBreakdown:
        if self.stage == "1":
            return self._classification_step(batch)
        return self._adaptation_step(batch)

    def _classification_step(self, batch: FrontalBatch) -> LossBreakdown:
        images, labels = self.to_device(batch.images, batch.labels)
        z = self.modules["enc_fr"](images).embedding
        probs = self.modules["classifier"](z)
        l_cls = classification_loss(probs, labels)
        accuracy = scalar((probs.argmax(dim=1) == labels).float().mean())
        breakdown = LossBreakdown(l_tot=scalar(l_cls), l_cls=scalar(l_cls), accuracy=accuracy)
        self.ensure_finite(l_cls, "classification loss", batch, breakdown)
        opt = self.optimizers["stage1"]
        opt.zero_grad(set_to_none=True)
        l_cls.backward()
        opt.step()
        return breakdown

    def _adaptation_step(self, batch: PairBatch) -> LossBreakdown:
        enc_pr, enc_fr = self.modules["enc_pr"], self.modules["enc_fr"]
        classifier, disc = self.modules["classifier"], self.modules["embed_disc"]
        x_pr, x_fr, y = self.to_device(*batch.to_tensors())
        labels = torch.tensor([self.class_of.get(p.frontal.identity, 0) for p in batch.pairs],
                              dtype=torch.long, device=self.device)
        margin = self.weights.margin_m

        with torch.no_grad():
            z_fr = enc_fr(x_fr).embedding
            probs = classifier(z_fr)
        z_pr = enc_pr(x_pr).embedding

        # discriminator: frontal = 1, profile = 0
        d_terms = adda_losses(z_fr, z_pr.detach(), labels, disc(z_fr), disc(z_pr.detach()),
                              probs, y, margin)
        self.ensure_finite(d_terms.l_adv_d, "embedding discriminator loss", batch)
        opt_d = self.optimizers["embed_disc"]
        opt_d.zero_grad(set_to_none=True)
        d_terms.l_adv_d.backward()
        opt_d.step()

        # profile encoder: inverted labels plus the contrastive term, weight 1
        set_trainable([disc], False)
        try:
            terms = adda_losses(z_fr, z_pr, labels, disc(z_fr), disc(z_pr), probs, y, margin)
            loss = terms.l_adv_g + terms.l_cont
            breakdown = LossBreakdown(
                l_cont=scalar(terms.l_cont), l_cpl=scalar(terms.l_cont), l_tot=scalar(loss),
                l_cls=scalar(terms.l_cls), l_adv_d=scalar(d_terms.l_adv_d), l_adv_g=scalar(terms.l_adv_g),
                genuine_distance=genuine_distance(z_pr, z_fr, y),
            )
            self.ensure_finite(loss, "profile encoder objective", batch, breakdown)
            opt = self.optimizers["enc_pr"]
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        finally:
            set_trainable([disc], True)

        if self.config.train.verify_phases:
            self.verify_frozen()
        return breakdown

    def verify_frozen(self) -> None:
        if self.frozen_checksum is None:
            return
        now = parameter_checksum([self.modules[n] for n in self.FROZEN])
        if now != self.frozen_checksum:
            raise PipelineError("stage 2 mutated the frozen frontal encoder or classifier")

    def end_of_epoch(self) -> None:
        self.verify_frozen()

    def train_accuracy(self) -> float:
        """Classification accuracy of the frontal encoder over every training frontal"""
        entries = self.manifest.select(self.train_folds, Domain.FRONTAL)
        enc_fr, classifier = self.modules["enc_fr"], self.modules["classifier"]
        correct = 0
        with torch.no_grad():
            for start in range(0, len(entries), 64):
                chunk = entries[start:start + 64]
                images = self.manifest.tensor(chunk).to(self.device)
                predicted = classifier(enc_fr(images).embedding).argmax(dim=1).cpu()
                truth = torch.tensor([self.class_of[e.identity] for e in chunk])
                correct += int((predicted == truth).sum())
        return correct / max(1, len(entries))

    def train(self, epochs: int) -> Checkpoint:
        checkpoint = super().train(epochs)
        if self.stage == "1":
            accuracy = self.train_accuracy()
            checkpoint.extra["stage1_train_accuracy"] = accuracy
            checkpoint.save(self.out_dir / f"{self.checkpoint_stem()}.pfck")
            success(logger, "adda stage 1 train accuracy %.3f over %d classes", accuracy, self.num_classes)
        else:
            checkpoint.extra["frozen_checksum"] = self.frozen_checksum
            if self.source is not None:
                checkpoint.extra["stage1_train_accuracy"] = self.source.extra.get("stage1_train_accuracy")
            checkpoint.save(self.out_dir / f"{self.checkpoint_stem()}.pfck")
        return checkpoint


def _stage1_epochs(config: RunConfig) -> int:
    return config.train.adda_stage1_epochs or config.train.epochs


def load_stage1(config: RunConfig) -> Checkpoint:
    path = config.paths.stage1_checkpoint
    if not path or not Path(path).is_file():
        raise StageDependencyError(
            "stage 2 needs a stage-1 checkpoint (--stage1-checkpoint)", field="stage1_checkpoint")
    source = Checkpoint.load(Path(path))
    if source.model != "adda" or source.stage != "1":
        raise StageDependencyError(f"{path} is not an ADDA stage-1 checkpoint", field="stage1_checkpoint")
    return source


def train_adda(manifest: DatasetManifest, config: RunConfig) -> Checkpoint:
    """Run stage 1, stage 2 or both according to config.run.stage (default both)"""
    stage = config.run.stage or "both"
    if stage == "2":
        source = load_stage1(config)
        return AddaTrainer(manifest, config, "2", source=source).train(config.train.epochs)

    source = AddaTrainer(manifest, config, "1").train(_stage1_epochs(config))
    if stage == "1":
        return source
    return AddaTrainer(manifest, config, "2", source=source).train(config.train.epochs)


# ==========================================
#  DISPATCH
# ==========================================

def train_model(manifest: DatasetManifest, config: RunConfig) -> Checkpoint:
    """Train whichever learner config.run.model selects"""
    kind = config.run.model
    if kind == "cpgan":
        return train_cpgan(manifest, config)
    if kind == "cpcnn":
        return train_cpcnn(manifest, config)
    if kind == "adda":
        return train_adda(manifest, config)
    raise ConfigError(f"unknown model {kind}", field="model")


def trainer_for(checkpoint: Checkpoint, manifest: DatasetManifest, config: RunConfig) -> PairTrainer:
    """A trainer restored from `checkpoint`, ready to continue"""
    if checkpoint.model == "cpgan":
        return CoupledGanTrainer(manifest, config, checkpoint)
    if checkpoint.model == "cpcnn":
        return CoupledCnnTrainer(manifest, config, checkpoint)
    if checkpoint.model == "adda":
        return AddaTrainer(manifest, config, checkpoint.stage or "1", checkpoint)
    raise ConfigError(f"unknown model {checkpoint.model}", field="model")


def parameter_census(checkpoint: Checkpoint) -> Dict[str, int]:
    """Scalar count per module stored in a checkpoint"""
    return {name: int(sum(t.numel() for t in state.values())) for name, state in checkpoint.modules.items()}

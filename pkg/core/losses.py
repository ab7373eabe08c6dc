"""
Scalar objectives of the coupled cGAN and the domain-adaptation baseline,
plus a finite-difference gradient checker.

All losses are pure functions of tensors and average over the batch, so
they are invariant to batch order.
"""

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LossInputError, ShapeMismatchError

PROB_EPS = 1e-7
Number = Union[float, torch.Tensor]

# ==========================================
#  WEIGHTS AND BREAKDOWN
# ==========================================

COUPLING_KINDS = ("contrastive", "euclidean")


@dataclass
class LossWeights:
    """lambda1: GAN, lambda2: perceptual, lambda3: L2; margin for the contrastive hinge"""
    lambda1: float = 1.0
    lambda2: float = 0.25
    lambda3: float = 0.25
    margin_m: float = 1.0
    coupling: str = "contrastive"

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError("must be finite and >= 0", field=name)
        if not math.isfinite(self.margin_m) or self.margin_m <= 0:
            raise ConfigError("must be finite and > 0", field="margin_m")
        if self.coupling not in COUPLING_KINDS:
            raise ConfigError(f"must be one of {COUPLING_KINDS}", field="coupling")


ABLATION_VARIANTS = ("cpl+l2", "cpl+l2+gan", "full")


def ablation_weights(base: LossWeights, variant: str) -> LossWeights:
    """Loss weights for one ablation variant; terms outside the variant get weight 0"""
    if variant == "cpl+l2":
        return replace(base, lambda1=0.0, lambda2=0.0)
    if variant == "cpl+l2+gan":
        return replace(base, lambda2=0.0)
    if variant == "full":
        return replace(base)
    raise ConfigError(f"must be one of {ABLATION_VARIANTS}", field="ablation")


@dataclass
class LossBreakdown:
    """Every named scalar of one training step"""
    l_cont: float = 0.0
    l_cpl: float = 0.0
    l_pr: float = 0.0
    l_fr: float = 0.0
    l_gan: float = 0.0
    l2_pr: float = 0.0
    l2_fr: float = 0.0
    l_2: float = 0.0
    lp_pr: float = 0.0
    lp_fr: float = 0.0
    l_p: float = 0.0
    l_tot: float = 0.0
    d_pr: Optional[float] = None
    d_fr: Optional[float] = None
    l_cls: Optional[float] = None
    l_adv_d: Optional[float] = None
    l_adv_g: Optional[float] = None
    accuracy: Optional[float] = None
    genuine_distance: Optional[float] = None

    def recombination_error(self, weights: LossWeights) -> float:
        """Relative gap between l_tot and its weighted recombination"""
        expected = objective(self.l_cpl, self.l_gan, self.l_p, self.l_2, weights)
        return abs(self.l_tot - expected) / max(abs(expected), 1e-12)

    def is_finite(self) -> bool:
        return all(v is None or math.isfinite(v) for v in asdict(self).values())

    def to_row(self) -> Dict[str, Optional[float]]:
        return asdict(self)

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]


# ==========================================
#  COUPLING
# ==========================================

def _check_pair_inputs(z1: torch.Tensor, z2: torch.Tensor, y: torch.Tensor) -> None:
    if z1.shape != z2.shape:
        raise ShapeMismatchError(f"embedding shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    if y.shape != z1.shape[:-1]:
        raise ShapeMismatchError(f"labels of shape {tuple(y.shape)} do not match {tuple(z1.shape[:-1])}")
    if not torch.all((y == 0) | (y == 1)):
        raise LossInputError("Y must be binary (0 genuine, 1 impostor)")


def contrastive_loss(z1: torch.Tensor, z2: torch.Tensor, y: Union[torch.Tensor, int],
                     margin: float = 1.0) -> torch.Tensor:
    """(1-Y)/2 * D^2 + Y/2 * max(0, m - D)^2, per pair (leading dims kept)"""
    y = torch.as_tensor(y, dtype=z1.dtype, device=z1.device)
    _check_pair_inputs(z1, z2, y)
    diff = z1 - z2
    squared = (diff * diff).sum(dim=-1)
    distance = torch.linalg.vector_norm(diff, dim=-1)
    hinge = torch.clamp(margin - distance, min=0.0)
    return (1 - y) * 0.5 * squared + y * 0.5 * hinge * hinge


def coupling_loss(z1: torch.Tensor, z2: torch.Tensor, y: torch.Tensor, margin: float = 1.0,
                  kind: str = "contrastive") -> torch.Tensor:
    """Mean contrastive loss over the sampled pairs"""
    if z1.dim() != 2 or z1.shape[0] == 0:
        raise LossInputError("coupling_loss needs a non-empty N x D batch")
    if kind == "euclidean":
        y = torch.as_tensor(y, dtype=z1.dtype)
        _check_pair_inputs(z1, z2, y)
        genuine = (1 - y) * 0.5 * ((z1 - z2) ** 2).sum(dim=-1)
        return genuine.mean()
    return contrastive_loss(z1, z2, y, margin).mean()


# ==========================================
#  ADVERSARIAL
# ==========================================

def _log_prob(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, PROB_EPS, 1 - PROB_EPS))


def cgan_losses(real_grid: torch.Tensor, fake_grid: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(d_loss, g_loss); the generator side is the non-saturating -log D(fake)"""
    if real_grid.shape != fake_grid.shape:
        raise ShapeMismatchError(
            f"patch grids differ: {tuple(real_grid.shape)} vs {tuple(fake_grid.shape)}"
        )
    d_loss = -_log_prob(real_grid).mean() - _log_prob(1 - fake_grid).mean()
    return d_loss, generator_adversarial_loss(fake_grid)


def generator_adversarial_loss(fake_grid: torch.Tensor) -> torch.Tensor:
    return -_log_prob(fake_grid).mean()


# ==========================================
#  RECONSTRUCTION
# ==========================================

def l2_reconstruction(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-element mean squared error"""
    if recon.shape != target.shape:
        raise ShapeMismatchError(f"shapes differ: {tuple(recon.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(recon, target)


def perceptual_loss(feat_recon: torch.Tensor, feat_target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all C_p * W_p * H_p feature elements"""
    if feat_recon.shape != feat_target.shape:
        raise ShapeMismatchError(
            f"feature shapes differ: {tuple(feat_recon.shape)} vs {tuple(feat_target.shape)}"
        )
    return F.l1_loss(feat_recon, feat_target)


# ==========================================
#  TOTAL OBJECTIVE
# ==========================================

def objective(l_cpl: Number, l_gan: Number, l_p: Number, l_2: Number,
              weights: LossWeights) -> Number:
    return l_cpl + weights.lambda1 * l_gan + weights.lambda2 * l_p + weights.lambda3 * l_2


def total_loss(parts: LossBreakdown, weights: LossWeights) -> float:
    terms = {"l_cpl": parts.l_cpl, "l_gan": parts.l_gan, "l_p": parts.l_p, "l_2": parts.l_2}
    for name, value in terms.items():
        if not math.isfinite(value):
            raise LossInputError(f"{name} is not finite ({value})")
    return float(objective(parts.l_cpl, parts.l_gan, parts.l_p, parts.l_2, weights))


# ==========================================
#  DOMAIN ADAPTATION
# ==========================================

class AddaLosses(NamedTuple):
    l_cls: torch.Tensor
    l_adv_d: torch.Tensor
    l_adv_g: torch.Tensor
    l_cont: torch.Tensor


def classification_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the true-class probability"""
    if probs.dim() != 2 or labels.shape != probs.shape[:1]:
        raise ShapeMismatchError("classifier_probs must be N x K with N labels")
    num_classes = probs.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LossInputError(f"label out of [0, {num_classes})")
    picked = probs.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return -_log_prob(picked).mean()


def adda_losses(frontal_embeddings: torch.Tensor, profile_embeddings: torch.Tensor,
                labels: torch.Tensor, disc_frontal: torch.Tensor, disc_profile: torch.Tensor,
                classifier_probs: torch.Tensor, pair_labels: torch.Tensor,
                margin: float = 1.0) -> AddaLosses:
    """Classification, discriminator, inverted-label encoder and contrastive terms"""
    l_cls = classification_loss(classifier_probs, labels)
    l_adv_d = -_log_prob(disc_frontal).mean() - _log_prob(1 - disc_profile).mean()
    l_adv_g = -_log_prob(disc_profile).mean()
    l_cont = coupling_loss(profile_embeddings, frontal_embeddings, pair_labels, margin)
    return AddaLosses(l_cls, l_adv_d, l_adv_g, l_cont)


# ==========================================
#  GRADIENT CHECK
# ==========================================

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    num_scalars: int
    tolerance: float
    nudges: int = 0
    passed: bool = False
    worst: Optional[Tuple[int, int]] = None  # (parameter index, flat element)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<22} max_rel_err={self.max_rel_error:.3e} "
                f"scalars={self.num_scalars} nudges={self.nudges}")


def _flat_views(params: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    return [p.data.view(-1) for p in params]


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               tolerance: float = 1e-4, step: float = 1e-4, name: str = "loss",
               max_nudges: int = 5, nudge_scale: float = 1e-2, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd with central differences on float64 leaf tensors.

    When the left and right one-sided differences disagree the point sits on
    a kink (hinge, clamp); all parameters are nudged by seeded noise and the
    check restarts. The relative error denominator is max(|a|, |n|, floor).
    """
    for p in params:
        if p.dtype != torch.float64 or not p.requires_grad:
            raise LossInputError("grad_check needs float64 leaf tensors with requires_grad")
    num_scalars = sum(p.numel() for p in params)
    generator = torch.Generator().manual_seed(seed)
    report = GradCheckReport(name=name, max_rel_error=math.inf,
                             num_scalars=num_scalars, tolerance=tolerance)

    for attempt in range(max_nudges + 1):
        analytic = torch.autograd.grad(loss_fn(), list(params), allow_unused=True)
        analytic = [torch.zeros_like(p) if g is None else g for g, p in zip(analytic, params)]
        worst, worst_at, kinked = 0.0, None, False
        with torch.no_grad():
            base = float(loss_fn())
            for pi, flat in enumerate(_flat_views(params)):
                grad_flat = analytic[pi].reshape(-1)
                for k in range(flat.numel()):
                    original = float(flat[k])
                    flat[k] = original + step
                    plus = float(loss_fn())
                    flat[k] = original - step
                    minus = float(loss_fn())
                    flat[k] = original
                    right, left = (plus - base) / step, (base - minus) / step
                    if abs(right - left) > 1e-2 * (abs(right) + abs(left)) + 1e-3:
                        kinked = True
                        break
                    numeric = (plus - minus) / (2 * step)
                    a = float(grad_flat[k])
                    rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                    if rel > worst:
                        worst, worst_at = rel, (pi, k)
                if kinked:
                    break
        if not kinked:
            report.max_rel_error = worst
            report.worst = worst_at
            report.nudges = attempt
            report.passed = worst < tolerance
            return report
        with torch.no_grad():
            for p in params:
                p.add_(nudge_scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))

    report.nudges = max_nudges
    return report


def builtin_gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> List[GradCheckReport]:
    """Gradient checks over tiny float64 networks for every differentiable objective"""
    g = torch.Generator().manual_seed(seed)

    def leaf(*shape, scale=1.0):
        return (scale * torch.randn(*shape, generator=g, dtype=torch.float64)).requires_grad_(True)

    reports = []

    z1, z2 = leaf(6, 4), leaf(6, 4)
    y = torch.tensor([0, 1, 0, 1, 0, 1], dtype=torch.float64)
    reports.append(grad_check(lambda: coupling_loss(z1, z2, y, margin=5.0), [z1, z2],
                              tolerance, name="contrastive"))

    recon, target = leaf(2, 3, 4, 4), torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    reports.append(grad_check(lambda: l2_reconstruction(recon, target), [recon],
                              tolerance, name="l2_reconstruction"))

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        feature_net = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.Tanh()).double()
    images = torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64)
    targets = torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64)
    conv_params = [p.requires_grad_(True) for p in feature_net.parameters()]
    reports.append(grad_check(lambda: perceptual_loss(feature_net(images), feature_net(targets)),
                              conv_params, tolerance, name="perceptual"))

    real_logits, fake_logits = leaf(2, 1, 3, 3), leaf(2, 1, 3, 3)
    reports.append(grad_check(
        lambda: sum(cgan_losses(torch.sigmoid(real_logits), torch.sigmoid(fake_logits))),
        [real_logits, fake_logits], tolerance, name="cgan"))

    weight, bias = leaf(5, 8, scale=0.3), leaf(5, scale=0.1)
    feats = torch.randn(7, 8, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 5, (7,), generator=g)
    reports.append(grad_check(
        lambda: classification_loss(torch.softmax(feats @ weight.T + bias, dim=-1), labels),
        [weight, bias], tolerance, name="classifier"))

    # composed objective through two tiny coupled linear autoencoders
    enc_pr, enc_fr = leaf(4, 12, scale=0.3), leaf(4, 12, scale=0.3)
    dec_pr, dec_fr = leaf(12, 4, scale=0.3), leaf(12, 4, scale=0.3)
    disc = leaf(12, scale=0.3)
    x_pr = torch.randn(6, 12, generator=g, dtype=torch.float64)
    x_fr = torch.randn(6, 12, generator=g, dtype=torch.float64)
    weights = LossWeights(margin_m=4.0)

    def composed():
        zp, zf = x_pr @ enc_pr.T, x_fr @ enc_fr.T
        rp, rf = torch.tanh(zp @ dec_pr.T), torch.tanh(zf @ dec_fr.T)
        l_cpl = coupling_loss(zp, zf, y, weights.margin_m)
        l_gan = (generator_adversarial_loss(torch.sigmoid(rp @ disc))
                 + generator_adversarial_loss(torch.sigmoid(rf @ disc)))
        l_p = perceptual_loss(torch.tanh(rp), torch.tanh(x_pr)) + perceptual_loss(torch.tanh(rf), torch.tanh(x_fr))
        l_2 = l2_reconstruction(rp, x_pr) + l2_reconstruction(rf, x_fr)
        return objective(l_cpl, l_gan, l_p, l_2, weights)

    reports.append(grad_check(composed, [enc_pr, enc_fr, dec_pr, dec_fr, disc],
                              tolerance, name="total_objective"))
    return reports

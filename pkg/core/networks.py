"""
Network modules: residual U-Net generators with a vector bottleneck, patch
discriminators, the frozen perceptual feature network, the identity
classifier and the embedding-space domain discriminator.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .console import get_logger
from .errors import ConfigError, ShapeMismatchError

logger = get_logger(__name__)

LEAKY_SLOPE = 0.3

# (output width, stride, blocks) per residual stage
ENCODER_VARIANTS = {
    "compact": [(64, 2, 1), (128, 2, 1), (256, 2, 1)],
    "resnet18": [(32, 1, 2), (64, 2, 2), (128, 2, 2), (256, 2, 2)],
}
STEM_WIDTH = 32


def _norm(channels: int) -> nn.GroupNorm:
    # per-sample normalisation keeps every forward a pure function of its input
    return nn.GroupNorm(min(8, channels), channels)


def _check_images(x: torch.Tensor, config: ModelConfig, what: str = "image") -> None:
    expected = (config.channels, config.image_size, config.image_size)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeMismatchError(f"{what} batch must be N x {expected}, got {tuple(x.shape)}")


@dataclass
class EmbeddingOutput:
    """Encoder output: bottleneck vector plus the per-stage skip activations"""
    embedding: torch.Tensor           # N x embedding_dim (z1 or z2)
    skips: List[torch.Tensor]         # stage inputs, finest first
    bottleneck_spatial: torch.Tensor  # pre-pool activation


# ==========================================
#  ENCODER / DECODER
# ==========================================

class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class UNetEncoder(nn.Module):
    """Residual encoder; average pool and an extra FC layer give the embedding"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.encoder_variant not in ENCODER_VARIANTS:
            raise ConfigError(f"unknown variant {config.encoder_variant}", field="encoder_variant")
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(config.channels, STEM_WIDTH, 3, padding=1, bias=False),
            _norm(STEM_WIDTH), nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = STEM_WIDTH
        for width, stride, blocks in ENCODER_VARIANTS[config.encoder_variant]:
            layers = [ResidualBlock(in_ch, width, stride)]
            layers += [ResidualBlock(width, width) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            in_ch = width
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(in_ch, config.embedding_dim)

    def forward(self, x: torch.Tensor) -> EmbeddingOutput:
        _check_images(x, self.config)
        skips = []
        h = self.stem(x)
        for stage in self.stages:
            skips.append(h)
            h = stage(h)
        pooled = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return EmbeddingOutput(embedding=self.fc(pooled), skips=skips, bottleneck_spatial=h)


class UNetDecoder(nn.Module):
    """Mirror of the encoder: the embedding is projected back to the bottleneck grid"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        plan = ENCODER_VARIANTS[config.encoder_variant]
        total_stride = 1
        for _, stride, _ in plan:
            total_stride *= stride
        self.grid = config.image_size // total_stride
        self.bottleneck_ch = plan[-1][0]
        self.project = nn.Linear(config.embedding_dim, self.bottleneck_ch * self.grid * self.grid)

        skip_widths = [STEM_WIDTH] + [w for w, _, _ in plan[:-1]]
        self.strides = [s for _, s, _ in plan]
        self.skip_widths = skip_widths
        blocks = []
        for (width, _, _), skip_ch in zip(reversed(plan), reversed(skip_widths)):
            blocks.append(nn.Sequential(
                nn.Conv2d(width + skip_ch, skip_ch, 3, padding=1, bias=False),
                _norm(skip_ch), nn.ReLU(inplace=True),
            ))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(STEM_WIDTH, config.channels, 3, padding=1)

    def forward(self, enc: EmbeddingOutput, zero_skips: bool = False) -> torch.Tensor:
        z = enc.embedding
        if z.dim() != 2 or z.shape[1] != self.config.embedding_dim:
            raise ShapeMismatchError(
                f"embedding must be N x {self.config.embedding_dim}, got {tuple(z.shape)}"
            )
        if len(enc.skips) != len(self.blocks):
            raise ShapeMismatchError(f"expected {len(self.blocks)} skips, got {len(enc.skips)}")

        h = self.project(z).view(z.shape[0], self.bottleneck_ch, self.grid, self.grid)
        h = F.relu(h)
        for block, stride, skip, skip_ch in zip(
            self.blocks, reversed(self.strides), reversed(enc.skips), reversed(self.skip_widths)
        ):
            if stride > 1:
                h = F.interpolate(h, scale_factor=stride, mode="nearest")
            if skip.shape[0] != h.shape[0] or skip.shape[1] != skip_ch or skip.shape[2:] != h.shape[2:]:
                raise ShapeMismatchError(
                    f"skip of shape {tuple(skip.shape)} does not fit decoder stage {tuple(h.shape)}"
                )
            if zero_skips:
                skip = torch.zeros_like(skip)
            h = block(torch.cat([h, skip], dim=1))
        return torch.tanh(self.head(h))


class UNetGenerator(nn.Module):
    """Deterministic conditional generator G(x); the encoder is built first"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = UNetEncoder(config)
        self.decoder = UNetDecoder(config)

    def encode(self, x: torch.Tensor) -> EmbeddingOutput:
        return self.encoder(x)

    def decode(self, enc: EmbeddingOutput, zero_skips: bool = False) -> torch.Tensor:
        return self.decoder(enc, zero_skips=zero_skips)

    def forward(self, x: torch.Tensor, zero_skips: bool = False) -> Tuple[torch.Tensor, EmbeddingOutput]:
        enc = self.encode(x)
        return self.decode(enc, zero_skips=zero_skips), enc


# ==========================================
#  DISCRIMINATORS
# ==========================================

class PatchDiscriminator(nn.Module):
    """D(y|x): condition and candidate are concatenated channel-wise"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels * 2
        self.net = nn.Sequential(
            nn.Conv2d(c, 64, 4, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Conv2d(64, 128, 4, stride=2, padding=1, bias=False), _norm(128),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Conv2d(128, 256, 4, stride=2, padding=1, bias=False), _norm(256),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Conv2d(256, 256, 3, stride=1, padding=1, bias=False), _norm(256),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Conv2d(256, 1, 3, stride=1, padding=1),
        )

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        _check_images(condition, self.config, "condition")
        _check_images(candidate, self.config, "candidate")
        if condition.shape[0] != candidate.shape[0]:
            raise ShapeMismatchError("condition and candidate batch sizes differ")
        return torch.sigmoid(self.net(torch.cat([condition, candidate], dim=1)))

    @staticmethod
    def grid_size(image_size: int) -> int:
        return image_size // 8


class EmbeddingDiscriminator(nn.Module):
    """Domain discriminator over embeddings: 1 = frontal (source), 0 = profile"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.net = nn.Sequential(
            nn.Linear(config.embedding_dim, 128), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(128, 64), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(64, 1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.config.embedding_dim:
            raise ShapeMismatchError(f"embedding must be N x {self.config.embedding_dim}")
        return torch.sigmoid(self.net(z)).squeeze(1)


class Classifier(nn.Module):
    """Linear K-way identity head"""

    def __init__(self, embedding_dim: int, num_classes: int):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.num_classes = num_classes
        self.linear = nn.Linear(embedding_dim, num_classes)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.embedding_dim:
            raise ShapeMismatchError(
                f"embedding length {z.shape[-1]} != classifier input {self.embedding_dim}"
            )
        return self.linear(z)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(z), dim=-1)


# ==========================================
#  PERCEPTUAL FEATURES
# ==========================================

class PerceptualNet(nn.Module):
    """Frozen six-conv feature extractor; the tap is the last ReLU (64 x H/4 x W/4)"""

    TAP_CHANNELS = 64

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.features = nn.Sequential(
            nn.Conv2d(c, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(),
            nn.Conv2d(64, self.TAP_CHANNELS, 3, padding=1), nn.ReLU(),
        )
        self.freeze()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "PerceptualNet":
        # never leaves eval mode
        return super().train(False)

    def load_pretrained(self, path: Path) -> None:
        state = torch.load(path, map_location="cpu")
        self.features.load_state_dict(state)
        self.freeze()
        logger.info("Loaded perceptual weights from %s", path)

    def tap_shape(self) -> Tuple[int, int, int]:
        return (self.TAP_CHANNELS, self.config.image_size // 4, self.config.image_size // 4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self.config)
        return self.features(x)


# ==========================================
#  SEEDED CONSTRUCTION
# ==========================================

def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_generator(config: ModelConfig, seed: int) -> UNetGenerator:
    return _seeded(seed, lambda: UNetGenerator(config))


def build_encoder(config: ModelConfig, seed: int) -> UNetEncoder:
    """Same initial weights as build_generator(config, seed).encoder"""
    return _seeded(seed, lambda: UNetEncoder(config))


def build_discriminator(config: ModelConfig, seed: int) -> PatchDiscriminator:
    return _seeded(seed, lambda: PatchDiscriminator(config))


def build_embedding_discriminator(config: ModelConfig, seed: int) -> EmbeddingDiscriminator:
    return _seeded(seed, lambda: EmbeddingDiscriminator(config))


def build_classifier(config: ModelConfig, num_classes: int, seed: int) -> Classifier:
    return _seeded(seed, lambda: Classifier(config.embedding_dim, num_classes))


def build_perceptual(config: ModelConfig) -> PerceptualNet:
    net = _seeded(config.perceptual_seed, lambda: PerceptualNet(config))
    if config.perceptual_weights:
        net.load_pretrained(Path(config.perceptual_weights))
    return net


# ==========================================
#  FUNCTIONAL VIEW
# ==========================================

def generator_forward(generator: UNetGenerator, images: torch.Tensor,
                      zero_skips: bool = False) -> Tuple[torch.Tensor, EmbeddingOutput]:
    return generator(images, zero_skips=zero_skips)


def encode(generator: UNetGenerator, images: torch.Tensor) -> EmbeddingOutput:
    return generator.encode(images)


def decode(generator: UNetGenerator, enc: EmbeddingOutput, zero_skips: bool = False) -> torch.Tensor:
    return generator.decode(enc, zero_skips=zero_skips)


def discriminator_forward(discriminator: PatchDiscriminator, condition: torch.Tensor,
                          candidate: torch.Tensor) -> torch.Tensor:
    return discriminator(condition, candidate)


def perceptual_features(net: PerceptualNet, images: torch.Tensor) -> torch.Tensor:
    return net(images)


def classify(classifier: Classifier, embedding: torch.Tensor) -> torch.Tensor:
    return classifier(embedding)


def set_trainable(modules: Iterable[nn.Module], trainable: bool) -> None:
    for module in modules:
        for p in module.parameters():
            p.requires_grad_(trainable)


def parameter_checksum(modules: Sequence[nn.Module]) -> str:
    """SHA-256 over every parameter's raw bytes"""
    digest = hashlib.sha256()
    for module in modules:
        for name, p in module.state_dict().items():
            digest.update(name.encode())
            digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def count_parameters(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())

"""
Images, identities, pairs and dataset manifests, plus the deterministic
synthetic profile/frontal generator used for desk-scale experiments.
"""

import csv
import io
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from .console import get_logger
from .errors import ConfigError, DataError, ManifestError

logger = get_logger(__name__)

MANIFEST_SCHEMA_VERSION = 1
DEFAULT_IMAGE_SIZE = (64, 64, 3)

# ==========================================
#  FORMAL TYPES
# ==========================================

class Domain(Enum):
    """Image domains with their file tag"""
    PROFILE = ("PROFILE", "PR", "Warped side view")
    FRONTAL = ("FRONTAL", "FR", "Canonical frontal view")

    def __init__(self, code: str, tag: str, description: str):
        self.code = code
        self.tag = tag
        self.description = description

    @classmethod
    def from_code(cls, code: str) -> "Domain":
        for domain in cls:
            if code.upper() in (domain.code, domain.tag):
                return domain
        raise ManifestError(f"Unknown domain: {code}")


@dataclass
class ImageSample:
    """One image; the condition and the ground truth of its GAN are this same image"""
    pixels: np.ndarray  # H x W x C, float32 in [-1, 1]
    identity: int
    domain: Domain
    fold: int
    source_path: Optional[str] = None

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise DataError(f"Expected H x W x C pixels, got shape {self.pixels.shape}")
        if self.identity < 0 or self.fold < 0:
            raise DataError("identity and fold must be non-negative")
        if self.pixels.size and (self.pixels.min() < -1.0 or self.pixels.max() > 1.0):
            raise DataError("pixel values must lie in [-1, 1]")

    def to_tensor(self) -> torch.Tensor:
        """C x H x W float32 tensor"""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1))).float()


@dataclass
class PairSample:
    """Cross-domain pair; label_y = 0 for genuine, 1 for impostor"""
    profile: ImageSample
    frontal: ImageSample
    label_y: int

    def __post_init__(self):
        if self.profile.domain is not Domain.PROFILE or self.frontal.domain is not Domain.FRONTAL:
            raise DataError("PairSample needs a PROFILE image and a FRONTAL image")
        expected = 0 if self.profile.identity == self.frontal.identity else 1
        if self.label_y != expected:
            raise DataError(
                f"label_y={self.label_y} contradicts identities "
                f"{self.profile.identity}/{self.frontal.identity}"
            )

    @property
    def is_genuine(self) -> bool:
        return self.label_y == 0


@dataclass
class PairBatch:
    """Balanced batch: floor(n/2) genuine and ceil(n/2) impostor pairs"""
    pairs: List[PairSample]
    batch_size: int

    def __post_init__(self):
        if len(self.pairs) != self.batch_size:
            raise DataError(f"batch holds {len(self.pairs)} pairs, expected {self.batch_size}")
        if self.num_genuine != self.batch_size // 2:
            raise DataError(
                f"unbalanced batch: {self.num_genuine} genuine / {self.num_impostor} impostor"
            )

    @property
    def num_genuine(self) -> int:
        return sum(1 for p in self.pairs if p.is_genuine)

    @property
    def num_impostor(self) -> int:
        return len(self.pairs) - self.num_genuine

    def to_tensors(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(profile N x C x H x W, frontal N x C x H x W, labels Y float N)"""
        profile = torch.stack([p.profile.to_tensor() for p in self.pairs])
        frontal = torch.stack([p.frontal.to_tensor() for p in self.pairs])
        labels = torch.tensor([float(p.label_y) for p in self.pairs], dtype=torch.float32)
        return profile, frontal, labels


@dataclass(frozen=True)
class ManifestEntry:
    identity: int
    domain: Domain
    fold: int
    path: str  # relative to the manifest directory


@dataclass
class DatasetManifest:
    """Dataset index with identity-disjoint folds"""
    entries: List[ManifestEntry]
    image_size: Tuple[int, int, int] = DEFAULT_IMAGE_SIZE
    num_identities: int = 0
    num_folds: int = 1
    root: Path = field(default=Path("."), compare=False)
    provenance: Dict = field(default_factory=dict, compare=False)
    _cache: Dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def validate(self, check_files: bool = False) -> None:
        if not self.entries:
            raise ManifestError("manifest has no entries")
        if len(self.image_size) != 3 or min(self.image_size) <= 0:
            raise ManifestError(f"invalid image_size {self.image_size}")

        fold_of: Dict[int, int] = {}
        domains: Dict[int, Set[Domain]] = {}
        for entry in self.entries:
            if entry.identity < 0:
                raise ManifestError(f"negative identity in entry {entry.path}")
            if not 0 <= entry.fold < self.num_folds:
                raise ManifestError(f"fold {entry.fold} out of range [0, {self.num_folds})")
            previous = fold_of.setdefault(entry.identity, entry.fold)
            if previous != entry.fold:
                raise ManifestError(
                    f"identity {entry.identity} appears in folds {previous} and {entry.fold}"
                )
            domains.setdefault(entry.identity, set()).add(entry.domain)

        for identity, seen in domains.items():
            if seen != {Domain.PROFILE, Domain.FRONTAL}:
                raise ManifestError(f"identity {identity} lacks a PROFILE or FRONTAL entry")
        if len(domains) != self.num_identities:
            raise ManifestError(
                f"num_identities={self.num_identities} but entries name {len(domains)}"
            )

        if check_files:
            for entry in self.entries:
                if not (self.root / entry.path).is_file():
                    raise ManifestError(f"missing image file: {self.root / entry.path}")

    def identities(self, folds: Optional[Iterable[int]] = None) -> List[int]:
        wanted = None if folds is None else set(folds)
        return sorted({e.identity for e in self.entries if wanted is None or e.fold in wanted})

    def select(self, folds: Optional[Iterable[int]] = None,
               domain: Optional[Domain] = None) -> List[ManifestEntry]:
        wanted = None if folds is None else set(folds)
        return [
            e for e in self.entries
            if (wanted is None or e.fold in wanted) and (domain is None or e.domain is domain)
        ]

    def split(self, test_folds: Sequence[int]) -> Tuple[List[int], List[int]]:
        """(train folds, test folds) for a held-out fold selection"""
        test = sorted(set(test_folds))
        for fold in test:
            if not 0 <= fold < self.num_folds:
                raise ConfigError(f"fold {fold} not in [0, {self.num_folds})", field="test_folds")
        train = [f for f in range(self.num_folds) if f not in test]
        return train, test

    def pixels(self, entry: ManifestEntry) -> np.ndarray:
        if entry.path not in self._cache:
            self._cache[entry.path] = load_image(self.root / entry.path, self.image_size)
        return self._cache[entry.path]

    def sample(self, entry: ManifestEntry) -> ImageSample:
        return ImageSample(
            pixels=self.pixels(entry),
            identity=entry.identity,
            domain=entry.domain,
            fold=entry.fold,
            source_path=entry.path,
        )

    def tensor(self, entries: Sequence[ManifestEntry]) -> torch.Tensor:
        """Stack entries into an N x C x H x W tensor"""
        return torch.stack([self.sample(e).to_tensor() for e in entries])


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic paired-domain benchmark"""
    num_identities: int = 30
    views_per_domain: int = 8
    image_size: Tuple[int, int] = (64, 64)
    warp_magnitude: float = 0.6
    illumination_jitter: float = 0.15
    seed: int = 1
    num_folds: int = 5

    def validate(self) -> None:
        if self.num_identities < 1:
            raise ConfigError("must be >= 1", field="num_identities")
        if self.views_per_domain < 1:
            raise ConfigError("must be >= 1", field="views_per_domain")
        if self.num_folds < 1:
            raise ConfigError("must be >= 1", field="num_folds")
        if self.num_identities < self.num_folds:
            raise ConfigError(
                f"{self.num_identities} identities cannot fill {self.num_folds} folds",
                field="num_identities",
            )
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ConfigError("height and width must be positive multiples of 8", field="image_size")
        if not 0.0 <= self.warp_magnitude <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="warp_magnitude")
        if self.illumination_jitter < 0:
            raise ConfigError("must be >= 0", field="illumination_jitter")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("must be a 64-bit unsigned integer", field="seed")


# ==========================================
#  IMAGE IO
# ==========================================

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to [0, 255] with clamping"""
    scaled = np.round((np.clip(pixels, -1.0, 1.0) + 1.0) * 127.5)
    return scaled.astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return (data.astype(np.float32) / 127.5 - 1.0).clip(-1.0, 1.0)


def save_image(pixels: np.ndarray, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG")


def load_image(path: Path, image_size: Tuple[int, int, int] = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if image_size[2] == 3 else "L")
            data = np.asarray(img)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if data.ndim == 2:
        data = data[:, :, None]
    if data.shape != tuple(image_size):
        raise DataError(f"image {path} has shape {data.shape}, expected {tuple(image_size)}")
    return from_uint8(data)


# ==========================================
#  MANIFEST FILE FORMAT
# ==========================================
# line 1: JSON header; following lines: CSV records identity,domain,fold,path

def save_manifest(manifest: DatasetManifest, path: Path) -> Path:
    manifest.validate()
    path = Path(path)
    header = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "image_size": list(manifest.image_size),
        "num_identities": manifest.num_identities,
        "num_folds": manifest.num_folds,
        "provenance": manifest.provenance,
    }
    buffer = io.StringIO()
    buffer.write(json.dumps(header, sort_keys=True) + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    for e in manifest.entries:
        writer.writerow([e.identity, e.domain.code, e.fold, e.path])

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buffer.getvalue(), encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_manifest(path: Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise ManifestError(f"empty manifest file {path}")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest header: {e}") from e
    if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(f"unsupported schema_version {header.get('schema_version')}")
    for key in ("image_size", "num_identities", "num_folds"):
        if key not in header:
            raise ManifestError(f"manifest header lacks '{key}'")

    entries = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            entries.append(ManifestEntry(
                identity=int(row[0]), domain=Domain.from_code(row[1]),
                fold=int(row[2]), path=row[3],
            ))
        except ValueError as e:
            raise ManifestError(f"line {lineno}: {e}") from e

    manifest = DatasetManifest(
        entries=entries,
        image_size=tuple(int(v) for v in header["image_size"]),
        num_identities=int(header["num_identities"]),
        num_folds=int(header["num_folds"]),
        root=path.parent,
        provenance=header.get("provenance", {}),
    )
    manifest.validate(check_files=check_files)
    return manifest


# ==========================================
#  SYNTHETIC GENERATOR
# ==========================================

def assign_folds(num_identities: int, num_folds: int, seed: int) -> List[int]:
    """Identity -> fold, a seeded permutation dealt round-robin"""
    order = np.random.default_rng([seed, 0xF01D]).permutation(num_identities)
    folds = [0] * num_identities
    for position, identity in enumerate(order):
        folds[int(identity)] = position % num_folds
    return folds


def _perspective_coeffs(output_quad, input_quad) -> Tuple[float, ...]:
    """PIL PERSPECTIVE coefficients sending output-plane points to input-plane points"""
    rows = []
    for (x, y), (u, v) in zip(output_quad, input_quad):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
    a = np.asarray(rows, dtype=np.float64)
    b = np.asarray(input_quad, dtype=np.float64).reshape(8)
    return tuple(np.linalg.solve(a, b).tolist())


def _render_base(identity_rng: np.random.Generator, size: Tuple[int, int]) -> Tuple[Image.Image, Tuple[int, int, int]]:
    h, w = size
    background = tuple(int(c) for c in identity_rng.integers(0, 90, size=3))
    img = Image.new("RGB", (w, h), background)
    draw = ImageDraw.Draw(img)
    for _ in range(int(identity_rng.integers(3, 7))):
        color = tuple(int(c) for c in identity_rng.integers(60, 256, size=3))
        if identity_rng.random() < 0.6:
            cx, cy = identity_rng.uniform(0.2, 0.8) * w, identity_rng.uniform(0.2, 0.8) * h
            rx, ry = identity_rng.uniform(0.08, 0.3) * w, identity_rng.uniform(0.08, 0.3) * h
            draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=color)
        else:
            x0, y0 = identity_rng.uniform(0.1, 0.9) * w, identity_rng.uniform(0.1, 0.9) * h
            x1, y1 = identity_rng.uniform(0.1, 0.9) * w, identity_rng.uniform(0.1, 0.9) * h
            width = max(1, int(identity_rng.uniform(0.04, 0.1) * w))
            draw.line([x0, y0, x1, y1], fill=color, width=width)
    return img, background


def _warp_profile(base: Image.Image, magnitude: float, background) -> Image.Image:
    """Fixed yaw-like warp: the far side is foreshortened and the view sheared"""
    if magnitude == 0:
        return base.copy()
    w, h = base.size
    squeeze = 0.45 * magnitude
    lift = 0.2 * magnitude
    shift = 0.15 * magnitude * w
    corners = [(0, 0), (w, 0), (w, h), (0, h)]
    landed = [
        (shift, 0),
        (shift + w * (1 - squeeze), h * lift),
        (shift + w * (1 - squeeze), h * (1 - lift)),
        (shift, h),
    ]
    coeffs = _perspective_coeffs(landed, corners)
    return base.transform((w, h), Image.PERSPECTIVE, coeffs, Image.BILINEAR, fillcolor=background)


def _illuminate(img: Image.Image, jitter: float, view_rng: np.random.Generator) -> np.ndarray:
    pixels = from_uint8(np.asarray(img))
    if jitter == 0:
        return pixels
    gain = float(np.exp(jitter * view_rng.normal()))
    offset = (jitter * 0.5 * view_rng.normal(size=3)).astype(np.float32)
    return np.clip((pixels + 1.0) * gain - 1.0 + offset, -1.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, out_dir: Path) -> DatasetManifest:
    """Render the benchmark to PNGs and write manifest.csv under out_dir"""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DataError(f"output directory {out_dir} is not writable: {e}") from e

    folds = assign_folds(spec.num_identities, spec.num_folds, spec.seed)
    entries: List[ManifestEntry] = []
    for identity in range(spec.num_identities):
        base, background = _render_base(np.random.default_rng([spec.seed, identity]), spec.image_size)
        views = {
            Domain.FRONTAL: base,
            Domain.PROFILE: _warp_profile(base, spec.warp_magnitude, background),
        }
        for domain_index, (domain, canonical) in enumerate(views.items()):
            for view in range(spec.views_per_domain):
                view_rng = np.random.default_rng([spec.seed, identity, domain_index, view])
                pixels = _illuminate(canonical, spec.illumination_jitter, view_rng)
                rel = f"{identity:04d}/{domain.tag}_{view:02d}.png"
                save_image(pixels, out_dir / rel)
                entries.append(ManifestEntry(identity, domain, folds[identity], rel))

    manifest = DatasetManifest(
        entries=entries,
        image_size=(spec.image_size[0], spec.image_size[1], 3),
        num_identities=spec.num_identities,
        num_folds=spec.num_folds,
        root=out_dir,
        provenance={"synthetic": {k: (list(v) if isinstance(v, tuple) else v)
                                  for k, v in spec.__dict__.items()}},
    )
    save_manifest(manifest, out_dir / "manifest.csv")
    logger.info("Rendered %d images for %d identities into %s",
                len(entries), spec.num_identities, out_dir)
    return manifest


# ==========================================
#  BALANCED PAIR SAMPLING
# ==========================================

def sample_pair_batch(manifest: DatasetManifest, folds: Iterable[int], batch_size: int,
                      rng: np.random.Generator) -> PairBatch:
    """Draw floor(n/2) genuine and ceil(n/2) impostor pairs from the given folds"""
    if batch_size < 2:
        raise ConfigError("must be >= 2", field="batch_size")
    folds = list(folds)
    profiles: Dict[int, List[ManifestEntry]] = {}
    frontals: Dict[int, List[ManifestEntry]] = {}
    for entry in manifest.select(folds):
        bucket = profiles if entry.domain is Domain.PROFILE else frontals
        bucket.setdefault(entry.identity, []).append(entry)
    identities = sorted(set(profiles) & set(frontals))
    if len(identities) < 2:
        raise DataError(
            f"folds {folds} hold {len(identities)} identities; impostor pairs need at least 2"
        )

    def pick(bucket: List[ManifestEntry]) -> ImageSample:
        return manifest.sample(bucket[int(rng.integers(len(bucket)))])

    pairs: List[PairSample] = []
    for _ in range(batch_size // 2):
        identity = identities[int(rng.integers(len(identities)))]
        pairs.append(PairSample(pick(profiles[identity]), pick(frontals[identity]), 0))
    for _ in range(batch_size - batch_size // 2):
        first, second = rng.choice(len(identities), size=2, replace=False)
        pairs.append(PairSample(pick(profiles[identities[first]]),
                                pick(frontals[identities[second]]), 1))

    order = rng.permutation(batch_size)
    return PairBatch(pairs=[pairs[i] for i in order], batch_size=batch_size)

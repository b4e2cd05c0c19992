"""Multi-domain image corpora: loading, synthesis, augmentation, and batching.

Images are float32 arrays of shape [3, H, W] with values in [-1, 1].
Domain labels are integer indices into ``DatasetSpec.domain_names``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

SYNTHETIC_ROOT = "synthetic"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
ROTATION_DEGREES = (-2, -1, 0, 1, 2)
DEFAULT_DOMAIN_NAMES = ("asian", "black", "white")

# disjoint seed-stream tags so independent random purposes never collide
_STREAM_SYNTHETIC = 0
_STREAM_SPLIT = 1
_STREAM_EPOCH = 2
_STREAM_AUGMENT = 3
STREAM_TRANSLATION = 4


class ConfigurationError(ValueError):
    """A dataset or model specification cannot be satisfied."""


@dataclass(frozen=True)
class DatasetSpec:
    """Where a corpus comes from and how it is preprocessed.

    ``root_path`` is either a directory with one subdirectory per domain
    name, or the token ``"synthetic"`` for the built-in generator.
    ``crop_size`` is applied as a center crop only when the source image
    exceeds it in both dimensions; ``None`` disables cropping.
    """

    root_path: str = SYNTHETIC_ROOT
    domain_names: tuple[str, ...] = DEFAULT_DOMAIN_NAMES
    image_size: int = 256
    crop_size: int | None = 1200

    def __post_init__(self):
        object.__setattr__(self, "domain_names", tuple(self.domain_names))
        if len(self.domain_names) < 2:
            raise ConfigurationError("at least two domains are required")
        if len(set(self.domain_names)) != len(self.domain_names):
            raise ConfigurationError("domain_names must be unique")
        if self.image_size <= 0 or self.image_size % 2 != 0:
            raise ConfigurationError(
                f"image_size must be a positive even integer, got {self.image_size}"
            )
        if self.crop_size is not None and self.crop_size < self.image_size:
            raise ConfigurationError(
                f"crop_size {self.crop_size} must be >= image_size {self.image_size}"
            )

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def is_synthetic(self) -> bool:
        return self.root_path == SYNTHETIC_ROOT


@dataclass(frozen=True)
class SyntheticDomainConfig:
    """Parameters of the built-in shape corpus.

    Each domain is a hue family (base hue plus small jitter) combined with
    a domain-specific stripe texture, so domains are separable by a mean
    hue threshold before any training happens.
    """

    num_per_domain: int = 100
    shape_vocabulary: tuple[str, ...] = ("circle", "square", "triangle")
    hue_centers: tuple[float, ...] | None = None
    hue_jitter: float = 0.03
    texture_frequencies: tuple[float, ...] | None = None
    texture_amplitude: float = 0.12

    def __post_init__(self):
        if self.num_per_domain <= 0:
            raise ConfigurationError("num_per_domain must be positive")
        if not self.shape_vocabulary:
            raise ConfigurationError("shape_vocabulary must not be empty")
        object.__setattr__(self, "shape_vocabulary", tuple(self.shape_vocabulary))
        if self.hue_centers is not None:
            object.__setattr__(self, "hue_centers", tuple(float(h) for h in self.hue_centers))
        if self.texture_frequencies is not None:
            object.__setattr__(
                self, "texture_frequencies", tuple(float(f) for f in self.texture_frequencies)
            )

    def resolve_hues(self, num_domains: int) -> tuple[float, ...]:
        if self.hue_centers is not None:
            hues = self.hue_centers
        else:
            hues = tuple(k / num_domains for k in range(num_domains))
        if len(hues) != num_domains:
            raise ConfigurationError(
                f"need {num_domains} hue centers, got {len(hues)}"
            )
        return hues

    def resolve_textures(self, num_domains: int) -> tuple[float, ...]:
        if self.texture_frequencies is not None:
            freqs = self.texture_frequencies
        else:
            freqs = tuple(2.0 + 3.0 * k for k in range(num_domains))
        if len(freqs) != num_domains:
            raise ConfigurationError(
                f"need {num_domains} texture frequencies, got {len(freqs)}"
            )
        return freqs

    def validate_distinct(self, num_domains: int) -> None:
        hues = self.resolve_hues(num_domains)
        freqs = self.resolve_textures(num_domains)
        transforms = list(zip(hues, freqs))
        if len(set(transforms)) != num_domains:
            raise ConfigurationError("per-domain transforms must be pairwise distinct")
        for i in range(num_domains):
            for j in range(i + 1, num_domains):
                gap = abs(hues[i] - hues[j])
                gap = min(gap, 1.0 - gap)
                if gap <= 2.0 * self.hue_jitter:
                    raise ConfigurationError(
                        f"hue families of domains {i} and {j} overlap "
                        f"(gap {gap:.3f} <= 2*jitter {2 * self.hue_jitter:.3f})"
                    )


@dataclass
class ImageBatch:
    """A batch of normalized images with per-item domain labels."""

    pixels: np.ndarray  # [B, 3, H, W] float32 in [-1, 1]
    labels: np.ndarray  # [B] int64 in [0, K)

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"pixels must be [B,3,H,W], got {self.pixels.shape}")
        if self.pixels.shape[0] < 1:
            raise ValueError("batch must contain at least one item")
        if self.pixels.shape[2] != self.pixels.shape[3]:
            raise ValueError("images must be square")
        if self.labels.shape != (self.pixels.shape[0],):
            raise ValueError("labels must be one integer per image")
        if not np.isfinite(self.pixels).all():
            raise ValueError("pixels contain non-finite values")
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise ValueError("pixels must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.pixels.shape[0]


class Dataset:
    """Immutable indexed collection of (image, domain_index) pairs."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, domain_names: tuple[str, ...]):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.domain_names = tuple(domain_names)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [N,3,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must align with images")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index: int) -> tuple[np.ndarray, int]:
        return self.images[index], int(self.labels[index])

    def counts_per_domain(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_domains)

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.domain_names)


def decode_image(path: Path, spec: DatasetSpec) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        if spec.crop_size is not None and w >= spec.crop_size and h >= spec.crop_size:
            left = (w - spec.crop_size) // 2
            top = (h - spec.crop_size) // 2
            img = img.crop((left, top, left + spec.crop_size, top + spec.crop_size))
        if img.size != (spec.image_size, spec.image_size):
            img = img.resize((spec.image_size, spec.image_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def _load_folder_dataset(spec: DatasetSpec) -> Dataset:
    root = Path(spec.root_path)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root does not exist: {root}")
    images: list[np.ndarray] = []
    labels: list[int] = []
    for index, name in enumerate(spec.domain_names):
        domain_dir = root / name
        if not domain_dir.is_dir():
            raise ConfigurationError(f"missing domain directory: {domain_dir}")
        count = 0
        for path in sorted(domain_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                images.append(decode_image(path, spec))
            except OSError as exc:
                logger.warning("skipping undecodable image %s: %s", path, exc)
                continue
            labels.append(index)
            count += 1
        if count == 0:
            raise ConfigurationError(f"empty domain: no decodable images in {domain_dir}")
        logger.info("domain %-12s %4d images", name, count)
    return Dataset(np.stack(images), np.asarray(labels), spec.domain_names)


def _draw_shape(size: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Filled mask of a random instance of the given primitive, [H, W] in {0, 1}."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = rng.uniform(0.3, 0.7) * size
    cy = rng.uniform(0.3, 0.7) * size
    radius = rng.uniform(0.18, 0.32) * size
    if kind == "circle":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    elif kind == "square":
        mask = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    elif kind == "triangle":
        # upright triangle: below the apex, inside the two slanted edges
        top = cy - radius
        mask = (
            (yy >= top)
            & (yy <= cy + radius)
            & (np.abs(xx - cx) <= (yy - top) / 2.0)
        )
    else:
        raise ConfigurationError(f"unknown shape: {kind}")
    return mask.astype(np.float64)


def generate_synthetic_dataset(
    spec: DatasetSpec, config: SyntheticDomainConfig, seed: int = 0
) -> Dataset:
    """Colored geometric shapes with one hue/texture family per domain."""
    num_domains = spec.num_domains
    config.validate_distinct(num_domains)
    hues = config.resolve_hues(num_domains)
    freqs = config.resolve_textures(num_domains)
    size = spec.image_size

    images = []
    labels = []
    for domain in range(num_domains):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAM_SYNTHETIC, domain])))
        for _ in range(config.num_per_domain):
            kind = config.shape_vocabulary[rng.integers(len(config.shape_vocabulary))]
            mask = _draw_shape(size, kind, rng)
            hue = (hues[domain] + rng.uniform(-config.hue_jitter, config.hue_jitter)) % 1.0
            sat = rng.uniform(0.8, 1.0)
            val = rng.uniform(0.75, 0.95)
            fg = hsv_to_rgb(np.array([hue, sat, val]))

            phase = rng.uniform(0.0, 2.0 * np.pi)
            rows = np.arange(size, dtype=np.float64)
            stripes = 1.0 + config.texture_amplitude * np.sin(
                2.0 * np.pi * freqs[domain] * rows / size + phase
            )
            background = rng.uniform(0.25, 0.4)

            img = np.empty((3, size, size), dtype=np.float64)
            for ch in range(3):
                img[ch] = background + mask * (fg[ch] * stripes[:, None] - background)
            img = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
            images.append(img.astype(np.float32))
            labels.append(domain)
    return Dataset(np.stack(images), np.asarray(labels), spec.domain_names)


def load_dataset(
    spec: DatasetSpec,
    synthetic: SyntheticDomainConfig | None = None,
    seed: int = 0,
) -> Dataset:
    """Load a folder corpus or synthesize one, preprocessed to spec.

    Folder layout is ``<root>/<domain_name>/*.{png,jpg}``. Every image is
    decoded to RGB, optionally center-cropped, resized to H x H, and
    scaled to [-1, 1].
    """
    if spec.is_synthetic:
        return generate_synthetic_dataset(spec, synthetic or SyntheticDomainConfig(), seed)
    return _load_folder_dataset(spec)


def dump_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Write a dataset to disk in the folder-per-domain layout."""
    out = Path(out_dir)
    for index, name in enumerate(dataset.domain_names):
        (out / name).mkdir(parents=True, exist_ok=True)
    counters = [0] * dataset.num_domains
    for image, label in dataset:
        arr = ((image.transpose(1, 2, 0) + 1.0) * 127.5).round().astype(np.uint8)
        path = out / dataset.domain_names[label] / f"{counters[label]:05d}.png"
        Image.fromarray(arr).save(path)
        counters[label] += 1


def mean_foreground_hue(image: np.ndarray, saturation_floor: float = 0.2) -> float:
    """Circular mean hue over saturated pixels of a [3,H,W] image in [-1,1].

    Background pixels are gray and fall below the saturation floor, so this
    isolates the shape color. Used as the trivial domain separability probe.
    """
    rgb = (image.transpose(1, 2, 0) + 1.0) / 2.0
    hsv = rgb_to_hsv(np.clip(rgb, 0.0, 1.0))
    sat_mask = hsv[..., 1] > saturation_floor
    if not sat_mask.any():
        return float("nan")
    hue = hsv[..., 0][sat_mask]
    angles = hue * 2.0 * np.pi
    mean_angle = np.arctan2(np.sin(angles).mean(), np.cos(angles).mean())
    return float((mean_angle / (2.0 * np.pi)) % 1.0)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and a small random rotation.

    With probability 0.5 the image is mirrored; independently a rotation
    angle is drawn uniformly from {-2,-1,0,+1,+2} degrees and applied with
    bilinear resampling and border replication. Identity parameters return
    the input values unchanged.
    """
    flip = rng.random() < 0.5
    angle = ROTATION_DEGREES[rng.integers(len(ROTATION_DEGREES))]
    out = image
    if flip:
        out = out[:, :, ::-1]
    if angle != 0:
        out = ndimage.rotate(
            out, angle, axes=(2, 1), reshape=False, order=1, mode="nearest"
        )
        out = np.clip(out, -1.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def split_train_test(
    dataset: Dataset, test_fraction: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive, per-domain stratified partition."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAM_SPLIT])))
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for domain in range(dataset.num_domains):
        indices = np.flatnonzero(dataset.labels == domain)
        if len(indices) < 2:
            raise ValueError(
                f"domain {dataset.domain_names[domain]!r} has {len(indices)} items; "
                "need at least 2 to split"
            )
        n_test = int(round(len(indices) * test_fraction))
        n_test = min(max(n_test, 1), len(indices) - 1)
        order = rng.permutation(len(indices))
        test_idx.append(indices[order[:n_test]])
        train_idx.append(indices[order[n_test:]])
    train = dataset.subset(np.sort(np.concatenate(train_idx)))
    test = dataset.subset(np.sort(np.concatenate(test_idx)))
    return train, test


def encode_labels(labels: np.ndarray, num_domains: int, size: int) -> np.ndarray:
    """One-hot spatial label maps [B, K, size, size]."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_domains:
        raise ValueError(
            f"labels must lie in [0, {num_domains}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    maps = np.zeros((labels.shape[0], num_domains, size, size), dtype=np.float32)
    maps[np.arange(labels.shape[0]), labels] = 1.0
    return maps


def _item_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAM_AUGMENT, epoch, position])))


class EpochBatcher:
    """Shuffled without-replacement batches that wrap across epochs.

    Each epoch's permutation and each item's augmentation parameters are
    derived statelessly from (seed, epoch, position), so the emitted batch
    stream is reproducible for a fixed seed regardless of worker count,
    and the full iteration state is just (epoch, position).
    """

    def __init__(
        self,
        dataset: Dataset,
        batch_size: int,
        seed: int,
        apply_augment: bool = True,
        num_workers: int = 0,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.apply_augment = apply_augment
        self.num_workers = num_workers
        self.epoch = 0
        self.position = 0
        self._permutation = self._epoch_permutation(0)

    def _epoch_permutation(self, epoch: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, _STREAM_EPOCH, epoch])))
        return rng.permutation(len(self.dataset))

    def get_state(self) -> tuple[int, int]:
        return self.epoch, self.position

    def set_state(self, state: tuple[int, int]) -> None:
        self.epoch, self.position = int(state[0]), int(state[1])
        self._permutation = self._epoch_permutation(self.epoch)

    def _next_slots(self) -> list[tuple[int, int, int]]:
        """(dataset_index, epoch, position) for the next batch, wrapping epochs."""
        slots = []
        while len(slots) < self.batch_size:
            if self.position >= len(self._permutation):
                self.epoch += 1
                self.position = 0
                self._permutation = self._epoch_permutation(self.epoch)
            slots.append((int(self._permutation[self.position]), self.epoch, self.position))
            self.position += 1
        return slots

    def _prepare(self, slot: tuple[int, int, int]) -> np.ndarray:
        index, epoch, position = slot
        image = self.dataset.images[index]
        if not self.apply_augment:
            return image
        return augment(image, _item_rng(self.seed, epoch, position))

    def next_batch(self) -> ImageBatch:
        slots = self._next_slots()
        if self.num_workers > 0:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                images = list(pool.map(self._prepare, slots))
        else:
            images = [self._prepare(slot) for slot in slots]
        labels = self.dataset.labels[[s[0] for s in slots]]
        return ImageBatch(np.stack(images), np.asarray(labels, dtype=np.int64))

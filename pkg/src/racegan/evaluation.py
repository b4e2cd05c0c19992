"""Quantitative and visual evaluation of a trained translation model.

Covers translated-corpus generation in self/cross modes, the three
classifier experiment settings (SSC, SC, CC), confusion-matrix metrics,
latent-space extraction with 2-D embeddings and silhouette scores, and
qualitative sample grids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import torch
import torch.nn as nn
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .data_pipeline import STREAM_TRANSLATION, Dataset
from .models import extract_latent
from .trainer import (
    TEST_FRACTION,
    CheckpointState,
    ModelBundle,
    as_float_tensor,
    models_from_state,
    split_train_test,
    to_uint8,
)

logger = logging.getLogger(__name__)

MODES = ("self", "cross", "both")
SETTINGS = ("ssc", "sc", "cc")


@dataclass
class TranslationCorpus:
    """Translated images with their (source, target) domain pairs."""

    translated: np.ndarray  # [N, 3, H, W] in [-1, 1]
    source_domains: np.ndarray  # [N]
    target_domains: np.ndarray  # [N]
    origin_indices: np.ndarray  # [N] index of the source image in its dataset
    num_domains: int

    def __post_init__(self):
        n = self.translated.shape[0]
        for name in ("source_domains", "target_domains", "origin_indices"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            setattr(self, name, arr)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        for name in ("source_domains", "target_domains"):
            arr = getattr(self, name)
            if n and (arr.min() < 0 or arr.max() >= self.num_domains):
                raise ValueError(f"{name} out of range [0, {self.num_domains})")
        if n and (self.translated.min() < -1.0 or self.translated.max() > 1.0):
            raise ValueError("translated images must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.translated.shape[0]

    @property
    def self_mask(self) -> np.ndarray:
        return self.source_domains == self.target_domains

    @property
    def cross_mask(self) -> np.ndarray:
        return ~self.self_mask

    def subset(self, mask: np.ndarray) -> "TranslationCorpus":
        return TranslationCorpus(
            self.translated[mask],
            self.source_domains[mask],
            self.target_domains[mask],
            self.origin_indices[mask],
            self.num_domains,
        )

    def items(self):
        for i in range(len(self)):
            yield (
                self.translated[i],
                int(self.source_domains[i]),
                int(self.target_domains[i]),
            )


def _translation_latent(
    seed: int, origin_index: int, target: int, latent_length: int
) -> np.ndarray:
    """Stateless per-(image, target) latent so corpora are identical across
    modes and reruns."""
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, STREAM_TRANSLATION, origin_index, target]))
    )
    return rng.standard_normal(latent_length).astype(np.float32)


def _resolve_models(checkpoint) -> tuple[ModelBundle, int]:
    if isinstance(checkpoint, ModelBundle):
        bundle = checkpoint
        latent_length = bundle.style_extractor.spec.latent_length
    else:
        state = (
            checkpoint
            if isinstance(checkpoint, CheckpointState)
            else CheckpointState.load(checkpoint)
        )
        bundle = models_from_state(state)
        latent_length = state.config.style_extractor.latent_length
    return bundle.eval(), latent_length


def generate_translations(
    checkpoint,
    dataset: Dataset,
    mode: str = "both",
    seed: int = 0,
    batch_size: int = 16,
) -> TranslationCorpus:
    """Translate every dataset image to the targets selected by ``mode``.

    ``self`` translates each image into its own domain, ``cross`` into
    every other domain, ``both`` into all domains. Deterministic given
    the seed, and items shared between modes are identical.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    models, latent_length = _resolve_models(checkpoint)
    k = dataset.num_domains

    sources, targets, origins = [], [], []
    for index in range(len(dataset)):
        label = int(dataset.labels[index])
        for target in range(k):
            if mode == "self" and target != label:
                continue
            if mode == "cross" and target == label:
                continue
            sources.append(label)
            targets.append(target)
            origins.append(index)

    translated = np.empty(
        (len(origins), 3, dataset.image_size, dataset.image_size), dtype=np.float32
    )
    with torch.no_grad():
        for lo in range(0, len(origins), batch_size):
            hi = min(lo + batch_size, len(origins))
            pixels = as_float_tensor(dataset.images[origins[lo:hi]])
            batch_targets = torch.tensor(targets[lo:hi], dtype=torch.int64)
            z = torch.from_numpy(
                np.stack(
                    [
                        _translation_latent(seed, origins[i], targets[i], latent_length)
                        for i in range(lo, hi)
                    ]
                )
            )
            style = models.style_extractor(z, batch_targets)
            fake = models.generator(pixels, batch_targets, style)
            translated[lo:hi] = np.clip(fake.numpy(), -1.0, 1.0)
    return TranslationCorpus(
        translated,
        np.asarray(sources),
        np.asarray(targets),
        np.asarray(origins),
        num_domains=k,
    )


# ---------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class ClassifierConfig:
    """Small CNN trained from scratch on translated images.

    ``backbone`` selects the architecture so a heavier, pretrained model
    can be swapped in when a real face corpus is available.
    """

    backbone: str = "small_cnn"
    widths: tuple[int, ...] = (16, 32, 64, 64)
    batch_size: int = 32
    learning_rate: float = 2e-3
    max_epochs: int = 40
    min_epochs: int = 10
    patience: int = 6
    holdout_fraction: float = 0.1


class SmallCNN(nn.Module):
    def __init__(self, widths: tuple[int, ...], num_classes: int):
        super().__init__()
        blocks: list[nn.Module] = []
        in_ch = 3
        for width in widths:
            blocks += [nn.Conv2d(in_ch, width, 3, 1, 1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            in_ch = width
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(in_ch, num_classes)
        # zero-init head keeps training equivariant under label permutation
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        h = self.pool(self.features(x)).flatten(1)
        return self.head(h)


_BACKBONES = {"small_cnn": SmallCNN}


class RaceClassifier:
    """Trained domain classifier with deterministic batched prediction."""

    def __init__(self, network: nn.Module, num_domains: int):
        self.network = network.eval()
        self.num_domains = num_domains

    def predict(self, images: np.ndarray) -> np.ndarray:
        # one item at a time so predictions are independent of batch makeup
        preds = np.empty(images.shape[0], dtype=np.int64)
        with torch.no_grad():
            for i in range(images.shape[0]):
                logits = self.network(as_float_tensor(images[i : i + 1]))
                preds[i] = int(logits.argmax(dim=1))
        return preds


def train_race_classifier(
    corpus: TranslationCorpus,
    config: ClassifierConfig | None = None,
    seed: int = 0,
) -> RaceClassifier:
    """Fit a classifier to (translated image, target domain) pairs.

    Early-stops on a held-out 10% slice and restores the best weights.
    Deterministic for a fixed seed.
    """
    config = config or ClassifierConfig()
    if config.backbone not in _BACKBONES:
        raise ValueError(f"unknown backbone {config.backbone!r}")
    labels = corpus.target_domains
    counts = np.bincount(labels, minlength=corpus.num_domains)
    sparse = [
        f"{k} ({counts[k]} items)" for k in range(corpus.num_domains) if counts[k] < 4
    ]
    if sparse:
        raise ValueError(
            "every domain needs at least 4 items; missing or sparse: "
            + ", ".join(sparse)
        )

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0])))
    order = rng.permutation(len(corpus))
    n_holdout = max(1, int(round(len(corpus) * config.holdout_fraction)))
    holdout_idx, train_idx = order[:n_holdout], order[n_holdout:]

    torch.manual_seed(seed)
    network = _BACKBONES[config.backbone](config.widths, corpus.num_domains)
    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
    criterion = nn.CrossEntropyLoss()
    images = corpus.translated
    holdout_images = as_float_tensor(images[holdout_idx])
    holdout_labels = torch.from_numpy(labels[holdout_idx])

    best_state = {k: v.clone() for k, v in network.state_dict().items()}
    best_accuracy = -1.0
    stale = 0
    for epoch in range(config.max_epochs):
        epoch_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, 1, epoch]))
        )
        network.train()
        perm = epoch_rng.permutation(len(train_idx))
        for lo in range(0, len(perm), config.batch_size):
            idx = train_idx[perm[lo:lo + config.batch_size]]
            x = as_float_tensor(images[idx])
            y = torch.from_numpy(labels[idx])
            optimizer.zero_grad(set_to_none=True)
            loss = criterion(network(x), y)
            loss.backward()
            optimizer.step()
        network.eval()
        with torch.no_grad():
            accuracy = float(
                (network(holdout_images).argmax(dim=1) == holdout_labels)
                .float()
                .mean()
            )
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_state = {k: v.clone() for k, v in network.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if epoch + 1 >= config.min_epochs and stale >= config.patience:
                break
    network.load_state_dict(best_state)
    logger.info("classifier holdout accuracy %.3f", best_accuracy)
    return RaceClassifier(network, corpus.num_domains)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalMetrics:
    """Macro-averaged classification metrics with the raw confusion matrix."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion_matrix: np.ndarray  # [K, K], rows are true domains

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion_matrix": self.confusion_matrix.tolist(),
        }


def compute_metrics(
    predictions: np.ndarray, truths: np.ndarray, num_domains: int
) -> EvalMetrics:
    """Confusion matrix, accuracy, and macro precision/recall/F1.

    Per-class precision and recall are 0 when undefined, and per-class F1
    is 0 when precision + recall is 0.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape or predictions.ndim != 1:
        raise ValueError("predictions and truths must be equal-length vectors")
    if predictions.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    for name, arr in (("predictions", predictions), ("truths", truths)):
        if arr.min() < 0 or arr.max() >= num_domains:
            raise ValueError(f"{name} out of range [0, {num_domains})")

    confusion = np.zeros((num_domains, num_domains), dtype=np.int64)
    np.add.at(confusion, (truths, predictions), 1)
    diag = np.diag(confusion).astype(np.float64)
    col_sums = confusion.sum(axis=0).astype(np.float64)
    row_sums = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col_sums, out=np.zeros(num_domains), where=col_sums > 0)
    recall = np.divide(diag, row_sums, out=np.zeros(num_domains), where=row_sums > 0)
    pr_sum = precision + recall
    f1 = np.divide(
        2.0 * precision * recall, pr_sum, out=np.zeros(num_domains), where=pr_sum > 0
    )
    return EvalMetrics(
        accuracy=float(diag.sum() / predictions.size),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        confusion_matrix=confusion,
    )


def run_experiment_setting(
    setting: str,
    checkpoint,
    dataset: Dataset,
    seed: int = 0,
    classifier_config: ClassifierConfig | None = None,
) -> EvalMetrics:
    """One Table-style experiment: SSC, SC, or CC.

    The dataset is split with the checkpoint's training seed so the test
    images are the identities held out from training. SSC trains the
    classifier on self-domain translations of the train split and tests on
    self+cross translations of the test split; SC tests on cross only;
    CC trains and tests on cross-domain translations.
    """
    setting = setting.lower()
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}, got {setting!r}")
    state = (
        checkpoint
        if isinstance(checkpoint, CheckpointState)
        else CheckpointState.load(checkpoint)
    )
    train_set, test_set = split_train_test(dataset, TEST_FRACTION, state.config.seed)
    train_mode = "self" if setting in ("ssc", "sc") else "cross"
    test_mode = "both" if setting == "ssc" else "cross"
    train_corpus = generate_translations(state, train_set, train_mode, seed)
    test_corpus = generate_translations(state, test_set, test_mode, seed)
    classifier = train_race_classifier(train_corpus, classifier_config, seed)
    predictions = classifier.predict(test_corpus.translated)
    return compute_metrics(predictions, test_corpus.target_domains, dataset.num_domains)


# ---------------------------------------------------------------------------
# latent space


def tsne_embed(latents: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    """2-D t-SNE embedding with a fixed seed."""
    latents = np.asarray(latents, dtype=np.float64)
    n = latents.shape[0]
    if perplexity >= n / 3.0:
        raise ValueError(
            f"perplexity {perplexity} too large for {n} points (need < N/3)"
        )
    embedding = TSNE(
        n_components=2, perplexity=perplexity, random_state=seed, init="pca"
    ).fit_transform(latents)
    return np.asarray(embedding, dtype=np.float64)


def cluster_silhouette(features: np.ndarray, labels: np.ndarray) -> float:
    return float(silhouette_score(features, labels))


def latents_for(generator, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Pooled bottleneck features for a stack of images."""
    out = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            batch = as_float_tensor(images[lo:lo + batch_size])
            out.append(extract_latent(generator, batch).numpy())
    return np.concatenate(out, axis=0)


@dataclass
class LatentClusterReport:
    silhouette_latent: float
    silhouette_pixels: float
    plot_paths: dict = field(default_factory=dict)


def _scatter_by_label(ax, points, labels, domain_names, marker="o", prefix=""):
    cmap = plt.get_cmap("tab10")
    for domain in range(len(domain_names)):
        mask = labels == domain
        ax.scatter(
            points[mask, 0],
            points[mask, 1],
            s=12,
            marker=marker,
            color=cmap(domain),
            label=f"{prefix}{domain_names[domain]}",
            alpha=0.75,
        )


def latent_cluster_report(
    checkpoint,
    dataset: Dataset,
    out_dir: str | Path,
    seed: int = 0,
    perplexity: float = 30.0,
) -> LatentClusterReport:
    """Embed original and translated latents; write plots, report silhouettes.

    The latent silhouette groups encoder features of the originals plus all
    cross-domain translations by target domain; the pixel silhouette groups
    the raw original images by their own domain. Perplexity is clamped to
    stay valid for small corpora.
    """
    if len(dataset) == 0:
        raise ValueError("cannot analyze an empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = (
        checkpoint
        if isinstance(checkpoint, CheckpointState)
        else CheckpointState.load(checkpoint)
    )
    models = models_from_state(state)

    corpus = generate_translations(state, dataset, "cross", seed)
    original_latents = latents_for(models.generator, dataset.images)
    translated_latents = latents_for(models.generator, corpus.translated)
    combined_latents = np.concatenate([original_latents, translated_latents])
    combined_targets = np.concatenate([dataset.labels, corpus.target_domains])
    n_original = len(dataset)

    pixels_flat = dataset.images.reshape(n_original, -1)
    silhouette_latent = cluster_silhouette(combined_latents, combined_targets)
    silhouette_pixels = cluster_silhouette(pixels_flat, dataset.labels)

    def safe_perplexity(n):
        return min(perplexity, max(1.0, (n - 1) / 3.0))

    pixel_embedding = tsne_embed(pixels_flat, safe_perplexity(n_original), seed)
    latent_embedding = tsne_embed(
        combined_latents, safe_perplexity(combined_latents.shape[0]), seed
    )

    names = dataset.domain_names
    plots = {}

    fig, ax = plt.subplots(figsize=(6, 5))
    _scatter_by_label(ax, pixel_embedding, dataset.labels, names)
    ax.set_title(f"original distribution (silhouette {silhouette_pixels:.3f})")
    ax.legend()
    plots["original_distribution"] = out / "original_distribution.png"
    fig.savefig(plots["original_distribution"], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 5))
    _scatter_by_label(ax, latent_embedding, combined_targets, names)
    ax.set_title(f"latent distribution by target (silhouette {silhouette_latent:.3f})")
    ax.legend()
    plots["latent_distribution"] = out / "latent_distribution.png"
    fig.savefig(plots["latent_distribution"], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 5))
    _scatter_by_label(
        ax, latent_embedding[n_original:], corpus.target_domains, names, prefix="to "
    )
    _scatter_by_label(
        ax, latent_embedding[:n_original], dataset.labels, names, marker="*"
    )
    ax.set_title("originals (stars) mapped into the translated latent space")
    ax.legend(fontsize=7)
    plots["latent_mapping"] = out / "latent_mapping.png"
    fig.savefig(plots["latent_mapping"], dpi=120)
    plt.close(fig)

    return LatentClusterReport(
        silhouette_latent=silhouette_latent,
        silhouette_pixels=silhouette_pixels,
        plot_paths={k: str(v) for k, v in plots.items()},
    )


# ---------------------------------------------------------------------------
# sample grids


def render_sample_grid(models: ModelBundle, images: np.ndarray, seed: int = 0) -> np.ndarray:
    """Tile inputs (first column) against their translation to every domain."""
    if images.shape[0] == 0:
        raise ValueError("sample grid needs at least one input image")
    k = models.generator.spec.num_domains
    latent_length = models.style_extractor.spec.latent_length
    h = images.shape[2]
    rows = []
    with torch.no_grad():
        for i in range(images.shape[0]):
            tiles = [to_uint8(images[i])]
            for target in range(k):
                z = torch.from_numpy(
                    _translation_latent(seed, i, target, latent_length)
                )[None]
                targets = torch.tensor([target])
                style = models.style_extractor(z, targets)
                fake = models.generator(
                    as_float_tensor(images[i : i + 1]), targets, style
                )
                tiles.append(to_uint8(fake[0]))
            rows.append(np.concatenate(tiles, axis=1))
    return np.concatenate(rows, axis=0)


def sample_grid(
    checkpoint,
    images: np.ndarray,
    seed: int = 0,
    out_path: str | Path | None = None,
) -> np.ndarray:
    """Grid of inputs and their translations; optionally saved as PNG."""
    models, _ = _resolve_models(checkpoint)
    grid = render_sample_grid(models, images, seed)
    if out_path is not None:
        from PIL import Image

        Image.fromarray(grid).save(out_path)
    return grid

"""Generator, style extractor, and discriminator networks.

The generator is an encoder/bottleneck/decoder convnet conditioned by
depth-wise concatenation of one-hot domain label maps and a row-tiled
style channel. The style extractor maps a 16-dim Gaussian latent through
shared fully-connected layers into one unshared branch per domain. The
discriminator is an unnormalized strided convnet with a patch critic head
and an auxiliary domain classification head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data_pipeline import ConfigurationError


@dataclass(frozen=True)
class GeneratorSpec:
    image_size: int = 256
    num_domains: int = 3
    base_width: int = 64
    num_residual_blocks: int = 9
    style_length: int | None = None  # resolved to image_size (row tiling)

    def __post_init__(self):
        if self.image_size % 4 != 0 or self.image_size <= 0:
            raise ConfigurationError(
                f"generator image_size must be divisible by 4, got {self.image_size}"
            )
        if self.num_domains < 1:
            raise ConfigurationError("num_domains must be >= 1")
        if self.base_width < 1 or self.num_residual_blocks < 0:
            raise ConfigurationError("base_width/num_residual_blocks out of range")
        if self.style_length is None:
            object.__setattr__(self, "style_length", self.image_size)
        elif self.style_length != self.image_size:
            raise ConfigurationError(
                f"style_length {self.style_length} must equal image_size "
                f"{self.image_size} under row tiling"
            )

    @property
    def input_channels(self) -> int:
        return 3 + self.num_domains + 1

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * 4


@dataclass(frozen=True)
class StyleExtractorSpec:
    num_domains: int = 3
    style_length: int = 256
    latent_length: int = 16
    hidden_width: int = 512
    shared_layers: int = 4
    unshared_layers_per_domain: int = 3

    def __post_init__(self):
        if min(
            self.num_domains,
            self.style_length,
            self.latent_length,
            self.hidden_width,
            self.shared_layers,
        ) < 1 or self.unshared_layers_per_domain < 1:
            raise ConfigurationError("style extractor spec fields must be positive")


@dataclass(frozen=True)
class DiscriminatorSpec:
    image_size: int = 256
    num_domains: int = 3
    base_width: int = 64
    num_hidden_layers: int = 5

    def __post_init__(self):
        stride_total = 2 ** (1 + self.num_hidden_layers)
        if self.image_size % stride_total != 0 or self.image_size // stride_total < 1:
            raise ConfigurationError(
                f"image_size {self.image_size} must be divisible by "
                f"{stride_total} (1 + num_hidden_layers stride-2 convolutions)"
            )
        if self.base_width < 1 or self.num_domains < 1:
            raise ConfigurationError("base_width/num_domains out of range")

    @property
    def patch_size(self) -> int:
        return self.image_size // 2 ** (1 + self.num_hidden_layers)

    @property
    def final_width(self) -> int:
        return self.base_width * 2**self.num_hidden_layers


def init_conv_weights(module: nn.Module) -> None:
    """Zero-mean normal (std 0.02) for convolution weights, zero bias."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def sample_latent(
    batch_size: int,
    latent_length: int = 16,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """i.i.d. standard normal latent codes [B, latent_length]."""
    return torch.randn(batch_size, latent_length, generator=generator, dtype=dtype)


def _check_labels(labels: torch.Tensor, num_domains: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_domains):
        raise ValueError(
            f"domain labels must lie in [0, {num_domains}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def build_generator_input(
    images: torch.Tensor,
    target_labels: torch.Tensor,
    style: torch.Tensor,
    num_domains: int,
) -> torch.Tensor:
    """Depth-wise concat of image, one-hot label maps, and style channel.

    Output is [B, 3+K+1, H, W]: channels 0-2 the image, the next K the
    one-hot domain maps, and the final channel the style vector broadcast
    row-wise (every row equals the style vector, so column w carries
    style[w]).
    """
    b, _, h, w = images.shape
    if style.shape != (b, w):
        raise ConfigurationError(
            f"style must be [B, {w}] to row-tile into a {h}x{w} channel, "
            f"got {tuple(style.shape)}"
        )
    _check_labels(target_labels, num_domains)
    onehot = torch.zeros(b, num_domains, dtype=images.dtype, device=images.device)
    onehot.scatter_(1, target_labels.view(-1, 1), 1.0)
    label_maps = onehot[:, :, None, None].expand(b, num_domains, h, w)
    style_channel = style[:, None, None, :].expand(b, 1, h, w)
    return torch.cat([images, label_maps, style_channel], dim=1)


class ResidualBlock(nn.Module):
    """3x3 stride-1 conv pair with instance norm and an additive skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Downsampling, residual bottleneck, upsampling; tanh RGB output."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.from_rgb = nn.Sequential(
            nn.Conv2d(spec.input_channels, w, 7, 1, 3),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
        )
        self.down1 = nn.Sequential(
            nn.Conv2d(w, w * 2, 4, 2, 1),
            nn.InstanceNorm2d(w * 2, affine=True),
            nn.ReLU(inplace=True),
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(w * 2, w * 4, 4, 2, 1),
            nn.InstanceNorm2d(w * 4, affine=True),
            nn.ReLU(inplace=True),
        )
        self.bottleneck = nn.Sequential(
            *[ResidualBlock(w * 4) for _ in range(spec.num_residual_blocks)]
        )
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(w * 4, w * 2, 4, 2, 1),
            nn.InstanceNorm2d(w * 2, affine=True),
            nn.ReLU(inplace=True),
        )
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(w * 2, w, 4, 2, 1),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
        )
        self.to_rgb = nn.Sequential(nn.Conv2d(w, 3, 7, 1, 3), nn.Tanh())
        self.apply(init_conv_weights)

    def _stages(self):
        return [
            ("from_rgb", self.from_rgb),
            ("down1", self.down1),
            ("down2", self.down2),
            ("bottleneck", self.bottleneck),
            ("up1", self.up1),
            ("up2", self.up2),
            ("to_rgb", self.to_rgb),
        ]

    def forward(
        self,
        images: torch.Tensor,
        target_labels: torch.Tensor,
        style: torch.Tensor,
    ) -> torch.Tensor:
        x = build_generator_input(images, target_labels, style, self.spec.num_domains)
        out = x
        for _, stage in self._stages():
            out = stage(out)
        if not torch.isfinite(out).all():
            self._diagnose_non_finite(x)
        return out

    def _diagnose_non_finite(self, x: torch.Tensor) -> None:
        with torch.no_grad():
            out = x
            for name, stage in self._stages():
                out = stage(out)
                if not torch.isfinite(out).all():
                    raise FloatingPointError(
                        f"non-finite activations in generator stage {name!r}"
                    )
        raise FloatingPointError("non-finite activations in generator input")

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Bottleneck feature map of an image without conditioning.

        Label and style channels are zeroed so the encoder depends on the
        image alone; this is the auto-encoder view used for latent-space
        analysis.
        """
        b, _, h, w = images.shape
        zeros_labels = torch.zeros(
            b, self.spec.num_domains, h, w, dtype=images.dtype, device=images.device
        )
        zeros_style = torch.zeros(b, 1, h, w, dtype=images.dtype, device=images.device)
        x = torch.cat([images, zeros_labels, zeros_style], dim=1)
        x = self.from_rgb(x)
        x = self.down1(x)
        x = self.down2(x)
        return self.bottleneck(x)


def extract_latent(generator: Generator, images: torch.Tensor) -> torch.Tensor:
    """Spatially average-pooled bottleneck features, [B, 4*base_width]."""
    return generator.encode(images).mean(dim=(2, 3))


class StyleExtractor(nn.Module):
    """Shared MLP trunk with one unshared branch per target domain."""

    def __init__(self, spec: StyleExtractorSpec):
        super().__init__()
        self.spec = spec
        shared: list[nn.Module] = []
        in_width = spec.latent_length
        for _ in range(spec.shared_layers):
            shared += [nn.Linear(in_width, spec.hidden_width), nn.ReLU(inplace=True)]
            in_width = spec.hidden_width
        self.shared = nn.Sequential(*shared)
        branches = []
        for _ in range(spec.num_domains):
            layers: list[nn.Module] = []
            for _ in range(spec.unshared_layers_per_domain - 1):
                layers += [nn.Linear(spec.hidden_width, spec.hidden_width), nn.ReLU(inplace=True)]
            # final layer is linear so style codes may be negative
            layers.append(nn.Linear(spec.hidden_width, spec.style_length))
            branches.append(nn.Sequential(*layers))
        self.branches = nn.ModuleList(branches)

    def forward(self, z: torch.Tensor, target_domains: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.spec.latent_length:
            raise ValueError(
                f"latent codes must have length {self.spec.latent_length}, "
                f"got {z.shape[1]}"
            )
        _check_labels(target_domains, self.spec.num_domains)
        h = self.shared(z)
        stacked = torch.stack([branch(h) for branch in self.branches], dim=1)
        index = target_domains.view(-1, 1, 1).expand(-1, 1, self.spec.style_length)
        return stacked.gather(1, index).squeeze(1)


class Discriminator(nn.Module):
    """Strided Leaky ReLU convnet without normalization.

    Emits a patch map of raw critic scores and per-domain classification
    logits from a kernel covering the full remaining spatial extent.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = [
            nn.Conv2d(3, spec.base_width, 4, 2, 1),
            nn.LeakyReLU(0.01),
        ]
        width = spec.base_width
        for _ in range(spec.num_hidden_layers):
            layers += [nn.Conv2d(width, width * 2, 4, 2, 1), nn.LeakyReLU(0.01)]
            width *= 2
        self.body = nn.Sequential(*layers)
        self.src_head = nn.Conv2d(width, 1, 3, 1, 1)
        self.cls_head = nn.Conv2d(width, spec.num_domains, spec.patch_size, 1, 0)
        self.apply(init_conv_weights)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if images.shape[-1] != self.spec.image_size:
            raise ConfigurationError(
                f"discriminator expects {self.spec.image_size}px images, "
                f"got {images.shape[-1]}px"
            )
        h = self.body(images)
        src = self.src_head(h)
        logits = self.cls_head(h).view(images.shape[0], self.spec.num_domains)
        return src, logits


def generator_stage_shapes(spec: GeneratorSpec) -> list[tuple[str, int, int]]:
    """(stage name, channels, spatial size) after each generator stage."""
    w, h = spec.base_width, spec.image_size
    return [
        ("from_rgb", w, h),
        ("down1", w * 2, h // 2),
        ("down2", w * 4, h // 4),
        ("bottleneck", w * 4, h // 4),
        ("up1", w * 2, h // 2),
        ("up2", w, h),
        ("to_rgb", 3, h),
    ]


def discriminator_output_shapes(
    spec: DiscriminatorSpec,
) -> tuple[tuple[int, int, int], tuple[int]]:
    """Shapes of (src patch map, class logits) per item."""
    return (1, spec.patch_size, spec.patch_size), (spec.num_domains,)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

"""Training configuration: schema, defaults, and strict file parsing.

Config files are TOML-style text: ``key = value`` pairs, one level of
``[section]`` headers, ``#`` comments, strings, numbers, booleans, and
single-line arrays. Unknown keys are hard errors so typos never pass
silently; missing keys fall back to the documented defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data_pipeline import ConfigurationError, DatasetSpec, SyntheticDomainConfig
from .losses import LossWeights
from .models import DiscriminatorSpec, GeneratorSpec, StyleExtractorSpec


@dataclass(frozen=True)
class GeneratorParams:
    base_width: int = 64
    num_residual_blocks: int = 9


@dataclass(frozen=True)
class StyleExtractorParams:
    latent_length: int = 16
    hidden_width: int = 512
    shared_layers: int = 4
    unshared_layers_per_domain: int = 3


@dataclass(frozen=True)
class DiscriminatorParams:
    base_width: int = 64
    num_hidden_layers: int = 5


@dataclass(frozen=True)
class TrainConfig:
    """Full hyperparameter record for one training run."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    synthetic: SyntheticDomainConfig = field(default_factory=SyntheticDomainConfig)
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    style_extractor: StyleExtractorParams = field(default_factory=StyleExtractorParams)
    discriminator: DiscriminatorParams = field(default_factory=DiscriminatorParams)
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 16
    max_iterations: int = 400_000
    lr_initial: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    n_critic: int = 5
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_iterations < 0:
            raise ConfigurationError("max_iterations must be >= 0")
        if self.lr_initial <= 0 or self.adam_beta1 < 0 or self.adam_beta2 < 0:
            raise ConfigurationError("optimizer hyperparameters out of range")
        if self.n_critic < 1:
            raise ConfigurationError("n_critic must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            image_size=self.dataset.image_size,
            num_domains=self.dataset.num_domains,
            base_width=self.generator.base_width,
            num_residual_blocks=self.generator.num_residual_blocks,
        )

    def style_extractor_spec(self) -> StyleExtractorSpec:
        return StyleExtractorSpec(
            num_domains=self.dataset.num_domains,
            style_length=self.dataset.image_size,
            latent_length=self.style_extractor.latent_length,
            hidden_width=self.style_extractor.hidden_width,
            shared_layers=self.style_extractor.shared_layers,
            unshared_layers_per_domain=self.style_extractor.unshared_layers_per_domain,
        )

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(
            image_size=self.dataset.image_size,
            num_domains=self.dataset.num_domains,
            base_width=self.discriminator.base_width,
            num_hidden_layers=self.discriminator.num_hidden_layers,
        )

    def to_dict(self) -> dict:
        tree = asdict(self)
        for section in tree.values():
            if isinstance(section, dict):
                for key, value in section.items():
                    if isinstance(value, tuple):
                        section[key] = list(value)
        return tree

    @classmethod
    def from_dict(cls, tree: dict) -> "TrainConfig":
        return build_config(copy.deepcopy(tree), source="<dict>")

    def replace(self, **kwargs) -> "TrainConfig":
        tree = self.to_dict()
        tree.update(kwargs)
        return TrainConfig.from_dict(tree)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# file parsing

_INT_RE = re.compile(r"^[+-]?\d[\d_]*$")
_BARE_KEY_RE = re.compile(r"^[A-Za-z0-9_-]+$")


def _parse_scalar(token: str, where: str):
    token = token.strip()
    if token.startswith('"'):
        if not token.endswith('"') or len(token) < 2:
            raise ConfigurationError(f"{where}: unterminated string {token!r}")
        body = token[1:-1]
        return body.replace('\\"', '"').replace("\\\\", "\\")
    if token in ("true", "false"):
        return token == "true"
    if _INT_RE.match(token):
        return int(token.replace("_", ""))
    try:
        return float(token)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse value {token!r}") from None


def _split_array(body: str, where: str) -> list[str]:
    items, depth, current, in_string = [], 0, "", False
    for ch in body:
        if ch == '"' and (not current or current[-1] != "\\"):
            in_string = not in_string
        if ch == "," and not in_string:
            items.append(current)
            current = ""
        else:
            current += ch
    if current.strip():
        items.append(current)
    if in_string:
        raise ConfigurationError(f"{where}: unterminated string in array")
    return items


def _strip_comment(line: str) -> str:
    out, in_string = [], False
    for ch in line:
        if ch == '"' and (not out or out[-1] != "\\"):
            in_string = not in_string
        if ch == "#" and not in_string:
            break
        out.append(ch)
    return "".join(out)


def parse_config_text(text: str, source: str = "<string>") -> dict:
    """Parse config text into a {key: value, section: {key: value}} tree."""
    tree: dict = {}
    section: dict | None = None
    section_name = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigurationError(f"{where}: malformed section header {line!r}")
            section_name = line[1:-1].strip()
            if not _BARE_KEY_RE.match(section_name):
                raise ConfigurationError(f"{where}: invalid section name {section_name!r}")
            if section_name in tree:
                raise ConfigurationError(f"{where}: duplicate section [{section_name}]")
            section = {}
            tree[section_name] = section
            continue
        if "=" not in line:
            raise ConfigurationError(f"{where}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not _BARE_KEY_RE.match(key):
            raise ConfigurationError(f"{where}: invalid key {key!r}")
        target = tree if section is None else section
        path = key if section is None else f"{section_name}.{key}"
        if key in target:
            raise ConfigurationError(f"{where}: duplicate key {path}")
        value = value.strip()
        if value.startswith("["):
            if not value.endswith("]"):
                raise ConfigurationError(f"{where}: arrays must be single-line")
            target[key] = [
                _parse_scalar(item, where) for item in _split_array(value[1:-1], where)
            ]
        else:
            target[key] = _parse_scalar(value, where)
    return tree


def _coerce(value, expected: str, path: str):
    if expected == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected integer, got {value!r}")
        return value
    if expected == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected number, got {value!r}")
        return float(value)
    if expected == "str":
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected string, got {value!r}")
        return value
    if expected == "str_list":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigurationError(f"{path}: expected array of strings, got {value!r}")
        return tuple(value)
    if expected == "float_list":
        if not isinstance(value, list) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
        ):
            raise ConfigurationError(f"{path}: expected array of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if expected == "crop":
        if value is None or value == "none":
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected integer or \"none\", got {value!r}")
        return value
    raise AssertionError(expected)


_SCHEMA = {
    None: {
        "batch_size": "int",
        "max_iterations": "int",
        "lr_initial": "float",
        "adam_beta1": "float",
        "adam_beta2": "float",
        "n_critic": "int",
        "checkpoint_every": "int",
        "seed": "int",
    },
    "dataset": {
        "root_path": "str",
        "domain_names": "str_list",
        "image_size": "int",
        "crop_size": "crop",
    },
    "synthetic": {
        "num_per_domain": "int",
        "shape_vocabulary": "str_list",
        "hue_centers": "float_list",
        "hue_jitter": "float",
        "texture_frequencies": "float_list",
        "texture_amplitude": "float",
    },
    "generator": {"base_width": "int", "num_residual_blocks": "int"},
    "style_extractor": {
        "latent_length": "int",
        "hidden_width": "int",
        "shared_layers": "int",
        "unshared_layers_per_domain": "int",
    },
    "discriminator": {"base_width": "int", "num_hidden_layers": "int"},
    "weights": {"lambda_gp": "float", "lambda_cls": "float", "lambda_rec": "float"},
}

_SECTION_TYPES = {
    "dataset": DatasetSpec,
    "synthetic": SyntheticDomainConfig,
    "generator": GeneratorParams,
    "style_extractor": StyleExtractorParams,
    "discriminator": DiscriminatorParams,
    "weights": LossWeights,
}

_OPTIONAL_KEYS = {"synthetic.hue_centers", "synthetic.texture_frequencies"}


def build_config(tree: dict, source: str = "<config>") -> TrainConfig:
    """Apply the schema to a parsed tree, rejecting unknown keys."""
    tree = dict(tree)
    kwargs: dict = {}
    for section_name, fields in _SCHEMA.items():
        if section_name is None:
            scope, scope_path = tree, ""
        else:
            scope = tree.pop(section_name, {})
            scope_path = section_name + "."
            if not isinstance(scope, dict):
                raise ConfigurationError(
                    f"{source}: {section_name} must be a section, got {scope!r}"
                )
            scope = dict(scope)
        section_kwargs = {}
        for key, expected in fields.items():
            if key in scope:
                value = scope.pop(key)
                path = scope_path + key
                if value is None and path in _OPTIONAL_KEYS:
                    continue
                section_kwargs[key] = _coerce(value, expected, f"{source}: {path}")
        for leftover in scope:
            if section_name is None:
                continue
            raise ConfigurationError(f"{source}: unknown key {scope_path}{leftover}")
        if section_name is None:
            kwargs.update(section_kwargs)
            for leftover in list(tree):
                if leftover not in _SCHEMA or not isinstance(tree.get(leftover), dict):
                    if leftover not in fields:
                        raise ConfigurationError(f"{source}: unknown key {leftover}")
        else:
            kwargs[section_name] = _SECTION_TYPES[section_name](**section_kwargs)
    for leftover in tree:
        raise ConfigurationError(f"{source}: unknown section [{leftover}]")
    return TrainConfig(**kwargs)


def parse_config(path: str | Path) -> TrainConfig:
    """Read and validate a config file; missing keys use defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    return build_config(parse_config_text(text, str(path)), str(path))

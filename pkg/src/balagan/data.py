"""Dataset ingestion, imbalanced split construction, and deterministic augmentation.

Images are carried as float tensors of shape (n, c, h, w) normalized to a
declared value range, [-1, 1] by default. All sampling and augmentation
randomness is derived from explicit integer seeds so every artifact is
reproducible from its recorded configuration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image

from .errors import DecodeError, EmptyRequest, InsufficientData

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "balagan-split v1"
DEFAULT_VALUE_RANGE = (-1.0, 1.0)

SOURCE_TAG = "A"
TARGET_TAG = "B"


@dataclass(frozen=True)
class SplitManifest:
    """Declarative record of which items belong to the source and target domains.

    Immutable after construction; safe to share between worker lanes.
    """

    source_items: tuple[str, ...]
    target_items: tuple[str, ...]
    seed: int

    def __post_init__(self):
        overlap = set(self.source_items) & set(self.target_items)
        if overlap:
            raise ValueError(f"source/target overlap on {len(overlap)} id(s), "
                             f"e.g. {sorted(overlap)[:3]}")

    @property
    def n_source(self) -> int:
        return len(self.source_items)

    @property
    def n_target(self) -> int:
        return len(self.target_items)

    @property
    def degenerate(self) -> bool:
        """True when either domain is empty."""
        return self.n_source == 0 or self.n_target == 0

    def domain_of(self, item_id: str) -> str:
        if item_id in set(self.source_items):
            return SOURCE_TAG
        if item_id in set(self.target_items):
            return TARGET_TAG
        raise KeyError(f"id not in manifest: {item_id}")

    def all_items(self) -> tuple[str, ...]:
        return self.source_items + self.target_items

    def to_text(self) -> str:
        """Canonical serialization: versioned header then one tab-separated line per item."""
        lines = [
            f"# {MANIFEST_VERSION}",
            f"# seed={self.seed}",
            f"# n_source={self.n_source}",
            f"# n_target={self.n_target}",
        ]
        lines += [f"{SOURCE_TAG}\t{item}" for item in self.source_items]
        lines += [f"{TARGET_TAG}\t{item}" for item in self.target_items]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        lines = text.splitlines()
        if not lines or lines[0] != f"# {MANIFEST_VERSION}":
            raise ValueError("not a recognized split manifest (bad or missing version header)")
        header = {}
        body_start = 0
        for i, line in enumerate(lines):
            if not line.startswith("# "):
                body_start = i
                break
            if "=" in line:
                key, _, value = line[2:].partition("=")
                header[key] = value
        else:
            body_start = len(lines)
        source, target = [], []
        for line in lines[body_start:]:
            if not line:
                continue
            tag, _, item = line.partition("\t")
            if tag == SOURCE_TAG:
                source.append(item)
            elif tag == TARGET_TAG:
                target.append(item)
            else:
                raise ValueError(f"unrecognized domain tag {tag!r} in manifest line {line!r}")
        manifest = cls(tuple(source), tuple(target), seed=int(header.get("seed", 0)))
        declared = (int(header.get("n_source", -1)), int(header.get("n_target", -1)))
        if declared != (manifest.n_source, manifest.n_target):
            raise ValueError(f"manifest header counts {declared} do not match body "
                             f"({manifest.n_source}, {manifest.n_target})")
        return manifest

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_text(Path(path).read_text())


def build_imbalanced_split(dataset_index, n_source: int, n_target: int,
                           seed: int) -> SplitManifest:
    """Sample an imbalanced source/target split without replacement.

    `dataset_index` is a list of (identifier, domain-tag) pairs with tags
    "A" (source) or "B" (target). A pure function of its arguments: the same
    index, sizes, and seed always produce the same manifest.
    """
    source_pool = [item for item, tag in dataset_index if tag == SOURCE_TAG]
    target_pool = [item for item, tag in dataset_index if tag == TARGET_TAG]
    if len(source_pool) < n_source:
        raise InsufficientData("source", n_source, len(source_pool))
    if len(target_pool) < n_target:
        raise InsufficientData("target", n_target, len(target_pool))
    rng = np.random.default_rng(seed)
    source = sorted(rng.choice(source_pool, size=n_source, replace=False)) if n_source else []
    target = sorted(rng.choice(target_pool, size=n_target, replace=False)) if n_target else []
    manifest = SplitManifest(tuple(source), tuple(target), seed=seed)
    if manifest.degenerate:
        logger.warning("degenerate split: |A|=%d, |B|=%d", manifest.n_source, manifest.n_target)
    return manifest


def index_from_directories(source_dir, target_dir, extensions=(".png", ".jpg", ".jpeg")):
    """Build a (path, tag) index from two image directories."""
    index = []
    for directory, tag in ((source_dir, SOURCE_TAG), (target_dir, TARGET_TAG)):
        for path in sorted(Path(directory).rglob("*")):
            if path.suffix.lower() in extensions and path.is_file():
                index.append((str(path), tag))
    return index


@dataclass
class ImageBatch:
    """Rank-4 image tensor (n, c, h, w) with a declared value range."""

    data: torch.Tensor
    value_range: tuple[float, float] = DEFAULT_VALUE_RANGE

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"expected rank-4 (n, c, h, w) data, got shape {tuple(self.data.shape)}")
        if self.data.shape[0] < 1:
            raise ValueError("batch must contain at least one image")
        lo, hi = self.value_range
        if not torch.isfinite(self.data).all():
            raise ValueError("batch contains non-finite values")
        if self.data.min() < lo - 1e-6 or self.data.max() > hi + 1e-6:
            raise ValueError(f"batch values exit declared range [{lo}, {hi}]")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.data.shape[2], self.data.shape[3])


def load_batch(manifest: SplitManifest, ids, resolution: tuple[int, int],
               value_range=DEFAULT_VALUE_RANGE) -> ImageBatch:
    """Decode, resize, and normalize the given manifest items, in id order."""
    ids = list(ids)
    if not ids:
        raise EmptyRequest("load_batch called with an empty id list")
    known = set(manifest.all_items())
    missing = [i for i in ids if i not in known]
    if missing:
        raise KeyError(f"ids not in manifest: {missing}")
    h, w = resolution
    arrays, offenders = [], []
    for item_id in ids:
        try:
            with Image.open(item_id) as img:
                img = img.convert("RGB").resize((w, h), Image.BILINEAR)
                arrays.append(np.asarray(img, dtype=np.float32) / 255.0)
        except (OSError, ValueError):
            offenders.append(item_id)
    if offenders:
        raise DecodeError(offenders)
    stacked = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()
    lo, hi = value_range
    return ImageBatch(stacked * (hi - lo) + lo, value_range=value_range)


@dataclass(frozen=True)
class AugmentationSpec:
    """One augmentation step: a kind, its parameters, and an application probability."""

    kind: str
    params: dict = field(default_factory=dict)
    probability: float = 1.0

    KINDS = ("crop", "flip", "color-jitter", "blur", "grayscale")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {self.KINDS}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")


@dataclass(frozen=True)
class AugmentationConfig:
    """Ordered augmentation pipeline with a base seed.

    Identical (config, draw_seed, image) triples produce bit-identical outputs.
    """

    specs: tuple[AugmentationSpec, ...]
    rng_seed: int = 0

    @classmethod
    def contrastive_default(cls, rng_seed: int = 0) -> "AugmentationConfig":
        """Standard style-encoder recipe: crop, flip, color jitter, grayscale, blur."""
        return cls(
            specs=(
                AugmentationSpec("crop", {"scale": (0.4, 1.0), "ratio": (0.75, 1.3333)}, 1.0),
                AugmentationSpec("flip", {}, 0.5),
                AugmentationSpec("color-jitter",
                                 {"brightness": 0.4, "contrast": 0.4,
                                  "saturation": 0.4, "hue": 0.1}, 0.8),
                AugmentationSpec("grayscale", {}, 0.2),
                AugmentationSpec("blur", {"kernel_size": 3, "sigma": (0.1, 2.0)}, 0.5),
            ),
            rng_seed=rng_seed,
        )


def _apply_spec(image: torch.Tensor, spec: AugmentationSpec, rng: np.random.Generator,
                value_range) -> torch.Tensor:
    lo, hi = value_range
    if spec.kind == "flip":
        return TF.hflip(image)
    if spec.kind == "crop":
        scale = spec.params.get("scale", (0.4, 1.0))
        ratio = spec.params.get("ratio", (0.75, 1.3333))
        h, w = image.shape[-2:]
        area = h * w
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = min(w, max(1, int(round(np.sqrt(target_area * aspect)))))
        ch = min(h, max(1, int(round(np.sqrt(target_area / aspect)))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        return TF.resized_crop(image, top, left, ch, cw, [h, w],
                               interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
    if spec.kind == "blur":
        kernel_size = spec.params.get("kernel_size", 3)
        sig_lo, sig_hi = spec.params.get("sigma", (0.1, 2.0))
        sigma = float(rng.uniform(sig_lo, sig_hi))
        return TF.gaussian_blur(image, kernel_size, [sigma, sigma])
    if spec.kind == "grayscale":
        return TF.rgb_to_grayscale(image, num_output_channels=image.shape[-3])
    if spec.kind == "color-jitter":
        # adjust_* expect [0, 1] input; convert, jitter, convert back.
        x = (image - lo) / (hi - lo)
        b = spec.params.get("brightness", 0.0)
        c = spec.params.get("contrast", 0.0)
        s = spec.params.get("saturation", 0.0)
        hue = spec.params.get("hue", 0.0)
        if b:
            x = TF.adjust_brightness(x, float(rng.uniform(max(0.0, 1 - b), 1 + b)))
        if c:
            x = TF.adjust_contrast(x, float(rng.uniform(max(0.0, 1 - c), 1 + c)))
        if s:
            x = TF.adjust_saturation(x, float(rng.uniform(max(0.0, 1 - s), 1 + s)))
        if hue:
            x = TF.adjust_hue(x, float(rng.uniform(-hue, hue)))
        return x.clamp(0.0, 1.0) * (hi - lo) + lo
    raise AssertionError(f"unhandled kind {spec.kind}")


def _apply_pipeline(image: torch.Tensor, config: AugmentationConfig,
                    rng: np.random.Generator, value_range) -> torch.Tensor:
    out = image
    fired = False
    for spec in config.specs:
        if rng.random() < spec.probability:
            out = _apply_spec(out, spec, rng, value_range)
            fired = True
    if not fired:
        return image
    lo, hi = value_range
    n_out = int((out < lo).sum() + (out > hi).sum())
    if n_out:
        logger.debug("clamping %d augmented value(s) back into [%s, %s]", n_out, lo, hi)
    return out.clamp(lo, hi)


def augment_pair(image: torch.Tensor, config: AugmentationConfig, draw_seed: int,
                 value_range=DEFAULT_VALUE_RANGE) -> tuple[torch.Tensor, torch.Tensor]:
    """Produce two independently augmented views of one (c, h, w) image.

    The two views consume one shared random stream seeded by
    (config.rng_seed, draw_seed), so outputs depend only on the arguments and
    never on scheduling.
    """
    rng = np.random.default_rng((config.rng_seed, draw_seed))
    view_a = _apply_pipeline(image, config, rng, value_range)
    view_b = _apply_pipeline(image, config, rng, value_range)
    return view_a, view_b

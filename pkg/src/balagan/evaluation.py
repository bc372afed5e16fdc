"""Evaluation: Frechet-distance scoring, bulk translation, diversity grids,
and the modality-count sweep.

Activation statistics accumulate streamwise in float64, so sharded and
in-memory computation agree to near machine precision. The matrix square
root inside the distance uses eigendecomposition of the symmetrized product
with eigenvalues clipped at zero.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .data import ImageBatch, SplitManifest
from .errors import DuplicateK, EmptyRequest, TooFewSamples
from .modality import assign_modalities, choose_k, train_style_encoder
from .networks import Generator
from .training import CachedLoader, load_checkpoint, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActivationStats:
    """Gaussian fit of feature activations: mean, unbiased covariance, count."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise TooFewSamples(f"need at least 2 samples, got {self.n}")
        asym = np.abs(self.sigma - self.sigma.T).max()
        if asym > 1e-8:
            raise ValueError(f"covariance asymmetry {asym:.2e} exceeds 1e-8")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def compute_activation_stats(images, feature_extractor) -> ActivationStats:
    """Accumulate mean and unbiased covariance of extracted features.

    `images` is a single ImageBatch or an iterable of them (a stream); results
    are identical either way and depend only on the stream's total content
    order, not on chunking.
    """
    if isinstance(images, ImageBatch):
        images = [images]
    n = 0
    s1 = None
    s2 = None
    for batch in images:
        with torch.no_grad():
            feats = feature_extractor(batch.data).double().numpy()
        if s1 is None:
            s1 = np.zeros(feats.shape[1])
            s2 = np.zeros((feats.shape[1], feats.shape[1]))
        n += feats.shape[0]
        s1 += feats.sum(axis=0)
        s2 += feats.T @ feats
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    mu = s1 / n
    sigma = (s2 - n * np.outer(mu, mu)) / (n - 1)
    sigma = (sigma + sigma.T) / 2
    return ActivationStats(mu=mu, sigma=sigma, n=n)


def _psd_sqrt(matrix: np.ndarray, what: str = "matrix") -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2)
    floor = -1e-8 * max(1.0, abs(vals).max())
    if vals.min() < floor:
        warnings.warn(f"{what} has negative eigenvalue {vals.min():.3e}; clipping at 0",
                      RuntimeWarning)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    a_half = _psd_sqrt(sigma_a, "covariance a")
    middle = a_half @ sigma_b @ a_half
    vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    if vals.min() < -1e-8 * max(1.0, abs(vals).max()):
        warnings.warn(f"covariance product has negative eigenvalue {vals.min():.3e}; "
                      "clipping at 0", RuntimeWarning)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def sqrt_of_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> np.ndarray:
    """Matrix S with S @ S = sigma_a @ sigma_b, for positive-definite inputs."""
    vals, vecs = np.linalg.eigh((sigma_a + sigma_a.T) / 2)
    if vals.min() <= 0:
        raise ValueError("sigma_a must be positive definite for the full matrix root")
    a_half = (vecs * np.sqrt(vals)) @ vecs.T
    a_half_inv = (vecs / np.sqrt(vals)) @ vecs.T
    return a_half @ _psd_sqrt(a_half @ sigma_b @ a_half, "covariance product") @ a_half_inv


def fid(a: ActivationStats, b: ActivationStats) -> float:
    """||mu_a - mu_b||^2 + tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^(1/2))."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
                 - 2.0 * _trace_sqrt_product(a.sigma, b.sigma))


class FrozenFeatureExtractor(nn.Module):
    """Fixed randomly-initialized convolutional embedder with a frozen seed.

    Hermetic stand-in for a pretrained extractor: deterministic across runs,
    so desk-scale scores are comparable with themselves (not with published
    numbers, which need the standard pretrained extractor).
    """

    def __init__(self, seed: int = 2024, feature_dim: int = 64):
        super().__init__()
        w = max(4, feature_dim // 4)
        self.extractor_id = f"frozen-conv-s{seed}-w{w}"
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.stage1 = nn.Sequential(nn.Conv2d(3, w, 4, stride=2, padding=1),
                                        nn.LeakyReLU(0.2))
            self.stage2 = nn.Sequential(nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
                                        nn.LeakyReLU(0.2))
            self.stage3 = nn.Sequential(nn.Conv2d(2 * w, 4 * w, 3, padding=1),
                                        nn.LeakyReLU(0.2))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        # concatenated per-stage pooled responses: keeps low-level statistics
        # (color, contrast) that a deep pooled head would wash out
        h1 = self.stage1(x)
        h2 = self.stage2(h1)
        h3 = self.stage3(h2)
        return torch.cat([h.mean(dim=(2, 3)) for h in (h1, h2, h3)], dim=1)


def load_feature_extractor(name: str = "frozen", seed: int = 2024, feature_dim: int = 64):
    """Adapter slot: "frozen" (default, hermetic) or "inception-v3" (pretrained)."""
    if name == "frozen":
        return FrozenFeatureExtractor(seed=seed, feature_dim=feature_dim)
    if name == "inception-v3":
        from torchvision import models
        try:
            net = models.inception_v3(weights=models.Inception_V3_Weights.DEFAULT)
        except Exception as exc:
            raise RuntimeError(
                "pretrained inception-v3 weights are unavailable in this environment; "
                "use the frozen extractor or provide weights locally") from exc
        net.fc = nn.Identity()
        net.eval()
        net.extractor_id = "inception-v3-pool"
        return net
    raise ValueError(f"unknown feature extractor {name!r}")


def pair_sources_with_references(source_ids, reference_ids, pairing_seed: int):
    """One reference per source, drawn uniformly from the pool; reproducible."""
    source_ids, reference_ids = list(source_ids), list(reference_ids)
    if not source_ids or not reference_ids:
        raise EmptyRequest("need non-empty source and reference id lists")
    rng = np.random.default_rng(pairing_seed)
    picks = rng.integers(0, len(reference_ids), size=len(source_ids))
    return [(src, reference_ids[int(i)]) for src, i in zip(source_ids, picks)]


def translate_dataset(g: Generator, loader: CachedLoader, source_ids, reference_ids,
                      pairing_seed: int, batch_size: int = 16):
    """Translate every source once; returns (pairs, stream of ImageBatch chunks)."""
    pairs = pair_sources_with_references(source_ids, reference_ids, pairing_seed)

    def stream():
        g.eval()
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            x = loader.load([src for src, _ in chunk])
            y = loader.load([ref for _, ref in chunk])
            with torch.no_grad():
                out = g(x.data, y.data)
            yield ImageBatch(out, value_range=x.value_range)

    return pairs, stream()


def diversity_grid(g: Generator, sources: ImageBatch, references: ImageBatch,
                   gutter: int = 2) -> torch.Tensor:
    """(m, n) grid image: cell (i, j) = G(source_i, reference_j), in [0, 1].

    Row i shares source_i, column j shares reference_j; cells are assembled
    row-major with white gutters.
    """
    g.eval()
    m, n = len(sources), len(references)
    c, h, w = sources.data.shape[1:]
    lo, hi = sources.value_range
    grid = torch.ones(c, m * h + (m + 1) * gutter, n * w + (n + 1) * gutter)
    for j in range(n):
        ref = references.data[j:j + 1].expand(m, -1, -1, -1)
        with torch.no_grad():
            cells = g(sources.data, ref)
        cells = (cells - lo) / (hi - lo)
        for i in range(m):
            top = gutter + i * (h + gutter)
            left = gutter + j * (w + gutter)
            grid[:, top:top + h, left:left + w] = cells[i]
    return grid


def save_grid(grid: torch.Tensor, path) -> None:
    """Write a [0, 1] grid tensor (c, H, W) as an 8-bit PNG."""
    from PIL import Image
    array = (grid.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(array).save(path)


def evaluate_checkpoint(checkpoint_path, manifest: SplitManifest, cfg: RunConfig,
                        extractor=None) -> dict:
    """FID of translated source-to-target images against the real target pool."""
    state = load_checkpoint(checkpoint_path)
    loader = CachedLoader(manifest, cfg.data.resolution, cfg.data.value_range)
    if extractor is None:
        extractor = load_feature_extractor(cfg.eval.extractor, cfg.eval.extractor_seed,
                                           cfg.eval.feature_dim)
    n_eval = min(cfg.eval.n_eval, manifest.n_source)
    source_ids = list(manifest.source_items)[:n_eval]
    _, fakes = translate_dataset(state.g, loader, source_ids,
                                 list(manifest.target_items), cfg.eval.pairing_seed)
    fake_stats = compute_activation_stats(fakes, extractor)
    real_batches = (loader.load(list(manifest.target_items)[i:i + 16])
                    for i in range(0, manifest.n_target, 16))
    real_stats = compute_activation_stats(real_batches, extractor)
    return {
        "extractor_id": getattr(extractor, "extractor_id", "custom"),
        "n_real": real_stats.n,
        "n_fake": fake_stats.n,
        "fid": fid(fake_stats, real_stats),
    }


def k_sweep(cfg: RunConfig, k_values, workdir=".", encoder=None) -> list[dict]:
    """Train and score one model per modality count; failures are recorded
    per row and the sweep continues.

    Writes `sweep.csv` under <workdir>/runs/<name>-sweep/ alongside the
    per-k assignment files and run directories.
    """
    k_values = list(k_values)
    seen = set()
    for k in k_values:
        if k in seen:
            raise DuplicateK(f"k={k} listed twice")
        seen.add(k)

    manifest = SplitManifest.load(cfg.data.manifest)
    for k in k_values:
        choose_k(manifest.n_source, manifest.n_target, override=k,
                 allow_invalid=cfg.modalities.allow_invalid_k)

    sweep_dir = Path(workdir) / "runs" / f"{cfg.name}-sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)

    if encoder is None:
        from .data import AugmentationConfig
        encoder, _ = train_style_encoder(
            manifest, AugmentationConfig.contrastive_default(cfg.trainer.seed),
            hyper={"temperature": cfg.modalities.temperature,
                   "batch_size": cfg.modalities.batch_size,
                   "steps": cfg.modalities.steps,
                   "learning_rate": cfg.modalities.learning_rate,
                   "seed": cfg.trainer.seed,
                   "embedding_dim": cfg.modalities.embedding_dim,
                   "projection_dim": cfg.modalities.projection_dim},
            resolution=cfg.data.resolution)

    rows = []
    for k in k_values:
        try:
            assignment = assign_modalities(manifest, encoder, k, seed=cfg.trainer.seed,
                                           resolution=cfg.data.resolution)
            assign_path = sweep_dir / f"k{k}.assign"
            assignment.save(assign_path)
            cfg_k = replace(cfg, name=f"{cfg.name}-sweep-k{k}",
                            modalities=replace(cfg.modalities, k=k,
                                               assignment=str(assign_path)))
            run_dir = train(cfg_k, workdir=workdir)
            ckpt = run_dir / f"ckpt-{cfg_k.trainer.steps}"
            report = evaluate_checkpoint(ckpt, manifest, cfg_k)
            rows.append({"k": k, "fid": report["fid"], "error": ""})
            logger.info("k=%d: FID %.4f", k, report["fid"])
        except Exception as exc:   # record and continue with the other k values
            logger.exception("k=%d failed", k)
            rows.append({"k": k, "fid": None, "error": f"{type(exc).__name__}: {exc}"})

    table = "k,fid,error\n" + "\n".join(
        f"{r['k']},{'' if r['fid'] is None else repr(r['fid'])},{r['error']}" for r in rows)
    (sweep_dir / "sweep.csv").write_text(table + "\n")
    return rows


def write_fid_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

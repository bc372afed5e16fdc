"""Latent modality discovery: contrastive style embedding + spherical k-means.

The style encoder is trained so that two augmented views of the same image
attract and views of different images repel (normalized temperature-scaled
cross-entropy). Clustering runs on the L2-normalized backbone embeddings,
maximizing cosine similarity to unit-norm centroids.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AugmentationConfig, SplitManifest, augment_pair, load_batch
from .errors import DegenerateBatch, InvalidK, NonFiniteLoss, TooFewPoints

logger = logging.getLogger(__name__)

ASSIGNMENT_VERSION = "balagan-assign v1"


def nt_xent_loss(embeddings: torch.Tensor, temperature: float) -> torch.Tensor:
    """Contrastive loss over a (2n, d) batch where rows (2i, 2i+1) are positives.

    Embeddings are L2-normalized internally, so the loss is invariant to
    positive rescaling of its input. Mean over all 2n anchors of
    -log(exp(cos(z_i, z_pos)/t) / sum_{j != i} exp(cos(z_i, z_j)/t)).
    """
    if embeddings.ndim != 2 or embeddings.shape[0] % 2 != 0:
        raise ValueError(f"expected (2n, d) embeddings, got {tuple(embeddings.shape)}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    m = embeddings.shape[0]
    if m < 4:
        raise DegenerateBatch(f"need at least 2 pairs (4 rows) for negatives, got {m} rows")
    z = F.normalize(embeddings, dim=1)
    logits = (z @ z.T) / temperature
    self_mask = torch.eye(m, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))  # anchor never scores against itself
    targets = torch.arange(m, device=z.device) ^ 1  # partner of 2i is 2i+1 and vice versa
    return F.cross_entropy(logits, targets)


class StyleEncoder(nn.Module):
    """Small convolutional embedder with a 2-layer projection head.

    `forward` returns the backbone embedding (used for clustering);
    `project` returns the projection-head output (used by the contrastive loss).
    """

    def __init__(self, in_channels: int = 3, base_width: int = 32,
                 embedding_dim: int = 128, projection_dim: int = 64):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.projection_dim = projection_dim
        w = base_width
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(4 * w, embedding_dim)
        self.projector = nn.Sequential(
            nn.Linear(embedding_dim, embedding_dim), nn.ReLU(inplace=True),
            nn.Linear(embedding_dim, projection_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x).flatten(1))

    def project(self, x: torch.Tensor) -> torch.Tensor:
        return self.projector(self(x))


def encoder_hash(encoder: nn.Module) -> str:
    """Short content hash of an encoder's parameters, for assignment headers."""
    buf = io.BytesIO()
    torch.save(encoder.state_dict(), buf)
    return hashlib.sha256(buf.getvalue()).hexdigest()[:16]


def train_style_encoder(manifest: SplitManifest, aug: AugmentationConfig, hyper: dict,
                        items=None, resolution=(64, 64),
                        encoder: StyleEncoder | None = None):
    """Train the style encoder contrastively on augmented view pairs.

    `hyper` keys: temperature, batch_size, steps, learning_rate, seed
    (all optional except steps). Returns (encoder, per-step loss log).
    """
    temperature = float(hyper.get("temperature", 0.5))
    batch_size = int(hyper.get("batch_size", 16))
    steps = int(hyper.get("steps", 0))
    lr = float(hyper.get("learning_rate", 1e-3))
    seed = int(hyper.get("seed", 0))
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    items = list(items if items is not None else manifest.source_items)
    if not items:
        raise ValueError("no items to train on")

    torch.manual_seed(seed)
    if encoder is None:
        encoder = StyleEncoder(embedding_dim=int(hyper.get("embedding_dim", 128)),
                               projection_dim=int(hyper.get("projection_dim", 64)))
    optimizer = torch.optim.Adam(encoder.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    cache: dict[str, torch.Tensor] = {}
    log: list[float] = []

    encoder.train()
    for step in range(steps):
        picked = [items[int(i)] for i in rng.integers(0, len(items), size=batch_size)]
        views = []
        for item_id in picked:
            if item_id not in cache:
                cache[item_id] = load_batch(manifest, [item_id], resolution).data[0]
            a, b = augment_pair(cache[item_id], aug, draw_seed=int(rng.integers(0, 2**31)))
            views += [a, b]
        batch = torch.stack(views)
        loss = nt_xent_loss(encoder.project(batch), temperature)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step, "contrastive loss")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append(float(loss.detach()))
        if step % 50 == 0:
            logger.info("style encoder step %d: loss %.4f", step, log[-1])
    encoder.eval()
    return encoder, log


@torch.no_grad()
def embed(encoder: StyleEncoder, batch) -> np.ndarray:
    """Map an ImageBatch to (n, embedding_dim) unit-norm rows."""
    encoder.eval()
    z = F.normalize(encoder(batch.data), dim=1)
    return z.numpy()


@dataclass
class ClusterModel:
    """Spherical k-means result: unit centroids, assignments, cosine objective."""

    centroids: np.ndarray          # (k, d), unit rows
    assignments: np.ndarray        # (n,), values in [0, k)
    objective: float               # sum of cos(point, assigned centroid)
    history: list = field(default_factory=list)  # objective after each iteration

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # seeded k-means++ on a content-sorted view, so initialization (and hence
    # the fit) is equivariant under permutation of the input rows
    order = np.lexsort(points.T[::-1])
    pts = points[order]
    n = pts.shape[0]
    chosen = [int(rng.integers(0, n))]
    for _ in range(1, k):
        sims = pts @ pts[chosen].T            # (n, chosen)
        dist = 1.0 - sims.max(axis=1)         # cosine distance to nearest centroid
        dist = np.clip(dist, 0.0, None)
        total = dist.sum()
        if total <= 0:
            chosen.append(int(rng.integers(0, n)))
        else:
            chosen.append(int(rng.choice(n, p=dist / total)))
    return pts[chosen].copy()


def spherical_kmeans(points: np.ndarray, k: int, init_seed: int = 0,
                     max_iter: int = 100, tol: float = 1e-6) -> ClusterModel:
    """Cluster unit-norm rows by cosine similarity; objective is non-decreasing.

    Empty clusters are repaired by donating the point with the lowest cosine
    to its current centroid (from a cluster holding at least two points).
    """
    points = _normalize_rows(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise TooFewPoints(f"{n} points cannot fill {k} clusters")
    rng = np.random.default_rng(init_seed)
    centroids = _kmeans_pp_init(points, k, rng)

    assignments = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    prev = -np.inf
    for _ in range(max_iter):
        sims = points @ centroids.T
        assignments = sims.argmax(axis=1)

        counts = np.bincount(assignments, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            donors = np.flatnonzero(counts[assignments] >= 2)
            worst = donors[np.argmin(sims[donors, assignments[donors]])]
            counts[assignments[worst]] -= 1
            assignments[worst] = empty
            counts[empty] = 1

        for j in range(k):
            member_sum = points[assignments == j].sum(axis=0)
            norm = np.linalg.norm(member_sum)
            if norm > 1e-12:
                centroids[j] = member_sum / norm

        objective = float((points * centroids[assignments]).sum())
        history.append(objective)
        if objective - prev < tol:
            break
        prev = objective

    return ClusterModel(centroids=centroids, assignments=assignments,
                        objective=history[-1], history=history)


def choose_k(n_source: int, n_target: int, override: int | None = None,
             allow_invalid: bool = False) -> int:
    """Smallest k with n_target >= n_source / k, or a validated override.

    The rule keeps discovered modalities no richer than the target domain.
    Overrides above the minimum are always valid; below it, InvalidK is raised
    unless `allow_invalid` downgrades the violation to a warning.
    """
    if n_source < 1 or n_target < 1:
        raise ValueError("both domains must be non-empty to choose k")
    minimal = math.ceil(n_source / n_target)
    if override is None:
        return minimal
    if override < 1:
        raise InvalidK(f"k must be >= 1, got {override}")
    if n_target * override < n_source:
        msg = (f"k={override} violates the balance rule: "
               f"n_target={n_target} < n_source/k={n_source / override:.1f} "
               f"(minimal valid k is {minimal})")
        if not allow_invalid:
            raise InvalidK(msg)
        logger.warning("%s -- proceeding as requested", msg)
    return override


@dataclass
class ModalityAssignment:
    """Mapping from image id to class index over (A_1..A_k, B) or (A_1..A_ks, B_1..B_kt)."""

    items: dict                   # id -> class index, classes ordered source-first
    n_source_classes: int
    n_target_classes: int
    seed: int
    encoder_hash: str = ""

    @property
    def n_classes(self) -> int:
        return self.n_source_classes + self.n_target_classes

    @property
    def mode(self) -> str:
        return "imbalanced" if self.n_target_classes == 1 else "balanced"

    def class_members(self) -> list:
        members = [[] for _ in range(self.n_classes)]
        for item_id, cls in self.items.items():
            members[cls].append(item_id)
        return members

    def target_classes(self) -> set:
        return set(range(self.n_source_classes, self.n_classes))

    def histogram(self) -> np.ndarray:
        return np.bincount(list(self.items.values()), minlength=self.n_classes)

    def to_text(self) -> str:
        lines = [
            f"# {ASSIGNMENT_VERSION}",
            f"# k={self.n_source_classes}",
            f"# k_target={self.n_target_classes}",
            f"# seed={self.seed}",
            f"# encoder={self.encoder_hash}",
        ]
        lines += [f"{item_id}\t{cls}" for item_id, cls in self.items.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModalityAssignment":
        lines = text.splitlines()
        if not lines or lines[0] != f"# {ASSIGNMENT_VERSION}":
            raise ValueError("not a recognized assignment file (bad or missing version header)")
        header = {}
        body = []
        for line in lines[1:]:
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                header[key] = value
            elif line:
                item_id, _, idx = line.rpartition("\t")
                body.append((item_id, int(idx)))
        return cls(items=dict(body),
                   n_source_classes=int(header["k"]),
                   n_target_classes=int(header.get("k_target", 1)),
                   seed=int(header.get("seed", 0)),
                   encoder_hash=header.get("encoder", ""))

    def save(self, path) -> None:
        from pathlib import Path
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "ModalityAssignment":
        from pathlib import Path
        return cls.from_text(Path(path).read_text())


def _embed_items(manifest, encoder, items, resolution, batch_size=64):
    chunks = []
    for start in range(0, len(items), batch_size):
        batch = load_batch(manifest, items[start:start + batch_size], resolution)
        chunks.append(embed(encoder, batch))
    return np.concatenate(chunks, axis=0)


def assign_modalities(manifest: SplitManifest, encoder: StyleEncoder, k: int,
                      seed: int, resolution=(64, 64)) -> ModalityAssignment:
    """Partition source items into k style clusters; all target items form class k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    source = list(manifest.source_items)
    embeddings = _embed_items(manifest, encoder, source, resolution)
    model = spherical_kmeans(embeddings, k, init_seed=seed)
    items = {item_id: int(cls) for item_id, cls in zip(source, model.assignments)}
    items.update({item_id: k for item_id in manifest.target_items})
    return ModalityAssignment(items=items, n_source_classes=k, n_target_classes=1,
                              seed=seed, encoder_hash=encoder_hash(encoder))


def assign_modalities_balanced(manifest: SplitManifest, encoder: StyleEncoder,
                               k_s: int, k_t: int, seed: int,
                               resolution=(64, 64)) -> ModalityAssignment:
    """Balanced setting: cluster both domains, classes (A_1..A_ks, B_1..B_kt)."""
    source, target = list(manifest.source_items), list(manifest.target_items)
    src_model = spherical_kmeans(_embed_items(manifest, encoder, source, resolution),
                                 k_s, init_seed=seed)
    tgt_model = spherical_kmeans(_embed_items(manifest, encoder, target, resolution),
                                 k_t, init_seed=seed + 1)
    items = {item_id: int(cls) for item_id, cls in zip(source, src_model.assignments)}
    items.update({item_id: k_s + int(cls) for item_id, cls in zip(target, tgt_model.assignments)})
    return ModalityAssignment(items=items, n_source_classes=k_s, n_target_classes=k_t,
                              seed=seed, encoder_hash=encoder_hash(encoder))


def cluster_diagnostics(points: np.ndarray, model: ClusterModel) -> dict:
    """Unthresholded cluster-quality readouts: cosine silhouette and sizes."""
    points = _normalize_rows(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    k = model.k
    sizes = np.bincount(model.assignments, minlength=k)
    if k == 1 or n <= k:
        silhouette = 0.0
    else:
        dist = 1.0 - points @ points.T
        scores = []
        for i in range(n):
            own = model.assignments[i]
            mask_own = model.assignments == own
            n_own = mask_own.sum()
            a = dist[i, mask_own].sum() / max(n_own - 1, 1) if n_own > 1 else 0.0
            b = min(dist[i, model.assignments == other].mean()
                    for other in range(k) if other != own and (model.assignments == other).any())
            scores.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
        silhouette = float(np.mean(scores))
    return {"silhouette": silhouette, "cluster_sizes": sizes.tolist(),
            "objective": model.objective, "mean_cosine": model.objective / n}


def cluster_purity(assignments: np.ndarray, labels) -> float:
    """Fraction of points whose cluster's majority label matches their own."""
    labels = np.asarray(labels)
    correct = 0
    for cls in np.unique(assignments):
        members = labels[assignments == cls]
        correct += np.bincount(members).max() if members.size else 0
    return correct / len(labels)

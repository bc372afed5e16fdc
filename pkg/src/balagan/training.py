"""Cross-modal adversarial training over all ordered class pairs.

A single controller owns all parameter mutation. Batches draw the source and
reference classes uniformly over classes (not over raw images) so the rare
target class is visited as often as each source modality; every ordered class
pair therefore has positive probability each step.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import ImageBatch, SplitManifest, load_batch
from .errors import (ConfigError, EmptyClass, InconsistentAssignment,
                     NonFiniteLoss)
from .losses import (LossWeights, classification_loss, feature_matching_loss,
                     hinge_d_loss, hinge_g_loss, r1_penalty,
                     reconstruction_loss, total_d_loss, total_g_loss)
from .modality import ModalityAssignment
from .networks import Discriminator, Generator

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ClassSet:
    """Ordered training classes: (A_1..A_k, B) or (A_1..A_ks, B_1..B_kt)."""

    mode: str
    names: tuple
    members: tuple                 # tuple of id-tuples, one per class
    target_classes: frozenset

    @property
    def n_classes(self) -> int:
        return len(self.names)


def build_class_set(assignment: ModalityAssignment, mode: str,
                    k_s: int | None = None, k_t: int | None = None) -> ClassSet:
    """Derive the ordered class list from an assignment, validating the mode."""
    if mode not in ("imbalanced", "balanced"):
        raise ConfigError(f"unknown class-set mode {mode!r}")
    if mode == "imbalanced":
        if assignment.n_target_classes != 1:
            raise InconsistentAssignment(
                f"imbalanced mode needs exactly one target class, assignment has "
                f"{assignment.n_target_classes}")
        if k_s is not None and k_s != assignment.n_source_classes:
            raise InconsistentAssignment(
                f"k_s={k_s} but assignment has {assignment.n_source_classes} source classes")
        names = tuple(f"A{i + 1}" for i in range(assignment.n_source_classes)) + ("B",)
    else:
        if k_s is not None and k_s != assignment.n_source_classes:
            raise InconsistentAssignment(
                f"k_s={k_s} but assignment has {assignment.n_source_classes} source classes")
        if k_t is not None and k_t != assignment.n_target_classes:
            raise InconsistentAssignment(
                f"k_t={k_t} but assignment has {assignment.n_target_classes} target classes")
        names = (tuple(f"A{i + 1}" for i in range(assignment.n_source_classes))
                 + tuple(f"B{i + 1}" for i in range(assignment.n_target_classes)))
    members = tuple(tuple(m) for m in assignment.class_members())
    if len(members) != len(names):
        raise InconsistentAssignment(
            f"assignment spans {len(members)} classes but mode implies {len(names)}")
    return ClassSet(mode=mode, names=names, members=members,
                    target_classes=frozenset(assignment.target_classes()))


@dataclass
class TrainingBatch:
    sources: ImageBatch
    references: ImageBatch
    source_labels: torch.Tensor
    reference_labels: torch.Tensor

    def __post_init__(self):
        n = len(self.sources)
        if not (len(self.references) == self.source_labels.shape[0]
                == self.reference_labels.shape[0] == n):
            raise ValueError("batch fields must have parallel lengths")


def sample_pairs(class_set: ClassSet, batch_size: int, rng: np.random.Generator,
                 include_target: bool = True, sampling: str = "class-uniform"):
    """Draw (source_ids, source_labels, reference_ids, reference_labels).

    Classes are drawn uniformly over the class list, then images uniformly
    within the class; "image-uniform" instead draws images uniformly over the
    pooled candidates (class implied by the image).
    """
    candidates = [c for c in range(class_set.n_classes)
                  if include_target or c not in class_set.target_classes]
    empty = [class_set.names[c] for c in candidates if not class_set.members[c]]
    if empty:
        raise EmptyClass(f"class(es) with no members: {empty}")

    def draw(n):
        if sampling == "class-uniform":
            labels = [candidates[int(i)] for i in rng.integers(0, len(candidates), size=n)]
            ids = [class_set.members[c][int(rng.integers(0, len(class_set.members[c])))]
                   for c in labels]
        elif sampling == "image-uniform":
            pool = [(item, c) for c in candidates for item in class_set.members[c]]
            picks = rng.integers(0, len(pool), size=n)
            ids = [pool[int(i)][0] for i in picks]
            labels = [pool[int(i)][1] for i in picks]
        else:
            raise ConfigError(f"unknown sampling mode {sampling!r}")
        return ids, np.asarray(labels, dtype=np.int64)

    src_ids, src_labels = draw(batch_size)
    ref_ids, ref_labels = draw(batch_size)
    return src_ids, src_labels, ref_ids, ref_labels


class CachedLoader:
    """Loads manifest items once, then serves batches from memory.

    Results depend only on (id, resolution, value_range), never on call order.
    """

    def __init__(self, manifest: SplitManifest, resolution, value_range=(-1.0, 1.0)):
        self.manifest = manifest
        self.resolution = tuple(resolution)
        self.value_range = tuple(value_range)
        self._cache: dict[str, torch.Tensor] = {}

    def load(self, ids) -> ImageBatch:
        missing = [i for i in ids if i not in self._cache]
        if missing:
            fresh = load_batch(self.manifest, missing, self.resolution, self.value_range)
            for item_id, tensor in zip(missing, fresh.data):
                self._cache[item_id] = tensor
        return ImageBatch(torch.stack([self._cache[i] for i in ids]),
                          value_range=self.value_range)


def sample_batch(class_set: ClassSet, loader: CachedLoader, batch_size: int,
                 rng: np.random.Generator, include_target: bool = True,
                 sampling: str = "class-uniform") -> TrainingBatch:
    src_ids, src_labels, ref_ids, ref_labels = sample_pairs(
        class_set, batch_size, rng, include_target, sampling)
    return TrainingBatch(
        sources=loader.load(src_ids),
        references=loader.load(ref_ids),
        source_labels=torch.from_numpy(src_labels),
        reference_labels=torch.from_numpy(ref_labels),
    )


@dataclass
class TrainState:
    g: Generator
    d: Discriminator
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    config_hash: str = ""
    n_classes: int = 0
    model_kwargs: dict = field(default_factory=dict)
    ema_g: Generator | None = None
    ema_decay: float = 0.999


def build_models(cfg: RunConfig, n_classes: int) -> tuple[Generator, Discriminator]:
    g = Generator(base_width=cfg.model.base_width, style_dim=cfg.model.style_dim,
                  n_content_blocks=cfg.model.n_content_blocks,
                  n_decoder_blocks=cfg.model.n_decoder_blocks,
                  mlp_width=cfg.model.mlp_width)
    d = Discriminator(n_classes=n_classes, base_width=cfg.model.d_base_width)
    return g, d


def init_train_state(cfg: RunConfig, n_classes: int) -> TrainState:
    torch.manual_seed(cfg.trainer.seed)
    g, d = build_models(cfg, n_classes)
    betas = (cfg.trainer.beta1, cfg.trainer.beta2)
    g_opt = torch.optim.Adam(g.parameters(), lr=cfg.trainer.lr_g, betas=betas)
    d_opt = torch.optim.Adam(d.parameters(), lr=cfg.trainer.lr_d, betas=betas)
    model_kwargs = {
        "generator": {"base_width": cfg.model.base_width, "style_dim": cfg.model.style_dim,
                      "n_content_blocks": cfg.model.n_content_blocks,
                      "n_decoder_blocks": cfg.model.n_decoder_blocks,
                      "mlp_width": cfg.model.mlp_width},
        "discriminator": {"n_classes": n_classes, "base_width": cfg.model.d_base_width},
    }
    ema_g = copy.deepcopy(g) if cfg.trainer.ema else None
    return TrainState(g=g, d=d, g_opt=g_opt, d_opt=d_opt,
                      rng=np.random.default_rng(cfg.trainer.seed),
                      config_hash=cfg.content_hash(), n_classes=n_classes,
                      model_kwargs=model_kwargs, ema_g=ema_g,
                      ema_decay=cfg.trainer.ema_decay)


def train_step(state: TrainState, batch: TrainingBatch, w: LossWeights,
               ablation: dict | None = None, target_classes: frozenset = frozenset(),
               r1_mode: str = "true-class"):
    """One discriminator update followed by one generator update.

    Returns (state, metrics); the state is advanced in place. The R1 penalty
    and the classification loss see only real images.
    """
    ablation = ablation or {}
    use_dcls = bool(ablation.get("use_dcls", True))
    include_target = bool(ablation.get("include_target", True))
    if not include_target:
        seen = set(batch.source_labels.tolist()) | set(batch.reference_labels.tolist())
        offending = seen & target_classes
        if offending:
            raise ValueError(f"include_target=False but batch contains target class(es) {offending}")

    x = batch.sources.data
    y = batch.references.data
    idx = torch.arange(x.shape[0])
    src_labels = batch.source_labels
    ref_labels = batch.reference_labels

    # D update: hinge on reals at their own class and fakes at the reference class.
    state.d_opt.zero_grad()
    with torch.no_grad():
        fake = state.g(x, y)
    adv_real, _ = state.d(x)
    adv_fake, _ = state.d(fake)
    gan_d = hinge_d_loss(adv_real[idx, src_labels], adv_fake[idx, ref_labels])
    ce = classification_loss(state.d.classify(x), src_labels) if use_dcls \
        else torch.zeros(())
    r1 = r1_penalty(state.d, x, src_labels, mode=r1_mode) if w.lambda_reg > 0 \
        else torch.zeros(())
    d_total = total_d_loss(gan_d, ce, r1, w)
    _check_finite(state.step, {"L_GAN_D": gan_d, "L_CE": ce, "R1": r1, "total_D": d_total})
    d_total.backward()
    state.d_opt.step()

    # G update: fool D at the reference class, reconstruct under self-reference,
    # and match trunk features of the reference.
    state.g_opt.zero_grad()
    fake = state.g(x, y)
    adv_fake, feat_fake = state.d(fake)
    gan_g = hinge_g_loss(adv_fake[idx, ref_labels])
    rec = reconstruction_loss(x, state.g(x, x))
    with torch.no_grad():
        feat_ref = state.d.trunk_features(y)
    fm = feature_matching_loss(feat_fake, feat_ref)
    g_total = total_g_loss(gan_g, rec, fm, w)
    _check_finite(state.step, {"L_GAN_G": gan_g, "L_R": rec, "L_FM": fm, "total_G": g_total})
    g_total.backward()
    state.g_opt.step()

    if state.ema_g is not None:
        with torch.no_grad():
            for p_ema, p in zip(state.ema_g.parameters(), state.g.parameters()):
                p_ema.mul_(state.ema_decay).add_(p, alpha=1.0 - state.ema_decay)

    state.step += 1
    metrics = {
        "step": state.step,
        "L_GAN_D": _f(gan_d), "L_CE": _f(ce), "R1": _f(r1),
        "L_GAN_G": _f(gan_g), "L_R": _f(rec), "L_FM": _f(fm),
        "total_D": _f(d_total), "total_G": _f(g_total),
    }
    return state, metrics


def _f(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _check_finite(step: int, terms: dict) -> None:
    bad = {name: _f(value) for name, value in terms.items()
           if not math.isfinite(_f(value))}
    if bad:
        raise NonFiniteLoss(step, f"offending term(s): {bad}")


def _intern_tree(obj):
    # pickle memoizes strings by object identity; interning makes the byte
    # stream a function of values only, so save -> load -> save is stable
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return type(obj)((_intern_tree(k), _intern_tree(v)) for k, v in obj.items())
    if isinstance(obj, (list, tuple)):
        return type(obj)(_intern_tree(v) for v in obj)
    return obj


def save_checkpoint(state: TrainState, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": state.config_hash,
        "n_classes": state.n_classes,
        "step": state.step,
        "model_kwargs": state.model_kwargs,
        "g_state": state.g.state_dict(),
        "d_state": state.d.state_dict(),
        "g_opt_state": state.g_opt.state_dict(),
        "d_opt_state": state.d_opt.state_dict(),
        "np_rng_state": state.rng.bit_generator.state,
        "torch_rng_state": torch.get_rng_state(),
        "ema_state": state.ema_g.state_dict() if state.ema_g is not None else None,
        "ema_decay": state.ema_decay,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # serialize via a buffer: saving straight to a file embeds the file name
    # in the archive, breaking byte-identical round trips across paths
    buffer = io.BytesIO()
    torch.save(_intern_tree(payload), buffer)
    path.write_bytes(buffer.getvalue())


def load_checkpoint(path) -> TrainState:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    g = Generator(**payload["model_kwargs"]["generator"])
    d = Discriminator(**payload["model_kwargs"]["discriminator"])
    g.load_state_dict(payload["g_state"])
    d.load_state_dict(payload["d_state"])
    g_opt = torch.optim.Adam(g.parameters())
    d_opt = torch.optim.Adam(d.parameters())
    g_opt.load_state_dict(payload["g_opt_state"])
    d_opt.load_state_dict(payload["d_opt_state"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["np_rng_state"]
    torch.set_rng_state(payload["torch_rng_state"])
    ema_g = None
    if payload.get("ema_state") is not None:
        ema_g = Generator(**payload["model_kwargs"]["generator"])
        ema_g.load_state_dict(payload["ema_state"])
    return TrainState(g=g, d=d, g_opt=g_opt, d_opt=d_opt, rng=rng,
                      step=payload["step"], config_hash=payload["config_hash"],
                      n_classes=payload["n_classes"], model_kwargs=payload["model_kwargs"],
                      ema_g=ema_g, ema_decay=payload.get("ema_decay", 0.999))


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / f"ckpt-{step}"


def train(cfg: RunConfig, workdir=".", resume_from=None) -> Path:
    """Run the full training loop; artifacts land under <workdir>/runs/<name>/.

    Emits metrics.jsonl (one record per step), audit.jsonl (per-step class
    histograms), periodic checkpoints, and the resolved config. Resuming from
    a checkpoint continues the metric trace exactly as an uninterrupted run.
    """
    manifest = SplitManifest.load(cfg.data.manifest)
    assignment = ModalityAssignment.load(cfg.modalities.assignment)
    class_set = build_class_set(assignment, cfg.trainer.mode)
    loader = CachedLoader(manifest, cfg.data.resolution, cfg.data.value_range)
    weights = LossWeights(lambda_ce=cfg.losses.lambda_ce, lambda_reg=cfg.losses.lambda_reg,
                          lambda_r=cfg.losses.lambda_r, lambda_f=cfg.losses.lambda_f)
    ablation = {"use_dcls": cfg.ablation.use_dcls, "include_target": cfg.ablation.include_target}

    run_dir = Path(workdir) / "runs" / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.to_yaml(run_dir / "config.yaml")

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config_hash != cfg.content_hash():
            raise ConfigError(
                f"checkpoint config hash {state.config_hash} does not match "
                f"resolved config {cfg.content_hash()}")
        mode = "a"
    else:
        state = init_train_state(cfg, class_set.n_classes)
        save_checkpoint(state, checkpoint_path(run_dir, 0))
        mode = "w"

    metrics_path = run_dir / "metrics.jsonl"
    audit_path = run_dir / "audit.jsonl"
    with open(metrics_path, mode) as metrics_file, open(audit_path, mode) as audit_file:
        while state.step < cfg.trainer.steps:
            batch = sample_batch(class_set, loader, cfg.trainer.batch_size, state.rng,
                                 include_target=cfg.ablation.include_target,
                                 sampling=cfg.trainer.class_sampling)
            state, metrics = train_step(state, batch, weights, ablation,
                                        target_classes=class_set.target_classes,
                                        r1_mode=cfg.losses.r1_mode)
            if metrics["step"] % cfg.trainer.log_every == 0:
                metrics_file.write(json.dumps(metrics, sort_keys=True) + "\n")
            audit_file.write(json.dumps(_class_histogram(batch, class_set), sort_keys=True) + "\n")
            if metrics["step"] % cfg.trainer.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path(run_dir, state.step))
            if metrics["step"] % 100 == 0:
                logger.info("step %d: total_D %.4f, total_G %.4f, L_R %.4f",
                            metrics["step"], metrics["total_D"], metrics["total_G"],
                            metrics["L_R"])

    final = checkpoint_path(run_dir, state.step)
    if not final.exists():
        save_checkpoint(state, final)
    return run_dir


def _class_histogram(batch: TrainingBatch, class_set: ClassSet) -> dict:
    counts = np.bincount(
        np.concatenate([batch.source_labels.numpy(), batch.reference_labels.numpy()]),
        minlength=class_set.n_classes)
    return {"classes": {str(c): int(n) for c, n in enumerate(counts) if n},
            "target_occurrences": int(sum(counts[c] for c in class_set.target_classes))}

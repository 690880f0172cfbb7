"""Training loop and evaluation shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import BalancedSampler, Manifest, load_manifest, read_feature_file
from .errors import ConfigError, DimensionError, NonFiniteError
from .losses import combined_loss
from .metrics import auc_roc
from .model import ModelConfig, classify, draw_feature_maps, embed, init_params
from .optim import OptimState, adamw_step, cosine_lr
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "bce", "triplet", "combined")
EVAL_BATCH = 32


@dataclass
class Model:
    config: ModelConfig
    params: dict
    features: list

    @classmethod
    def from_checkpoint(cls, path) -> tuple["Model", RunConfig]:
        ckpt = load_checkpoint(path)
        run = RunConfig.from_text(ckpt.config_text, str(path))
        cfg = run.model_config()
        features = [w.astype(np.float32) for w in ckpt.features] or None
        fmaps = draw_feature_maps(cfg)
        if features is not None:
            fmaps = [type(f)(w, f.seed, f.orthogonal) for f, w in zip(fmaps, features)]
        return cls(cfg, ckpt.params, fmaps), run

    def embed(self, x: np.ndarray) -> np.ndarray:
        return embed(x, self.config, self.params, self.features).data

    def score(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Embeddings and scores for a batch; the head runs in float64 so scores do not round to 1."""
        emb = self.embed(x)
        head = {k: self.params[k].astype(np.float64) for k in ("head.weight", "head.bias")}
        return emb, classify(emb.astype(np.float64), head).data


@dataclass
class TrainResult:
    steps: int
    log_rows: list
    train_auc: float | None
    test_auc: float | None = None
    checkpoint: Path | None = None
    model: Model | None = field(default=None, repr=False)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def load_clips(manifest: Manifest, shape: tuple) -> dict[str, np.ndarray]:
    clips = {}
    for e in manifest.entries:
        clip = read_feature_file(e.path)
        if clip.tensor.shape != shape:
            raise ConfigError(f"clip {e.id} has shape {clip.tensor.shape}, model expects {shape}")
        clips[e.id] = clip.tensor
    return clips


def score_manifest(model: Model, manifest: Manifest, clips: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Scores and embeddings for every entry, in manifest order."""
    clips = clips if clips is not None else load_clips(manifest, model.config.input_shape)
    scores, embs = [], []
    for start in range(0, len(manifest), EVAL_BATCH):
        chunk = manifest.entries[start : start + EVAL_BATCH]
        emb, s = model.score(np.stack([clips[e.id] for e in chunk]))
        scores.append(s)
        embs.append(emb)
    return np.concatenate(scores), np.concatenate(embs)


def train(run: RunConfig, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch; writes ``train_log.csv`` and ``checkpoint.stdk`` under ``run.out_dir``."""
    if not run.train_manifest:
        raise ConfigError("train_manifest is required")
    cfg = run.model_config()
    loss_cfg = run.loss_config()
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.stdk"

    manifest = load_manifest(run.train_manifest)
    clips = load_clips(manifest, cfg.input_shape)
    sampler = BalancedSampler(manifest, run.batch_half, run.data_seed)
    total = run.total_steps or run.epochs * sampler.steps_per_epoch
    N = run.batch_half

    params = init_params(cfg, np.float32)
    fmaps = draw_feature_maps(cfg, np.float32)
    state = OptimState.for_params(params, **run.optim_hyper())

    def snapshot() -> None:
        save_checkpoint(
            ckpt_path,
            Checkpoint(run.to_text(), params, [f.W_rand for f in fmaps], state.m, state.v, state.step),
        )

    rows = []
    log_path = out / "train_log.csv"
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        step, epoch = 0, 0
        while step < total:
            for batch in sampler.epoch(epoch):
                if step >= total:
                    break
                x = np.stack([clips[e.id] for e in batch])
                y = np.array([e.label for e in batch], dtype=np.float32)
                lr = cosine_lr(step, total, run.lr)
                leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                emb = embed(x, cfg, leaves, fmaps)
                scores = classify(emb, leaves)
                loss, bce, trip = combined_loss(scores, y, emb[:N], emb[N:], loss_cfg)
                values = (loss.item(), bce.item(), trip.item())
                if not all(math.isfinite(v) for v in values):
                    raise NonFiniteError(
                        f"non-finite loss at step {step} (bce={values[1]}, triplet={values[2]}); "
                        f"last good checkpoint kept at {ckpt_path}"
                    )
                grads = backward(loss)
                params, state = adamw_step(params, {k: grads[t] for k, t in leaves.items() if t in grads}, state, lr)
                row = {"step": step, "lr": lr, "bce": values[1], "triplet": values[2], "combined": values[0]}
                writer.writerow([step] + [_fmt(row[k]) for k in LOG_FIELDS[1:]])
                rows.append(row)
                if on_step:
                    on_step(row)
                log.info("step %d lr %.3g bce %.4f triplet %.4f", step, lr, values[1], values[2])
                step += 1
                if run.checkpoint_every and step % run.checkpoint_every == 0:
                    snapshot()
            epoch += 1
    snapshot()

    model = Model(cfg, params, fmaps)
    train_scores, _ = score_manifest(model, manifest, clips)
    labels = np.array([e.label for e in manifest.entries])
    result = TrainResult(step, rows, auc_roc(train_scores, labels), checkpoint=ckpt_path, model=model)
    if run.test_manifest:
        test = load_manifest(run.test_manifest)
        test_scores, _ = score_manifest(model, test)
        result.test_auc = auc_roc(test_scores, [e.label for e in test.entries])
    summary = [f"steps = {step}", f"train_auc = {result.train_auc!r}"]
    if result.test_auc is not None:
        summary.append(f"test_auc = {result.test_auc!r}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return result


def score_table(model: Model, manifest: Manifest) -> list[tuple[str, int, float]]:
    """Per-clip ``(id, label, score)`` rows in manifest order."""
    scores, _ = score_manifest(model, manifest)
    return [(e.id, e.label, float(s)) for e, s in zip(manifest.entries, scores)]


def evaluate(model: Model, manifest: Manifest) -> tuple[list[tuple[str, int, float]], float]:
    """Score table and AUC; UndefinedMetricError for single-class manifests."""
    rows = score_table(model, manifest)
    return rows, auc_roc([r[2] for r in rows], [r[1] for r in rows])


def score_clip_files(model: Model, paths) -> list[tuple[str, int, float]]:
    """Score separate clip files of one video independently (no pooling)."""
    rows = []
    for p in paths:
        clip = read_feature_file(p)
        if clip.tensor.shape != model.config.input_shape:
            raise ConfigError(f"{p}: shape {clip.tensor.shape} != model input {model.config.input_shape}")
        _, s = model.score(clip.tensor[None])
        rows.append((clip.id, clip.label, float(s[0])))
    return rows


def embedding_gap(embs: np.ndarray, labels) -> float:
    """Mean normal-abnormal distance minus mean distance between distinct normals."""
    y = np.asarray(labels).astype(bool)
    n, a = embs[~y].astype(np.float64), embs[y].astype(np.float64)
    if len(n) < 2 or len(a) < 1:
        raise DimensionError("embedding_gap needs two normals and one abnormal")
    cross = np.linalg.norm(n[:, None] - a[None], axis=-1).mean()
    within = np.linalg.norm(n[:, None] - n[None], axis=-1)
    within = within[~np.eye(len(n), dtype=bool)].mean()
    return float(cross - within)

"""Training loop: strided windows, Adam with annealing and early stopping."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import MAX_K_BINS, PreparedSong, make_batch
from .nn import (
    AdamState,
    Checkpoint,
    DivergenceError,
    GruModel,
    ModelConfig,
    adam_step,
    backward_bptt,
    clip_gradients,
    forward_sequence,
    mse_loss,
)
from .seeding import BATCH, EVAL, SONG_ORDER, SPLIT, rng_for
from .tuner import STRIDE, stitch_predictions

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "train_mse", "val_mse", "val_rmse_cents", "lr"]


@dataclass
class TrainConfig:
    seq_len: int = 86
    stride: int = STRIDE
    batch_size: int = 32
    lr: float = 1e-4
    anneal_factor: float = 0.5
    anneal_patience: int = 3
    early_stop_patience: int = 10
    max_steps: int = 20000
    eval_interval: int = 100
    seed: int = 0
    val_fraction: float = 0.1
    max_k_bins: int = MAX_K_BINS
    clip_norm: float = 5.0
    loss_last_only: bool = False
    convention: str = "correction"
    seq_len_range: tuple = (43, 215)

    def validate(self) -> None:
        lo, hi = self.seq_len_range
        if not lo <= self.seq_len <= hi:
            raise ValueError(f"seq_len {self.seq_len} outside [{lo}, {hi}]")
        if not 1 <= self.stride <= self.seq_len:
            raise ValueError(f"stride {self.stride} must lie in [1, seq_len]")
        if self.batch_size < 1 or self.eval_interval < 1 or self.max_steps < 0:
            raise ValueError("batch_size and eval_interval must be positive, max_steps non-negative")
        if self.lr < 0 or not 0 < self.anneal_factor <= 1:
            raise ValueError("lr must be >= 0 and anneal_factor in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not 0 <= self.max_k_bins <= MAX_K_BINS:
            raise ValueError(f"max_k_bins must lie in [0, {MAX_K_BINS}]")
        if self.convention not in ("correction", "detune"):
            raise ValueError(f"unknown label convention {self.convention!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seq_len_range"] = list(self.seq_len_range)
        return d


@dataclass
class MetricsRow:
    step: int
    train_mse_norm: float
    val_mse_norm: float
    val_rmse_cents: float
    lr: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    stop_reason: str


def eval_assignment(song: PreparedSong, seed: int, index: int) -> np.ndarray:
    return rng_for(seed, EVAL, index).integers(0, len(song.bank_cents), size=len(song.segments))


def evaluate(model: GruModel, songs, seq_len: int, stride: int = STRIDE, seed: int = 0,
             convention: str = "correction") -> dict:
    """Stitched-prediction MSE over in-note frames, with fixed seeded de-tunes.

    Song ``i`` always receives the same per-note assignment for a given
    ``seed``, so repeated evaluations are comparable.
    """
    sq = 0.0
    count = 0
    for i, song in enumerate(songs):
        ex = song.example(eval_assignment(song, seed, i), convention)
        if not ex.mask.any():
            continue
        pred = stitch_predictions(model, ex.features, seq_len, stride)
        diff = (pred - ex.labels)[ex.mask]
        sq += float(np.sum(diff * diff))
        count += int(diff.size)
    mse = sq / count if count else float("nan")
    return {"mse_norm": mse, "rmse_cents": 100.0 * float(np.sqrt(mse)), "frames": count}


def split_validation(songs: list, cfg: TrainConfig) -> tuple[list, list]:
    """Hold out ``val_fraction`` of the songs; with too few songs, validate on training songs."""
    n_val = int(np.floor(cfg.val_fraction * len(songs)))
    if n_val == 0 or n_val >= len(songs):
        return list(songs), list(songs)
    order = rng_for(cfg.seed, SPLIT, 1).permutation(len(songs))
    val_idx = set(order[:n_val].tolist())
    return ([s for i, s in enumerate(songs) if i not in val_idx],
            [s for i, s in enumerate(songs) if i in val_idx])


class WindowSchedule:
    """Round-robin over songs, each advancing its own window start by ``stride``."""

    def __init__(self, songs: list, seq_len: int, stride: int, seed: int):
        self.songs = songs
        self.seq_len = seq_len
        self.stride = stride
        self.seed = seed
        self.cursor = [0] * len(songs)
        self.epoch = 0
        self.order: list[int] = []

    def next(self) -> tuple[int, int]:
        if not self.order:
            self.order = rng_for(self.seed, SONG_ORDER, self.epoch).permutation(len(self.songs)).tolist()
            self.epoch += 1
        i = self.order.pop(0)
        start = self.cursor[i]
        n = self.songs[i].n_frames
        if start + self.seq_len > n:
            start = 0
        nxt = start + self.stride
        self.cursor[i] = nxt if nxt + self.seq_len <= n else 0
        return i, start


def train(
    songs: list,
    model_config: ModelConfig,
    cfg: TrainConfig,
    val_songs: list | None = None,
    config_hash: str = "",
    model: GruModel | None = None,
) -> TrainResult:
    """Fit a GRU on prepared songs and return the best-validation checkpoint.

    The step-0 model is evaluated first and serves as the reference for
    improvement. Learning rate halves (``anneal_factor``) after
    ``anneal_patience`` evaluations without improvement; training stops after
    ``early_stop_patience`` such evaluations or at ``max_steps``.
    """
    cfg.validate()
    if not songs:
        raise ValueError("training needs at least one song")
    if val_songs is None:
        songs, val_songs = split_validation(songs, cfg)
    model = model or GruModel.init(model_config, cfg.seed)
    adam = AdamState.zeros_like(model)
    schedule = WindowSchedule(songs, cfg.seq_len, cfg.stride, cfg.seed)

    def snapshot(step: int) -> Checkpoint:
        a = AdamState({k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}, adam.t)
        return Checkpoint(model.copy(), a, step, cfg.seed, config_hash, cfg.convention)

    def validate_now() -> float:
        return evaluate(model, val_songs, cfg.seq_len, cfg.stride, cfg.seed, cfg.convention)["mse_norm"]

    lr = cfg.lr
    best = validate_now()
    best_ckpt = snapshot(0)
    metrics = [MetricsRow(0, float("nan"), best, 100.0 * float(np.sqrt(best)), lr)]
    stale = 0
    running = []
    reason = "max_steps"

    for step in range(1, cfg.max_steps + 1):
        i, start = schedule.next()
        batch = make_batch(songs[i], start, cfg.seq_len, rng_for(cfg.seed, BATCH, step), cfg.batch_size,
                           cfg.max_k_bins, cfg.convention)
        mask = batch.mask
        if cfg.loss_last_only:
            mask = mask.copy()
            mask[:, : max(0, mask.shape[1] - cfg.stride)] = False
        if mask.any():
            pred, cache = forward_sequence(model, batch.features)
            loss = mse_loss(pred, batch.labels, mask)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}", best_ckpt)
            grads = backward_bptt(cache, model, batch.labels, mask)
            clip_gradients(grads, cfg.clip_norm)
            try:
                adam_step(model, grads, adam, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at step {step}", best_ckpt) from None
            running.append(loss)

        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            val = validate_now()
            train_mse = float(np.mean(running)) if running else float("nan")
            running = []
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite validation loss at step {step}", best_ckpt)
            if val < best:
                best, stale = val, 0
                best_ckpt = snapshot(step)
            else:
                stale += 1
                if stale % cfg.anneal_patience == 0:
                    lr *= cfg.anneal_factor
            metrics.append(MetricsRow(step, train_mse, val, 100.0 * float(np.sqrt(val)), lr))
            log.info("step %d train %.5f val %.5f (%.2f cents) lr %.2e", step, train_mse, val,
                     100.0 * np.sqrt(val), lr)
            if stale >= cfg.early_stop_patience:
                reason = "early_stop"
                break
    return TrainResult(best_ckpt, metrics, reason)


def write_metrics_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([int(r.step)] + [repr(float(v)) for v in (r.train_mse_norm, r.val_mse_norm, r.val_rmse_cents,
                                                                   r.lr)])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            MetricsRow(int(r["step"]), float(r["train_mse"]), float(r["val_mse"]), float(r["val_rmse_cents"]),
                       float(r["lr"]))
            for r in csv.DictReader(fh)
        ]

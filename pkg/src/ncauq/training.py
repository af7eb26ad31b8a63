"""Training: unrolled backprop through the rollout.

Each optimization step samples a rollout length T uniformly from
[t_min, t_max], unrolls the automaton for T steps on every image in the
batch, applies softmax cross-entropy to the final prediction, and
backpropagates through the whole rollout (the fire masks are constants).
Updates use Adam with decoupled weight decay: parameters are shrunk by
(1 - lr * wd) before the Adam step.

All randomness (init, shuffling, T, fire masks) flows from the config
seed, so two runs with the same seed produce identical training logs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nca
from .checkpoint import save_checkpoint
from .data import Dataset, Sample
from .metrics import dice
from .nca import NcaParams


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 50
    batch_size: int = 2
    t_min: int = 32
    t_max: int = 64
    seed: int = 0
    num_channels: int = 64
    hidden_size: int = 128
    fire_rate: float = 0.5
    grad_clip: float | None = None          # off by default
    early_stop_val_dice: float | None = None  # stop once validation clears this

    def __post_init__(self):
        if self.t_min > self.t_max:
            raise ValueError(f"t_min {self.t_min} > t_max {self.t_max}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: NcaParams, adam: AdamState, learning_rate: float) -> None:
    """One bias-corrected Adam step from the accumulated gradients."""
    adam.step_count += 1
    t = adam.step_count
    for name, tensor in params.tensors().items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if name not in adam.m:
            adam.m[name] = np.zeros_like(tensor.data)
            adam.v[name] = np.zeros_like(tensor.data)
        adam.m[name] = adam.beta1 * adam.m[name] + (1 - adam.beta1) * grad
        adam.v[name] = adam.beta2 * adam.v[name] + (1 - adam.beta2) * grad * grad
        m_hat = adam.m[name] / (1 - adam.beta1 ** t)
        v_hat = adam.v[name] / (1 - adam.beta2 ** t)
        tensor.data -= (learning_rate * m_hat / (np.sqrt(v_hat) + adam.eps)).astype(np.float32)


def sample_rollout_length(rng: np.random.Generator, t_min: int, t_max: int) -> int:
    """Integer uniform on [t_min, t_max], both ends inclusive."""
    if t_min > t_max:
        raise ValueError(f"t_min {t_min} > t_max {t_max}")
    return int(rng.integers(t_min, t_max + 1))


def _batch_loss(sample: Sample, params: NcaParams, steps: int,
                rng: np.random.Generator) -> ad.Tensor:
    latent = nca.traced_rollout(sample.image, params, steps, rng)
    probs = ad.softmax_channels(nca.traced_logits(latent, params))
    return ad.cross_entropy_loss(probs, sample.mask)


def train_step(batch: list[Sample], params: NcaParams, adam: AdamState,
               config: TrainConfig, rng: np.random.Generator,
               step_index: int = 0) -> float:
    """One optimization step; returns the pre-update mean batch loss."""
    if not batch:
        raise ValueError("empty batch")
    shapes = {s.image.shape for s in batch}
    if len(shapes) > 1:
        raise ValueError(f"batch mixes image sizes: {sorted(shapes)}")
    steps = sample_rollout_length(rng, config.t_min, config.t_max)
    params.zero_grad()
    losses = []
    ids = [s.id for s in batch]
    for sample in batch:
        try:
            loss = _batch_loss(sample, params, steps, rng)
        except nca.DynamicsError as exc:
            raise TrainingError(
                f"{exc} at optimization step {step_index} (T={steps}, batch={ids})") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at optimization step {step_index} "
                f"(T={steps}, batch={ids})")
        ad.backward(ad.scale(loss, 1.0 / len(batch)))
        losses.append(value)
    if config.grad_clip is not None:
        _clip_gradients(params, config.grad_clip)
    decay = np.float32(1.0 - config.learning_rate * config.weight_decay)
    for tensor in params.tensors().values():
        tensor.data *= decay
    adam_update(params, adam, config.learning_rate)
    return float(np.mean(losses))


def _clip_gradients(params: NcaParams, max_norm: float) -> None:
    total = 0.0
    for tensor in params.tensors().values():
        if tensor.grad is not None:
            total += float((tensor.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = np.float32(max_norm / norm)
        for tensor in params.tensors().values():
            if tensor.grad is not None:
                tensor.grad *= factor


def validation_dice(params: NcaParams, samples: list[Sample], steps: int,
                    seed: int) -> float:
    """Mean Dice over samples at a fixed rollout length, seeded per sample."""
    scores = []
    for i, sample in enumerate(samples):
        rng = np.random.default_rng([seed, i])
        _, pred = nca.predict(params, sample.image, steps, rng)
        scores.append(dice(pred.mask, sample.mask))
    return float(np.mean(scores))


@dataclass
class TrainResult:
    params: NcaParams            # final-epoch parameters
    best_val_dice: float
    best_epoch: int
    epochs_run: int
    log_rows: list[tuple[int, float, float]]
    best_path: Path
    last_path: Path
    log_path: Path


def train(dataset: Dataset, config: TrainConfig, out_dir: str | Path,
          progress=None) -> TrainResult:
    """Full training run; persists best/last checkpoints and a log CSV."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    for required in ("train", "val"):
        if not dataset.splits.get(required):
            raise ValueError(f"dataset needs a non-empty {required!r} split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path, last_path, log_path = out / "ckpt_best.bin", out / "ckpt_last.bin", out / "log.csv"

    rng = np.random.default_rng(config.seed)
    params = NcaParams.init(rng, config.num_channels, config.hidden_size, config.fire_rate)
    adam = AdamState()
    train_idx = list(dataset.splits["train"])
    val_samples = dataset.subset("val")

    log_rows: list[tuple[int, float, float]] = []
    best_val, best_epoch = -1.0, -1
    step_index = 0
    epochs_run = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_idx))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset.samples[train_idx[i]] for i in order[start:start + config.batch_size]]
            epoch_losses.append(train_step(batch, params, adam, config, rng, step_index))
            step_index += 1
        val = validation_dice(params, val_samples, config.t_max,
                              seed=config.seed * 100003 + epoch)
        mean_loss = float(np.mean(epoch_losses))
        log_rows.append((epoch, mean_loss, val))
        epochs_run = epoch + 1
        if progress is not None:
            progress(f"epoch {epoch}: loss {mean_loss:.4f}, val dice {val:.4f}")
        if val > best_val:
            best_val, best_epoch = val, epoch
            save_checkpoint(params, best_path)
        if config.early_stop_val_dice is not None and val >= config.early_stop_val_dice:
            break

    save_checkpoint(params, last_path)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "val_dice"])
        for epoch, loss, val in log_rows:
            writer.writerow([epoch, f"{loss:.10g}", f"{val:.10g}"])
    return TrainResult(params=params, best_val_dice=best_val, best_epoch=best_epoch,
                       epochs_run=epochs_run, log_rows=log_rows,
                       best_path=best_path, last_path=last_path, log_path=log_path)

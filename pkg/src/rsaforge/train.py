"""Momentum SGD training loop, synthetic image data and PPM ingestion."""

from __future__ import annotations

import colorsys
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .model import Model, save_checkpoint
from .tensor import IMAGENET_MEAN, IMAGENET_STD, bilinear_resize, normalize_image

log = logging.getLogger(__name__)

LEARNING_RATE = 0.1
MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
MAX_EPOCHS = 120
CHECKPOINT_EVERY = 5


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    learning_rate: float = LEARNING_RATE
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimState) -> None:
    """One in-place update: ``v = momentum*v + (g + wd*w)``, ``w -= lr*v``."""
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for parameter {name!r}")
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter is {w.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        if state.weight_decay:
            g = g + np.float32(state.weight_decay) * w
        v *= np.float32(state.momentum)
        v += g
        w -= np.float32(state.learning_rate) * v


# --------------------------------------------------------------------------- data


@dataclass
class LabeledDataset:
    images: np.ndarray  # [M, 3, H, W] in [0, 1]
    labels: np.ndarray  # [M] int
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [M, 3, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)


_SHAPES = ("disk", "square", "triangle", "ring")


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        return (dy <= 0.7 * r) & (dy >= -r + 2 * np.abs(dx))
    d2 = dy * dy + dx * dx
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def render_stimulus(cls: int, classes: int, size, rng: np.random.Generator) -> np.ndarray:
    """Draw one ``[3, H, W]`` image of class ``cls``.

    Class identity fixes the shape type and the hue family; position, scale,
    saturation, brightness and the textured background are jittered by ``rng``.
    """
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    hue = (cls / classes + rng.uniform(-0.03, 0.03)) % 1.0
    rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0)))
    bg = rng.uniform(0.15, 0.45) + 0.04 * rng.standard_normal((h, w))
    img = np.broadcast_to(bg, (3, h, w)).copy()
    r = rng.uniform(0.22, 0.34) * min(h, w)
    cy = h / 2 + rng.uniform(-0.15, 0.15) * h
    cx = w / 2 + rng.uniform(-0.15, 0.15) * w
    mask = _shape_mask(_SHAPES[cls % len(_SHAPES)], yy, xx, cy, cx, r)
    img[:, mask] = rgb[:, None]
    img += 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_synthetic(classes: int, per_class: int, size=(64, 64), seed: int = 0) -> LabeledDataset:
    """Deterministic class-balanced image set; labels cycle 0..classes-1."""
    if classes < 2:
        raise ValueError(f"need at least two classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(classes), per_class)
    images = np.stack([render_stimulus(int(c), classes, size, rng) for c in labels])
    return LabeledDataset(images, labels, classes)


_PPM_HEADER = re.compile(rb"\AP6(?:\s+|#[^\n]*\n)+?(\d+)(?:\s+|#[^\n]*\n)+?(\d+)"
                         rb"(?:\s+|#[^\n]*\n)+?(\d+)\s")


def load_ppm(data: bytes) -> np.ndarray:
    """Decode a binary (P6, maxval 255) PPM into a ``[3, H, W]`` tensor in [0, 1]."""
    if data[:2] != b"P6":
        raise ValueError(f"bad PPM magic {data[:2]!r}, only binary P6 is supported")
    m = _PPM_HEADER.match(data)
    if m is None:
        raise ValueError("malformed PPM header")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"PPM maxval must be 255, got {maxval}")
    need = width * height * 3
    raster = data[m.end():m.end() + need]
    if len(raster) < need:
        raise ValueError(f"truncated PPM raster: expected {need} bytes, got {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode a ``[3, H, W]`` image in [0, 1] as a binary PPM (rounding to 8 bits)."""
    _, h, w = img.shape
    pixels = np.clip(np.rint(np.asarray(img, np.float64) * 255), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + pixels.transpose(1, 2, 0).tobytes()


def preprocess(images: np.ndarray, size=None, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Resize each ``[3, H, W]`` image to ``size`` (if given) and normalize per channel."""
    images = np.asarray(images, np.float32)
    if size is not None and tuple(images.shape[2:]) != tuple(size):
        images = np.stack([bilinear_resize(im, *size) for im in images])
    return normalize_image(images, mean, std)


# --------------------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = LEARNING_RATE
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    seed: int = 0
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    resize: tuple[int, int] | None = None
    max_epochs: int = MAX_EPOCHS
    checkpoint_every: int = CHECKPOINT_EVERY

    def __post_init__(self):
        if not 0 <= self.epochs <= self.max_epochs:
            raise ValueError(f"epochs must lie in [0, {self.max_epochs}], got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")

    def is_checkpoint_epoch(self, epoch: int) -> bool:
        return epoch == 1 or epoch % self.checkpoint_every == 0


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    checkpoints: dict[int, bytes] = field(default_factory=dict)


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.rdma"


def train(model: Model, dataset: LabeledDataset, config: TrainConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """Train ``model`` in place.

    With ``out_dir`` set, checkpoints and a JSON-lines log (``train_log.jsonl``)
    are written there as training progresses; logged checkpoint paths are
    relative to ``out_dir``.
    """
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset has {len(dataset)} images, fewer than batch size {config.batch_size}")
    if dataset.class_count > model.config.num_classes:
        raise ValueError(f"dataset has {dataset.class_count} classes, model outputs "
                         f"{model.config.num_classes}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_path.write_text("")
    x_all = preprocess(dataset.images, config.resize, config.mean, config.std)
    y_all = dataset.labels
    state = OptimState(config.learning_rate, config.momentum, config.weight_decay)
    params = model.parameters()
    result = TrainResult()
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(config.seed + epoch).permutation(len(dataset))
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            logits, _ = model.forward(x_all[idx], training=True, keep_cache=True)
            loss, probs = nn.softmax_xent_forward(logits, y_all[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = model.backward(nn.softmax_xent_backward(probs, y_all[idx]))
            sgd_step(params, grads, state)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y_all[idx]).sum())
        record = {"epoch": epoch, "mean_loss": total_loss / len(order),
                  "accuracy": correct / len(order)}
        if config.is_checkpoint_epoch(epoch):
            blob = save_checkpoint(model, epoch)
            result.checkpoints[epoch] = blob
            if out is not None:
                path = out / checkpoint_name(epoch)
                path.write_bytes(blob)
                record["checkpoint_path"] = path.name  # relative to the log's directory
        log.info("epoch %d: loss %.4f, accuracy %.3f", epoch, record["mean_loss"], record["accuracy"])
        result.log.append(record)
        if out is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
    return result

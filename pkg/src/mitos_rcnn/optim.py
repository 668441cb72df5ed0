"""SGD with momentum and weight decay, Gaussian init, and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .data import DatasetManifest, INPUT_SIZE, load_png_u8, resize_to_input
from .detection import MitosRCNN
from .tensor import GradTape, Tensor, mul

logger = logging.getLogger(__name__)

LOSS_LOG_HEADER = "iteration,total,cls,reg,lr"


class NonFiniteLossError(ArithmeticError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    # desk recipe: from scratch and at batch 1, 1e-3 is too slow to learn in 2k steps
    phases: tuple[tuple[int, float], ...] = ((1500, 1e-2), (500, 1e-3))
    momentum: float = 0.9
    weight_decay: float = 0.0005
    init_sigma: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        phases = tuple((int(n), float(lr)) for n, lr in self.phases)
        object.__setattr__(self, "phases", phases)
        if not phases:
            raise ValueError("training needs at least one phase")
        if any(lr <= 0 or n < 0 for n, lr in phases):
            raise ValueError(f"phase iterations must be >= 0 and rates > 0: {phases}")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.init_sigma <= 0:
            raise ValueError("momentum and weight decay must be >= 0, init sigma > 0")

    @property
    def total_iterations(self) -> int:
        return sum(n for n, _ in self.phases)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phases"] = [list(p) for p in self.phases]
        return d


REFERENCE_TRAIN_CONFIG = TrainConfig(batch_size=10, phases=((60000, 1e-3), (20000, 1e-4)))


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    total: float
    cls: float
    reg: float
    lr: float

    def line(self) -> str:
        return f"{self.iteration},{self.total!r},{self.cls!r},{self.reg!r},{self.lr!r}"


def is_weight(name: str) -> bool:
    return name.endswith("weight")


def init_weights(params: dict[str, Tensor], sigma: float, rng: np.random.Generator) -> dict[str, Tensor]:
    """Draw every ``*weight`` from N(0, sigma^2) and zero every ``*bias``.

    Other parameters (the fusion L2 scales) keep their values.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    for name, t in params.items():
        if is_weight(name):
            t.data = rng.normal(0.0, sigma, t.shape)
        elif name.endswith("bias"):
            t.data = np.zeros(t.shape)
    return params


def sgd_step(params: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0005,
             velocity: dict[str, np.ndarray] | None = None,
             grads: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """One classical momentum step with L2 decay folded into the gradient.

    ``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.
    Gradients come from ``grads`` when given, else from each tensor's
    ``.grad``. Returns the (mutated) velocity dict.
    """
    velocity = {} if velocity is None else velocity
    for name, t in params.items():
        g = grads[name] if grads is not None and name in grads else t.grad
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = momentum * v + g + weight_decay * t.data
        velocity[name] = v
        t.data = t.data - lr * v
    return velocity


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]
        if n < batch_size:
            yield order


def load_training_set(manifest: DatasetManifest, image_root: str | Path = ".", size: int = INPUT_SIZE):
    """Decode every image once (kept as uint8) with annotations at input resolution."""
    root = Path(image_root)
    images, annotations = [], []
    for rec in manifest.records:
        u8 = load_png_u8(root / rec.path)
        anns = rec.annotations
        if u8.shape[1:] != (size, size):
            px, anns, _ = resize_to_input(u8.astype(np.float64) / 255.0, anns, size)
            u8 = np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)
        images.append(u8)
        annotations.append(list(anns))
    return images, annotations


def train(net: MitosRCNN, manifest: DatasetManifest, cfg: TrainConfig,
          log_sink: Callable[[str], None] | None = None, image_root: str | Path = ".",
          checkpoint_dir: str | Path | None = None, dataset=None):
    """Optimize ``net`` in place over the configured phases.

    Each iteration draws ``batch_size`` images from a seeded per-epoch
    shuffle, sums the three multi-task losses per image, averages over the
    batch and takes one SGD step. Returns ``(net, history)``.
    """
    if len(manifest.records) == 0:
        raise ValueError("cannot train on an empty manifest")
    images, annotations = dataset if dataset is not None else load_training_set(manifest, image_root)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(images), cfg.batch_size, rng)
    velocity: dict[str, np.ndarray] = {}
    history: list[LossRecord] = []
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if log_sink is not None:
        log_sink(LOSS_LOG_HEADER)

    it = 0
    for phase, (n_iter, lr) in enumerate(cfg.phases):
        for _ in range(n_iter):
            it += 1
            for t in net.params.values():
                t.grad = None
            batch = next(batches)
            total = cls = reg = 0.0
            for i in batch:
                image = images[i].astype(np.float64) / 255.0
                with GradTape() as tape:
                    loss, sites = net.training_loss(image, annotations[i], rng)
                    scaled = mul(loss, 1.0 / len(batch))
                tape.backward(scaled)
                total += loss.item() / len(batch)
                cls += sum(s.cls_term.item() for s in sites.values()) / len(batch)
                reg += sum(s.lam * s.reg_term.item() for s in sites.values()) / len(batch)
            if not math.isfinite(total):
                raise NonFiniteLossError(it, total)
            sgd_step(net.params, lr, cfg.momentum, cfg.weight_decay, velocity)
            rec = LossRecord(it, total, cls, reg, lr)
            history.append(rec)
            if log_sink is not None:
                log_sink(rec.line())
            if it % 50 == 0:
                logger.info("iter %d phase %d loss %.4f (cls %.4f reg %.4f)", it, phase, total, cls, reg)
            if ckpt_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                _write_checkpoint(net, ckpt_dir / f"iter_{it:06d}.ckpt", it, phase, rng, cfg)
        if ckpt_dir is not None:
            _write_checkpoint(net, ckpt_dir / f"phase{phase}_end.ckpt", it, phase, rng, cfg)
    return net, history


def _write_checkpoint(net: MitosRCNN, path: Path, iteration: int, phase: int,
                      rng: np.random.Generator, cfg: TrainConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"iteration": iteration, "phase": phase, "rng_state": rng.bit_generator.state,
            "train": cfg.to_dict()}
    ckpt_io.save(path, net.to_checkpoint(meta))

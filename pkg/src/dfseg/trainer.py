"""SGD training with deep supervision, optional MixUp, fold handling and
resumable checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .augment import MIXUP_ALPHA, mixup, random_flip, sample_patch
from .checkpoint import load_model_state, load_tensors, model_state, save_tensors
from .inference import aggregated_dsc, model_predictor, sliding_window
from .losses import deep_supervised_loss, label_pyramid, mixup_loss, one_hot
from .models import ModelConfig, build_model
from .tensor import Tensor

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    steps_per_epoch: int = 50
    batch_size: int = 2
    lr0: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    grad_clip: float = 12.0  # global L2 norm cap, 0 disables
    patch_size: tuple[int, int, int] = (56, 224, 160)
    fg_prob: float = 1 / 3
    mixup: bool = False
    mixup_alpha: float = MIXUP_ALPHA
    flip_aug: bool = True
    seed: int = 0
    fold_id: int = 0
    n_folds: int = 5
    val_every: int = 1
    overlap: float = 0.5

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        for name in ("lr0", "weight_decay", "mixup_alpha", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr0 <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr0 must be positive and momentum in [0, 1)")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be positive")
        if not 0 <= self.fold_id < self.n_folds:
            raise ValueError(f"fold_id must lie in [0, {self.n_folds}), got {self.fold_id}")

    def check_model(self, model_config: ModelConfig) -> None:
        total = model_config.cumulative_strides()[-1]
        for p, s in zip(self.patch_size, total):
            if p % s:
                raise ValueError(f"patch size {self.patch_size} not divisible by total pooling {total}")


# --------------------------------------------------------------- config files

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _parse_value(key: str, text: str):
    if key == "pool_schedule":
        return [tuple(int(v) for v in item.split(",")) for item in text.split()]
    if key == "patch_size":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if key == "arch":
        return text
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in MODEL_KEYS | TRAIN_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def split_config(values: dict, **overrides) -> tuple[TrainConfig, dict]:
    values = {**values, **{k: v for k, v in overrides.items() if v is not None}}
    train = TrainConfig(**{k: v for k, v in values.items() if k in TRAIN_KEYS})
    model = {k: v for k, v in values.items() if k in MODEL_KEYS}
    return train, model


def config_digest(train: TrainConfig, model: ModelConfig) -> str:
    doc = {"train": asdict(train), "model": model.to_dict()}
    doc["train"]["patch_size"] = list(train.patch_size)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ------------------------------------------------------------------ optimizer


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float, weight_decay: float):
    """v <- momentum * v + (g + wd * w);  w <- w - lr * v (heavy-ball, not Nesterov)."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient; step aborted")
    velocity = momentum * velocity + (grad + weight_decay * param)
    return (param - lr * velocity).astype(param.dtype), velocity.astype(param.dtype)


class SGD:
    def __init__(self, model, momentum: float = 0.99, weight_decay: float = 3e-5):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in model.named_parameters()}

    def step(self, lr: float) -> None:
        named = list(self.model.named_parameters())
        for name, p in named:
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"parameter {name} has no finite gradient; step aborted")
        for name, p in named:
            p.data, self.velocity[name] = sgd_step(p.data, p.grad, self.velocity[name], lr, self.momentum, self.weight_decay)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. Non-finite norms are left alone so the
    optimizer can reject the step.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads)))
    if max_norm > 0 and np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def lr_schedule(epoch: int, epochs: int, lr0: float = 0.01, exponent: float = 0.9) -> float:
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    return lr0 * (1.0 - epoch / epochs) ** exponent


# ---------------------------------------------------------------------- data


@dataclass
class Sample:
    images: np.ndarray  # [C, D, H, W] float32
    labels: np.ndarray  # [D, H, W] uint8
    case_id: str = ""


def fold_split(n_cases: int, n_folds: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Random partition of case indices into ``n_folds`` near-equal folds."""
    if n_cases < n_folds:
        raise ValueError(f"cannot split {n_cases} cases into {n_folds} non-empty folds")
    perm = np.random.default_rng(seed).permutation(n_cases)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


def draw_patches(samples: Sequence[Sample], n: int, config: TrainConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for _ in range(n):
        s = samples[int(rng.integers(len(samples)))]
        x, y, _ = sample_patch(s.images, s.labels, config.patch_size, config.fg_prob, rng)
        if config.flip_aug:
            x, y, _ = random_flip(x, y, (True, True, True), rng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs).astype(np.float32), np.stack(ys)


@dataclass
class StepLoss:
    raw: float
    mixup: float = 0.0

    @property
    def total(self) -> float:
        return self.raw + self.mixup


def compute_loss(model, x_raw, y_raw, x_mix=None, y_mix=None):
    """Deep-supervised loss on raw patches plus soft CE on MixUp patches (unweighted sum)."""
    dtype = model.parameters()[0].dtype
    outs = model(Tensor(x_raw.astype(dtype, copy=False)))
    strides = model.config.cumulative_strides()[: len(outs)]
    loss_raw = deep_supervised_loss(outs, label_pyramid(y_raw, strides, dtype=dtype))
    if x_mix is None:
        return loss_raw, loss_raw, None
    loss_mix = mixup_loss(model(Tensor(x_mix.astype(dtype, copy=False)))[0], y_mix)
    return loss_raw + loss_mix, loss_raw, loss_mix


# ------------------------------------------------------------------- trainer


@dataclass
class Trainer:
    model: object
    config: TrainConfig
    train_samples: list[Sample]
    val_samples: list[Sample] = field(default_factory=list)
    out_dir: Path | None = None

    def __post_init__(self):
        self.config.check_model(self.model.config)
        self.rng = np.random.default_rng(self.config.seed)
        self.optimizer = SGD(self.model, self.config.momentum, self.config.weight_decay)
        self.epoch = 0
        self.best_metric = -1.0
        self.best_epoch = -1
        self.history: list[dict] = []
        self.digest = config_digest(self.config, self.model.config)
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def make_batch(self):
        cfg = self.config
        x, y = draw_patches(self.train_samples, cfg.batch_size, cfg, self.rng)
        if not cfg.mixup:
            return x, y, None, None
        fx, fy = draw_patches(self.train_samples, cfg.batch_size, cfg, self.rng)
        oh, foh = one_hot(y), one_hot(fy)
        mixed = [mixup(x[k], oh[k], fx[k], foh[k], cfg.mixup_alpha, self.rng) for k in range(cfg.batch_size)]
        return x, y, np.stack([m.x_tilde for m in mixed]), np.stack([m.y_tilde for m in mixed])

    def train_step(self, lr: float, batch=None) -> StepLoss:
        x, y, xm, ym = self.make_batch() if batch is None else batch
        self.model.zero_grad()
        total, raw, mix = compute_loss(self.model, x, y, xm, ym)
        total.backward()
        clip_grad_norm(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step(lr)
        return StepLoss(raw.item(), mix.item() if mix is not None else 0.0)

    def train_epoch(self) -> dict:
        cfg = self.config
        lr = lr_schedule(self.epoch, cfg.epochs, cfg.lr0)
        losses = [self.train_step(lr) for _ in range(cfg.steps_per_epoch)]
        record = {
            "epoch": self.epoch,
            "lr": lr,
            "loss_raw": float(np.mean([l.raw for l in losses])),
            "loss_mixup": float(np.mean([l.mixup for l in losses])) if cfg.mixup else None,
            "val_dsc": None,
        }
        self.epoch += 1
        return record

    def validate(self) -> float:
        predict = model_predictor(self.model)
        pairs = []
        for s in self.val_samples:
            probs = sliding_window(predict, s.images, self.config.patch_size, self.config.overlap)
            pairs.append((np.argmax(probs, axis=0).astype(np.uint8), s.labels))
        return aggregated_dsc(pairs).mean

    def fit(self, epochs: int | None = None) -> list[dict]:
        stop = self.config.epochs if epochs is None else min(self.config.epochs, self.epoch + epochs)
        if self.out_dir is not None and self.epoch == 0:
            (self.out_dir / "train_log.jsonl").write_text("")
        while self.epoch < stop:
            record = self.train_epoch()
            last = self.epoch == self.config.epochs
            if self.val_samples and (self.epoch % self.config.val_every == 0 or last):
                record["val_dsc"] = self.validate()
                if record["val_dsc"] > self.best_metric:
                    self.best_metric, self.best_epoch = record["val_dsc"], record["epoch"]
                    if self.out_dir is not None:
                        self.save(self.out_dir / "best.ckpt")
            self.history.append(record)
            log.info("epoch %d lr %.3g loss %.4f val %s", record["epoch"], record["lr"], record["loss_raw"], record["val_dsc"])
            if self.out_dir is not None:
                with open(self.out_dir / "train_log.jsonl", "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                self.save(self.out_dir / "last.ckpt")
        return self.history

    # checkpoints
    def save(self, path) -> None:
        tensors = {f"param/{k}": v for k, v in model_state(self.model).items()}
        tensors.update({f"velocity/{k}": v for k, v in self.optimizer.velocity.items()})
        meta = {
            "epoch": self.epoch,
            "rng_state": self.rng.bit_generator.state,
            "config_digest": self.digest,
            "model_config": self.model.config.to_dict(),
            "train_config": {**asdict(self.config), "patch_size": list(self.config.patch_size)},
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
        }
        save_tensors(path, tensors, meta)

    def resume(self, path) -> None:
        tensors, meta = load_tensors(path)
        if meta["config_digest"] != self.digest:
            raise ValueError("checkpoint was written with a different configuration")
        load_model_state(self.model, {k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
        self.optimizer.velocity = {k[9:]: v.copy() for k, v in tensors.items() if k.startswith("velocity/")}
        self.epoch = meta["epoch"]
        self.rng.bit_generator.state = meta["rng_state"]
        self.best_metric, self.best_epoch = meta["best_metric"], meta["best_epoch"]


def load_model(path, dtype=np.float32):
    """Rebuild a network from a checkpoint written by :class:`Trainer`."""
    tensors, meta = load_tensors(path)
    model = build_model(ModelConfig.from_dict(meta["model_config"]), seed=None)
    load_model_state(model, {k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    model.astype(dtype)
    return model, meta


def run_fold(samples: list[Sample], fold_id: int, config: TrainConfig, model_config: ModelConfig,
             out_dir=None, pretrained=None) -> Trainer:
    """Train on the other folds, validate on ``fold_id``, keep the best checkpoint."""
    folds = fold_split(len(samples), config.n_folds, config.seed)
    val_idx = set(folds[fold_id].tolist())
    if not val_idx:
        raise ValueError(f"fold {fold_id} is empty")
    model = build_model(model_config, seed=config.seed)
    if pretrained is not None:
        tensors, _ = load_tensors(pretrained)
        skipped = load_model_state(model, {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}, strict=False)
        if skipped:
            log.info("pretrained weights: %d parameters left at initialization", len(skipped))
    trainer = Trainer(
        model,
        config,
        [s for i, s in enumerate(samples) if i not in val_idx],
        [s for i, s in enumerate(samples) if i in val_idx],
        out_dir,
    )
    trainer.fit()
    return trainer

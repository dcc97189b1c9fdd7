"""SGD training loop, evaluation helpers and checkpoint round trips for the detector."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .detect import compute_loss, decode
from .errors import ConfigError, DivergenceError
from .metrics import Box, Detection, GroundTruth, MAPResult, mean_ap
from .model import Detector, ModelConfig, build_model
from .tensor import Tensor

LOG_HEADER = ["epoch", "loss_box", "loss_obj", "loss_cls", "map50", "map5095"]
VELOCITY_PREFIX = "optim.velocity."
EVAL_CONF = 0.001
INFER_CONF = 0.25
NMS_IOU = 0.45


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    warmup_epochs: float = 1.0
    final_lr_ratio: float = 0.01
    grad_clip: float = 10.0
    hflip: bool = True
    eval_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr < 0:  # zero is allowed: a frozen-weight run only updates BN statistics
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.grad_clip < 0 or self.warmup_epochs < 0:
            raise ConfigError("weight_decay, grad_clip and warmup_epochs must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1, epochs >= 0")
        if not 0 < self.final_lr_ratio <= 1:
            raise ConfigError(f"final_lr_ratio must lie in (0, 1], got {self.final_lr_ratio}")


class SGD:
    """Heavy-ball momentum with decoupled weight decay on weight matrices and kernels.

    v <- momentum * v + g;  p <- p - lr * v - lr * wd * p  (wd only where p.ndim >= 2)
    """

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], momentum: float, weight_decay: float):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * v


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def learning_rate(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warm-up, then cosine decay to ``final_lr_ratio * lr`` at the last step."""
    total = max(1, cfg.epochs * steps_per_epoch)
    warm = int(round(cfg.warmup_epochs * steps_per_epoch))
    warm = min(warm, total - 1)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(1, total - warm - 1)
    t = min(1.0, (step - warm) / span)
    lo = cfg.lr * cfg.final_lr_ratio
    return lo + 0.5 * (cfg.lr - lo) * (1 + math.cos(math.pi * t))


def epoch_plan(seed: int, epoch: int, n: int, batch_size: int, hflip: bool) -> tuple[list[np.ndarray], np.ndarray]:
    """Batches and flip flags for one epoch, derived only from (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5 if hflip else np.zeros(n, dtype=bool)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)], flips


def flip_batch(images: np.ndarray, targets: Sequence[np.ndarray], flips: np.ndarray):
    images = images.copy()
    out = []
    for i, (t, f) in enumerate(zip(targets, flips)):
        if f:
            images[i] = images[i][:, :, ::-1]
            t = t.copy()
            t[:, 1] = 1.0 - t[:, 1]
        out.append(t)
    return images, out


def train_step(model: Detector, opt: SGD, images: np.ndarray, targets: Sequence[np.ndarray], lr: float,
               grad_clip: float) -> dict[str, float]:
    model.train()
    with T.checked(False):
        pred = model(Tensor(images))
        loss, parts = compute_loss(pred, targets)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"loss became {loss.item()} (parts {parts})")
        model.zero_grad()
        loss.backward()
    params = [p for _, p in opt.params]
    gnorm = clip_gradients(params, grad_clip)
    if not np.isfinite(gnorm):
        raise DivergenceError(f"gradient norm became {gnorm}")
    opt.step(lr)
    parts["loss"] = loss.item()
    return parts


def predict(model: Detector, images: np.ndarray, conf: float = INFER_CONF, iou: float = NMS_IOU,
            image_ids: Sequence[str] | None = None, batch_size: int = 8) -> list[Detection]:
    """Eval-mode inference over an (N, 3, S, S) array, flattened detections in image order."""
    model.eval()
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(images))]
    out: list[Detection] = []
    with T.checked(False):
        for s in range(0, len(images), batch_size):
            pred = model(Tensor(images[s:s + batch_size]))
            for dets in decode(pred, conf, iou, image_ids=ids[s:s + batch_size]):
                out.extend(dets)
    return out


def ground_truths(targets: Sequence[np.ndarray], image_size: tuple[int, int],
                  image_ids: Sequence[str] | None = None) -> list[GroundTruth]:
    H, W = image_size
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(targets))]
    gts = []
    for iid, t in zip(ids, targets):
        for c, cx, cy, w, h in np.asarray(t).reshape(-1, 5):
            gts.append(GroundTruth(iid, int(c), Box((cx - w / 2) * W, (cy - h / 2) * H,
                                                    (cx + w / 2) * W, (cy + h / 2) * H)))
    return gts


def evaluate(model: Detector, images: np.ndarray, targets: Sequence[np.ndarray],
             image_ids: Sequence[str] | None = None, conf: float = EVAL_CONF,
             iou: float = NMS_IOU) -> tuple[MAPResult, list[Detection]]:
    dets = predict(model, images, conf, iou, image_ids)
    gts = ground_truths(targets, images.shape[2:], image_ids)
    return mean_ap(dets, gts, model.cfg.num_classes), dets


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: Detector, opt: SGD | None = None, meta: dict | None = None) -> None:
    entries = model.state_dict()
    if opt is not None:
        for name, v in opt.velocity.items():
            entries[VELOCITY_PREFIX + name] = v
    config = {"model": model.cfg.to_dict()}
    config.update(meta or {})
    checkpoint.save(path, entries, config)


def load_checkpoint(path: str | Path) -> tuple[Detector, dict, dict[str, np.ndarray]]:
    """Rebuild the model; returns (model, config block, optimizer velocities)."""
    entries, config = checkpoint.load(path)
    model = build_model(ModelConfig(**config["model"]))
    model.load_state_dict(entries)
    velocity = {k[len(VELOCITY_PREFIX):]: v for k, v in entries.items() if k.startswith(VELOCITY_PREFIX)}
    return model, config, velocity


def _fmt(v: float) -> str:
    return f"{v:.8f}"


@dataclass
class EpochRecord:
    epoch: int
    loss_box: float
    loss_obj: float
    loss_cls: float
    map50: float
    map5095: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [_fmt(v) for v in (self.loss_box, self.loss_obj, self.loss_cls,
                                                      self.map50, self.map5095)]


def write_log(path: str | Path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for rec in history:
            w.writerow(rec.row())


def train(model_cfg: ModelConfig, cfg: TrainConfig, images: np.ndarray, targets: Sequence[np.ndarray],
          out_dir: str | Path, val: tuple[np.ndarray, Sequence[np.ndarray]] | None = None,
          resume: bool = False, stop_after: int | None = None,
          progress: Callable[[str], None] | None = None) -> list[EpochRecord]:
    """Train and write ``best.ckpt``, ``last.ckpt`` and ``train_log.csv`` into ``out_dir``.

    Without a validation split the per-epoch mAP is measured on the training
    images.  ``stop_after`` ends the run after that many epochs in this call,
    leaving ``last.ckpt`` for a later ``resume``.
    """
    if len(images) == 0:
        raise ConfigError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    val_images, val_targets = val if val is not None else (images, targets)

    start, best, history = 0, -1.0, []
    if resume and (out / "last.ckpt").exists():
        model, meta, velocity = load_checkpoint(out / "last.ckpt")
        opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
        for name, v in velocity.items():
            opt.velocity[name][...] = v
        start = int(meta["epoch"])
        best = float(meta["best_map50"])
        history = [EpochRecord(**r) for r in meta["history"]]
    else:
        model = build_model(model_cfg, cfg.seed)
        opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)

    def meta(epoch):
        return {"train": asdict(cfg), "epoch": epoch, "best_map50": best,
                "history": [asdict(r) for r in history]}

    if start == 0 and not history:
        save_checkpoint(out / "last.ckpt", model, opt, meta(0))
        if cfg.epochs == 0:
            save_checkpoint(out / "best.ckpt", model, None, meta(0))
            write_log(out / "train_log.csv", history)
            return history

    n = len(images)
    steps = math.ceil(n / cfg.batch_size)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    for epoch in range(start, end):
        batches, flips = epoch_plan(cfg.seed, epoch, n, cfg.batch_size, cfg.hflip)
        sums = np.zeros(3)
        for k, idx in enumerate(batches):
            imgs, tg = flip_batch(images[idx], [targets[i] for i in idx], flips[idx])
            lr = learning_rate(cfg, epoch * steps + k, steps)
            parts = train_step(model, opt, imgs, tg, lr, cfg.grad_clip)
            sums += (parts["loss_box"], parts["loss_obj"], parts["loss_cls"])
        means = sums / len(batches)
        done = epoch + 1
        if done % cfg.eval_every == 0 or done == cfg.epochs:
            res, _ = evaluate(model, val_images, val_targets)
            m50, m5095 = res.map50, res.map5095
        else:
            m50 = m5095 = float("nan")
        history.append(EpochRecord(done, *map(float, means), m50, m5095))
        if progress is not None:
            progress(",".join(history[-1].row()))
        if np.isfinite(m50) and m50 > best:
            best = m50
            save_checkpoint(out / "best.ckpt", model, None, meta(done))
        save_checkpoint(out / "last.ckpt", model, opt, meta(done))
        write_log(out / "train_log.csv", history)
    if not (out / "best.ckpt").exists():
        save_checkpoint(out / "best.ckpt", model, None, meta(end))
    write_log(out / "train_log.csv", history)
    return history

"""Training: RMSProp with momentum, the stepwise learning-rate schedule,
epoch loop with seeded shuffling, best-validation-mIOU checkpointing, and
the binary checkpoint container.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TileSet
from .errors import ConfigError, DivergenceError, FormatError
from .layers import softmax_cross_entropy
from .metrics import iou_per_class, miou_image, mmiou, predict_slice_mask
from .network import Model, build_model, xavier_init  # noqa: F401  (re-exported)
from .tensor import Tensor, backward, recording
from .topology import parse_topology

__all__ = [
    "OptimizerConfig",
    "TrainConfig",
    "RMSProp",
    "lr_at_epoch",
    "Checkpoint",
    "checkpoint_from_model",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
    "train",
    "write_log_csv",
    "xavier_init",
]

DEFAULT_LR_SCHEDULE = ((0, 0.01), (50, 0.001), (100, 5e-4), (150, 1e-5))


@dataclass
class OptimizerConfig:
    decay: float = 0.9  # mean-square accumulator decay
    momentum: float = 0.9
    epsilon: float = 1.0  # added inside the square root
    weight_decay: float = 5e-4  # L2 term, convolution kernels only

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError("decay must lie in [0, 1)")
        if self.momentum < 0.0:
            raise ConfigError("momentum must be >= 0")
        if self.epsilon <= 0.0:
            raise ConfigError("epsilon must be > 0")


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 200
    lr_schedule: tuple = DEFAULT_LR_SCHEDULE
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        thresholds = [e for e, _ in self.lr_schedule]
        if thresholds != sorted(set(thresholds)):
            raise ConfigError("lr schedule epochs must be strictly increasing")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, max_epochs and eval_every must be >= 1")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate of the largest schedule threshold <= epoch."""
    lr = None
    for threshold, value in cfg.lr_schedule:
        if epoch >= threshold:
            lr = value
    if lr is None:
        raise ConfigError(f"epoch {epoch} precedes the first schedule entry")
    return lr


class RMSProp:
    """Per element: g += wd*w (kernels only); ms = d*ms + (1-d)*g^2;
    mom = m*mom + lr*g/sqrt(ms + eps); w -= mom."""

    def __init__(self, params, cfg: OptimizerConfig):
        # params: iterable of (name, Tensor, weight_decay_eligible)
        self.cfg = cfg
        self.params = [(name, t, bool(decay)) for name, t, decay in params]
        self.ms = {name: np.zeros_like(t.data) for name, t, _ in self.params}
        self.mom = {name: np.zeros_like(t.data) for name, t, _ in self.params}
        self.step_count = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.step_count += 1
        for name, tensor, decays in self.params:
            g = tensor.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient in {name} at step {self.step_count}")
            if decays and cfg.weight_decay:
                g = g + cfg.weight_decay * tensor.data
            ms = self.ms[name]
            ms *= cfg.decay
            ms += (1.0 - cfg.decay) * g * g
            mom = self.mom[name]
            mom *= cfg.momentum
            mom += lr * g / np.sqrt(ms + cfg.epsilon)
            tensor.data -= mom

    def state_arrays(self):
        for name, _, _ in self.params:
            yield name, self.ms[name], self.mom[name]

    def load_state(self, ms: dict, mom: dict) -> None:
        for name, t, _ in self.params:
            self.ms[name] = np.asarray(ms[name], dtype=t.data.dtype).reshape(t.data.shape)
            self.mom[name] = np.asarray(mom[name], dtype=t.data.dtype).reshape(t.data.shape)


# ------------------------------------------------------------- checkpointing

CKPT_MAGIC = b"DNCKPT1\n"


@dataclass
class Checkpoint:
    topology_text: str
    epoch: int
    val_miou: float
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    opt_ms: dict[str, np.ndarray] = field(default_factory=dict)
    opt_mom: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None


def checkpoint_from_model(model: Model, optimizer: RMSProp | None = None,
                          epoch: int = -1, val_miou: float = float("nan"),
                          rng: np.random.Generator | None = None) -> Checkpoint:
    ckpt = Checkpoint(
        topology_text=model.topology_text(),
        epoch=epoch,
        val_miou=val_miou,
        params={name: t.data.copy() for name, t, _ in model.parameters()},
        buffers={name: a.copy() for name, a in model.buffers()},
        rng_state=None if rng is None else rng.bit_generator.state,
    )
    if optimizer is not None:
        for name, ms, mom in optimizer.state_arrays():
            ckpt.opt_ms[name] = ms.copy()
            ckpt.opt_mom[name] = mom.copy()
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, u32 little-endian JSON header length, JSON
    header, then raw little-endian f32 blobs. Learnable parameters come
    first so their section length is exactly 4 * count_parameters."""
    sections = [("param", ckpt.params), ("running", ckpt.buffers),
                ("opt_ms", ckpt.opt_ms), ("opt_mom", ckpt.opt_mom)]
    directory = []
    blobs = []
    offset = 0
    for kind, tensors in sections:
        for name, arr in tensors.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            directory.append({"name": name, "kind": kind, "shape": list(arr.shape),
                              "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    header = json.dumps({
        "topology": ckpt.topology_text,
        "epoch": ckpt.epoch,
        "val_miou": None if np.isnan(ckpt.val_miou) else ckpt.val_miou,
        "rng_state": ckpt.rng_state,
        "tensors": directory,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", blob, len(CKPT_MAGIC))
    start = len(CKPT_MAGIC) + 4
    header = json.loads(blob[start : start + header_len].decode())
    payload = blob[start + header_len :]
    sections: dict[str, dict[str, np.ndarray]] = {
        "param": {}, "running": {}, "opt_ms": {}, "opt_mom": {},
    }
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        sections[entry["kind"]][entry["name"]] = arr
    val = header["val_miou"]
    return Checkpoint(
        topology_text=header["topology"],
        epoch=header["epoch"],
        val_miou=float("nan") if val is None else float(val),
        params=sections["param"],
        buffers=sections["running"],
        opt_ms=sections["opt_ms"],
        opt_mom=sections["opt_mom"],
        rng_state=header["rng_state"],
    )


def restore_model(ckpt: Checkpoint, name: str = "restored") -> Model:
    """Rebuild the model a checkpoint describes; forward passes reproduce
    the saved model bitwise (checkpoints are f32)."""
    spec = parse_topology(ckpt.topology_text, name=name)
    model = build_model(spec, seed=0, dtype=np.float32)
    expected = {n for n, _, _ in model.parameters()}
    if expected != set(ckpt.params):
        missing = expected ^ set(ckpt.params)
        raise FormatError(f"checkpoint does not match topology; mismatched tensors: {sorted(missing)[:4]}")
    for pname, t, _ in model.parameters():
        t.data = ckpt.params[pname].astype(np.float32).reshape(t.data.shape)
    for bname, arr in model.buffers():
        arr[...] = ckpt.buffers[bname].reshape(arr.shape)
    return model


# -------------------------------------------------------------- training loop


def _batch_tensors(tiles: TileSet, idx: np.ndarray, dtype) -> tuple[Tensor, np.ndarray]:
    images = tiles.images[idx][..., None].astype(dtype, copy=False)
    labels = tiles.masks[idx]
    return Tensor(images), labels


def _validation_miou(model: Model, val_data, tile_h: int, tile_w: int) -> float:
    per_image = []
    for image, mask in val_data:
        pred = predict_slice_mask(model, image, tile_h, tile_w)
        hc, wc = pred.shape
        ious = iou_per_class(pred, mask[:hc, :wc], model.num_classes)
        per_image.append(miou_image(ious))
    return mmiou(per_image)


def train(model: Model, train_tiles: TileSet, val_data, cfg: TrainConfig,
          opt_cfg: OptimizerConfig, log_path=None, checkpoint_path=None,
          progress=None):
    """Run the epoch loop and return (best_checkpoint, log_rows).

    ``val_data`` is a sequence of (image, mask) slice pairs; validation
    reassembles full slices with batch norm frozen. The checkpoint with the
    highest validation mIOU is retained (earliest epoch wins ties). On
    divergence the last good checkpoint is attached to the raised error.
    """
    if len(train_tiles) == 0:
        raise ConfigError("empty training tile set")
    if not val_data:
        raise ConfigError("need at least one validation slice")
    tile_h, tile_w = train_tiles.tile_h, train_tiles.tile_w

    rng = np.random.default_rng(cfg.seed)
    optimizer = RMSProp(model.parameters(), opt_cfg)
    best: Checkpoint | None = None
    last_good: Checkpoint | None = None
    log_rows: list[dict] = []
    n = len(train_tiles)

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(n)
        loss_sum = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                x, labels = _batch_tensors(train_tiles, idx, model.dtype)
                model.zero_grads()
                with recording() as tape:
                    logits = model.forward(x, train=True)
                    loss = softmax_cross_entropy(logits, labels)
                loss_value = loss.data.item()
                if not np.isfinite(loss_value):
                    raise DivergenceError(f"loss became {loss_value} at epoch {epoch}")
                backward(loss, tape)
                optimizer.step(lr)
                loss_sum += loss_value * len(idx)
        except DivergenceError as err:
            err.checkpoint = best if best is not None else last_good
            raise
        mean_loss = loss_sum / n

        val_miou = None
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.max_epochs - 1:
            val_miou = _validation_miou(model, val_data, tile_h, tile_w)
            if best is None or val_miou > best.val_miou:
                best = checkpoint_from_model(model, optimizer, epoch, val_miou, rng)
        last_good = checkpoint_from_model(model, optimizer, epoch,
                                          float("nan") if val_miou is None else val_miou, rng)

        row = {"epoch": epoch, "loss": mean_loss,
               "val_miou": val_miou, "lr": lr,
               "seconds": time.perf_counter() - t0}
        log_rows.append(row)
        if progress is not None:
            progress(row)

    assert best is not None  # max_epochs >= 1 and the final epoch always validates
    if log_path is not None:
        write_log_csv(log_rows, log_path)
    if checkpoint_path is not None:
        save_checkpoint(best, checkpoint_path)
    return best, log_rows


def write_log_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,val_miou,lr,seconds\n")
        for row in rows:
            val = "" if row["val_miou"] is None else f"{row['val_miou']:.6f}"
            fh.write(f"{row['epoch']},{row['loss']:.9g},{val},{row['lr']:.9g},{row['seconds']:.3f}\n")

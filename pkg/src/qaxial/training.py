"""Training protocol: SGD with momentum, linear warmup + step-decay schedule,
coupled weight decay, per-epoch metrics, and checksummed binary checkpoints.

Shuffling and augmentation randomness are derived from (seed, epoch), never
from a shared stream, so a run resumed from any epoch checkpoint replays the
remaining epochs bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    CheckpointIntegrityError,
    ConfigurationError,
    ContractError,
    TrainingDivergedError,
)
from .zoo import Model, spec_from_text, spec_to_text


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 10
    base_lr: float = 0.1
    warmup_epochs: int = 10
    decay_epochs: tuple = (20, 40, 70)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 9e-5
    seed: int = 0
    decay_bn_params: bool = False  # include bn gamma/beta in weight decay

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if min((self.epochs, self.batch_size, self.warmup_epochs)) < 1:
            raise ConfigurationError("epochs, batch_size, warmup_epochs must be >= 1")
        if min((self.base_lr, self.decay_factor)) <= 0 or self.momentum < 0:
            raise ConfigurationError("rates must be positive")
        if self.decay_epochs and self.warmup_epochs >= min(self.decay_epochs):
            raise ConfigurationError("warmup must end before the first decay epoch")

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)}" for k in (
            "epochs", "batch_size", "base_lr", "warmup_epochs")]
        lines.append("decay_epochs = " + ",".join(map(str, self.decay_epochs)))
        lines += [f"{k} = {getattr(self, k)}" for k in (
            "decay_factor", "momentum", "weight_decay", "seed", "decay_bn_params")]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kwargs = {}
        casts = {
            "epochs": int, "batch_size": int, "warmup_epochs": int, "seed": int,
            "base_lr": float, "decay_factor": float, "momentum": float,
            "weight_decay": float,
            "decay_epochs": lambda v: tuple(int(x) for x in v.split(",") if x),
            "decay_bn_params": lambda v: v.lower() in ("1", "true", "yes"),
        }
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in casts:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = casts[key](raw.strip())
        return cls(**kwargs)


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Linear warmup to base_lr, then a factor cut after each decay epoch."""
    if not 0 <= epoch < config.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.base_lr * (epoch + 1) / config.warmup_epochs
    cuts = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.base_lr * config.decay_factor ** cuts


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float, weight_decay: float) -> None:
    """In-place update: v <- m*v + (grad + wd*param); param <- param - lr*v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ContractError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}")
    g = grad + weight_decay * param if weight_decay else grad
    velocity *= momentum
    velocity += g
    param -= lr * velocity


class SGDMomentum:
    """Applies :func:`sgd_momentum_step` to every registered parameter."""

    def __init__(self, named_params, momentum: float = 0.9,
                 weight_decay: float = 0.0, decay_bn_params: bool = False):
        self._params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_bn_params = decay_bn_params
        self.velocity = {name: np.zeros_like(p.data) for name, p in self._params}

    def _decays(self, p) -> bool:
        if getattr(p, "decay", True):
            return True
        return self.decay_bn_params and getattr(p, "kind", "") == "bn"

    def step(self, lr: float):
        for name, p in self._params:
            if p.grad is None:
                continue
            wd = self.weight_decay if self._decays(p) else 0.0
            sgd_momentum_step(p.data, p.grad, self.velocity[name], lr,
                              self.momentum, wd)

    def zero_grad(self):
        for _, p in self._params:
            p.zero_grad()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    val_top1: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    CSV_HEADER = "epoch,lr,train_loss,train_top1,val_top1,seconds"

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def to_csv(self) -> str:
        rows = [self.CSV_HEADER]
        for r in self.records:  # repr: shortest exact float round-trip
            rows.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},"
                        f"{r.train_top1!r},{r.val_top1!r},{r.seconds:.6f}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != cls.CSV_HEADER:
            raise ContractError("malformed history CSV")
        history = cls()
        for ln in lines[1:]:
            e, lr, tl, tt, vt, sec = ln.split(",")
            history.append(EpochRecord(int(e), float(lr), float(tl),
                                       float(tt), float(vt), float(sec)))
        return history


def _batches(count: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(count) if rng is None else rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def evaluate(model: Model, data, batch_size: int = 64) -> float:
    """Top-1 accuracy with eval-mode batch norm; deterministic."""
    if len(data.labels) == 0:
        raise ContractError("evaluate needs a non-empty dataset")
    was_training = model.training
    model.eval()
    hits = 0
    try:
        with ad.no_grad():
            for idx in _batches(len(data.labels), batch_size, rng=None):
                logits = model(Tensor(data.images[idx]))
                hits += int((logits.data.argmax(axis=1) == data.labels[idx]).sum())
    finally:
        model.train(was_training)
    return hits / len(data.labels)


def train(model: Model, train_data, val_data, config: TrainConfig,
          out_dir=None, augment=None, optimizer: SGDMomentum | None = None,
          start_epoch: int = 0) -> TrainHistory:
    """Run the epoch loop from ``start_epoch`` to ``config.epochs``.

    ``augment``, when given, is called as ``augment(images, rng)`` on each
    training batch.  A checkpoint is written to ``out_dir/checkpoint.qx``
    after every epoch.  Fixed seed and thread count make runs and resumed
    runs bit-identical.
    """
    if optimizer is None:
        optimizer = SGDMomentum(model.named_parameters(), config.momentum,
                                config.weight_decay, config.decay_bn_params)
    history = TrainHistory()
    n = len(train_data.labels)
    model.train()
    for epoch in range(start_epoch, config.epochs):
        started = time.perf_counter()
        lr = lr_schedule(config, epoch)
        shuffle_rng = np.random.default_rng([config.seed, epoch])
        augment_rng = np.random.default_rng([config.seed, epoch, 1])
        loss_sum = 0.0
        seen = 0
        hits = 0
        for step, idx in enumerate(_batches(n, config.batch_size, shuffle_rng)):
            images = train_data.images[idx]
            if augment is not None:
                images = augment(images, augment_rng)
            logits = model(Tensor(images))
            loss = ad.cross_entropy(logits, train_data.labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, step)
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step(lr)
            loss_sum += float(loss.data) * len(idx)
            hits += int((logits.data.argmax(axis=1) == train_data.labels[idx]).sum())
            seen += len(idx)
        val_top1 = evaluate(model, val_data) if val_data is not None else 0.0
        history.append(EpochRecord(epoch, lr, loss_sum / seen, hits / seen,
                                   val_top1, time.perf_counter() - started))
        if out_dir is not None:
            path = Path(out_dir)
            path.mkdir(parents=True, exist_ok=True)
            checkpoint_save(path / "checkpoint.qx", model, optimizer, epoch + 1)
    return history


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config blob, length-prefixed named
# tensors (name, dtype tag, shape, little-endian payload), 64-bit checksum
# ---------------------------------------------------------------------------

_MAGIC = b"QXCKPT\x00\x01"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2,
               np.dtype(np.int64): 3}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray):
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise ContractError(f"cannot serialize dtype {arr.dtype} for {name!r}")
    encoded = name.encode()
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    raw = np.ascontiguousarray(arr).astype(_TAG_DTYPES[tag], copy=False).tobytes()
    buf.write(struct.pack("<BB", tag, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise CheckpointIntegrityError("checkpoint truncated")
        out = self.payload[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _read_tensor(reader: _Reader):
    (name_len,) = reader.unpack("<H")
    name = reader.read(name_len).decode()
    tag, ndim = reader.unpack("<BB")
    if tag not in _TAG_DTYPES:
        raise CheckpointIntegrityError(f"unknown dtype tag {tag}")
    shape = reader.unpack(f"<{ndim}I")
    (nbytes,) = reader.unpack("<Q")
    arr = np.frombuffer(reader.read(nbytes), dtype=_TAG_DTYPES[tag]).reshape(shape)
    return name, arr.astype(_TAG_DTYPES[tag].newbyteorder("="))


def checkpoint_save(path, model: Model, optimizer: SGDMomentum, epoch: int) -> None:
    """Write model parameters, buffers, and optimizer velocity with a checksum."""
    blob = spec_to_text(model.spec)
    blob += f"epoch = {epoch}\n"
    blob += f"momentum = {optimizer.momentum}\n"
    blob += f"weight_decay = {optimizer.weight_decay}\n"
    blob += f"decay_bn_params = {optimizer.decay_bn_params}\n"

    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    encoded = blob.encode()
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)

    entries = [("param/" + name, p.data) for name, p in model.named_parameters()]
    entries += [("buffer/" + name, b) for name, b in model.named_buffers()]
    entries += [("vel/" + name, v) for name, v in optimizer.velocity.items()]
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        _write_tensor(buf, name, arr)
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_checksum(payload))


def checkpoint_load(path):
    """Rebuild (model, optimizer, epoch) from a checkpoint file, bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) + 12:
        raise CheckpointIntegrityError("checkpoint truncated")
    payload, digest = raw[:-8], raw[-8:]
    if _checksum(payload) != digest:
        raise CheckpointIntegrityError("checksum mismatch")
    reader = _Reader(payload)
    if reader.read(len(_MAGIC)) != _MAGIC:
        raise CheckpointIntegrityError("bad magic bytes")
    (version,) = reader.unpack("<I")
    if version != _VERSION:
        raise CheckpointIntegrityError(f"unsupported version {version}")
    (blob_len,) = reader.unpack("<I")
    blob = reader.read(blob_len).decode()

    meta = {}
    spec_lines = []
    for line in blob.splitlines():
        key = line.split("=")[0].strip()
        if key in ("epoch", "momentum", "weight_decay", "decay_bn_params"):
            meta[key] = line.partition("=")[2].strip()
        else:
            spec_lines.append(line)
    spec = spec_from_text("\n".join(spec_lines))
    model = Model(spec, seed=0)

    (count,) = reader.unpack("<I")
    tensors = dict(_read_tensor(reader) for _ in range(count))
    params = dict(model.named_parameters())
    for name, p in params.items():
        key = "param/" + name
        if key not in tensors or tensors[key].shape != p.data.shape:
            raise CheckpointIntegrityError(f"missing or misshapen tensor {key}")
        p.data = np.ascontiguousarray(tensors[key])
    for name, mod in model.named_modules():
        for bname in list(mod._buffers):
            full = f"{name}.{bname}" if name else bname
            key = "buffer/" + full
            if key not in tensors:
                raise CheckpointIntegrityError(f"missing buffer {key}")
            mod.register_buffer(bname, np.ascontiguousarray(tensors[key]))

    optimizer = SGDMomentum(model.named_parameters(),
                            momentum=float(meta["momentum"]),
                            weight_decay=float(meta["weight_decay"]),
                            decay_bn_params=meta["decay_bn_params"] == "True")
    for name in optimizer.velocity:
        key = "vel/" + name
        if key not in tensors:
            raise CheckpointIntegrityError(f"missing velocity {key}")
        optimizer.velocity[name] = np.ascontiguousarray(tensors[key])
    return model, optimizer, int(meta["epoch"])

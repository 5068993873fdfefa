"""SGD training loop, evaluation, and binary checkpointing.

Training is deterministic for a fixed (config, manifest, seed) when the
loader runs single-threaded: parameter init derives from the seed and
parameter names, while shuffling and augmentation consume one dedicated
generator whose state is carried inside checkpoints, so a resumed run
continues bit-identically.

Checkpoint container layout: magic ``OSTEOCKPT1``, a little-endian u32
entry count, then per entry {u32 name length, name bytes, u32 rank, u32
dims, u8 dtype tag, raw little-endian payload}, and a trailing sha256 of
the canonical config text (which is itself embedded as an entry).
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import GradingNetwork, build_network
from .data import DatasetManifest, GradeRecord, augment, load_image, load_manifest
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .losses import loss_for
from .metrics import ConfusionMatrix, MetricsReport, predict_grade, report_from_labels
from .runconfig import RunConfig, canonical_text, parse_run_config_text

logger = logging.getLogger(__name__)

MAGIC = b"OSTEOCKPT1"
_TAG_BY_DTYPE = {"<f4": 1, "<f8": 2, "<i8": 3, "<u8": 4, "|u1": 5}
_DTYPE_BY_TAG = {v: k for k, v in _TAG_BY_DTYPE.items()}

LOG_HEADER = "epoch,train_loss,val_acc,val_mae,val_qwk"


# -- optimizer ---------------------------------------------------------------


def sgd_step(
    params: dict[str, Tensor],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """Momentum SGD: buffer = m * buffer + grad; param -= lr * buffer.

    Tensors without ``requires_grad`` (running statistics) are untouched;
    a missing gradient counts as zero.
    """
    for name, tensor in params.items():
        if not tensor.requires_grad:
            continue
        grad = tensor.grad
        if grad is not None and grad.shape != tensor.data.shape:
            raise NumericError(f"gradient shape mismatch for {name}")
        buf = state.get(name)
        if buf is None:
            buf = np.zeros_like(tensor.data)
            state[name] = buf
        buf *= momentum
        if grad is not None:
            buf += grad
        tensor.data -= lr * buf


# -- rng state packing --------------------------------------------------------

_M64 = (1 << 64) - 1


def pack_rng(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported generator {st.get('bit_generator')!r}")
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    words = [s & _M64, (s >> 64) & _M64, inc & _M64, (inc >> 64) & _M64, st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype="<u8")


def restore_rng(words: np.ndarray) -> np.random.Generator:
    if words.shape != (6,):
        raise CheckpointError(f"rng state must have 6 words, got shape {words.shape}")
    w = [int(x) for x in words]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return rng


# -- checkpoint container -----------------------------------------------------


def _write_entry(f, name: str, arr: np.ndarray) -> None:
    dtype_le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    key = _TAG_BY_DTYPE.get(dtype_le.str)
    if key is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(struct.pack("<B", key))
    f.write(np.ascontiguousarray(arr, dtype=dtype_le).tobytes())


def write_container(path, entries: dict[str, np.ndarray], config_text: str) -> None:
    payload = dict(entries)
    payload["meta/config"] = np.frombuffer(config_text.encode(), dtype=np.uint8).copy()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(payload)))
        for name in sorted(payload):
            _write_entry(f, name, payload[name])
        f.write(hashlib.sha256(config_text.encode()).digest())


def read_container(path, hash_mismatch: str = "fail") -> tuple[dict[str, np.ndarray], str]:
    """Parse a checkpoint container; returns (entries, config_text).

    ``hash_mismatch`` is 'fail' or 'warn' and governs what happens when the
    trailing digest does not match the embedded config text.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < len(MAGIC) + 4 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic or truncated header")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    body_end = len(blob) - 32
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        label = f"tensor {i} of {count}"
        if pos + 4 > body_end:
            raise CheckpointError(f"{path}: truncated reading name length of {label}")
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if nlen > body_end - pos:
            raise CheckpointError(f"{path}: implausible name length for {label}")
        name = blob[pos : pos + nlen].decode(errors="replace")
        pos += nlen
        label = f"tensor {i} ({name})"
        if pos + 4 > body_end:
            raise CheckpointError(f"{path}: truncated reading rank of {label}")
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if rank > 8:
            raise CheckpointError(f"{path}: corrupted rank {rank} in {label}")
        if pos + 4 * rank + 1 > body_end:
            raise CheckpointError(f"{path}: truncated reading dims of {label}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        tag = blob[pos]
        pos += 1
        dtype = _DTYPE_BY_TAG.get(tag)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} in {label}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = size * np.dtype(dtype).itemsize
        if size < 0 or nbytes > body_end - pos:
            raise CheckpointError(f"{path}: corrupted dims {dims} in {label}")
        entries[name] = np.frombuffer(blob[pos : pos + nbytes], dtype=dtype).reshape(dims).copy()
        pos += nbytes
    if pos != body_end:
        raise CheckpointError(f"{path}: {body_end - pos} unexpected trailing bytes before digest")
    if "meta/config" not in entries:
        raise CheckpointError(f"{path}: missing embedded config")
    config_text = entries["meta/config"].tobytes().decode()
    digest = hashlib.sha256(config_text.encode()).digest()
    if digest != blob[body_end:]:
        msg = f"{path}: config hash mismatch"
        if hash_mismatch == "warn":
            logger.warning(msg)
        else:
            raise CheckpointError(msg)
    return entries, config_text


@dataclass
class Checkpoint:
    """In-memory view of a training snapshot."""

    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    epoch: int
    rng_words: np.ndarray
    best_val_acc: float
    config_text: str

    @property
    def run_config(self) -> RunConfig:
        return parse_run_config_text(self.config_text)


def save_checkpoint(
    path,
    model: GradingNetwork,
    momentum_state: dict[str, np.ndarray],
    epoch: int,
    rng: np.random.Generator,
    best_val_acc: float,
    cfg: RunConfig,
) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, tensor in model.params.items():
        entries[f"param/{name}"] = tensor.data
    for name, buf in momentum_state.items():
        entries[f"momentum/{name}"] = buf
    entries["meta/epoch"] = np.array([epoch], dtype="<i8")
    entries["meta/best_val_acc"] = np.array([best_val_acc], dtype="<f8")
    entries["meta/rng"] = pack_rng(rng)
    write_container(path, entries, canonical_text(cfg))


def load_checkpoint(path, hash_mismatch: str = "fail") -> Checkpoint:
    entries, config_text = read_container(path, hash_mismatch)
    params = {n[len("param/") :]: a for n, a in entries.items() if n.startswith("param/")}
    momentum = {n[len("momentum/") :]: a for n, a in entries.items() if n.startswith("momentum/")}
    for key in ("meta/epoch", "meta/best_val_acc", "meta/rng"):
        if key not in entries:
            raise CheckpointError(f"{path}: missing entry {key}")
    return Checkpoint(
        params=params,
        momentum=momentum,
        epoch=int(entries["meta/epoch"][0]),
        rng_words=entries["meta/rng"],
        best_val_acc=float(entries["meta/best_val_acc"][0]),
        config_text=config_text,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[GradingNetwork, RunConfig]:
    cfg = ckpt.run_config
    model = build_network(cfg.model, cfg.train.seed)
    expected = set(model.params)
    found = set(ckpt.params)
    if expected != found:
        missing = sorted(expected - found)[:3]
        extra = sorted(found - expected)[:3]
        raise CheckpointError(f"parameter names do not match config (missing {missing}, extra {extra})")
    for name, arr in ckpt.params.items():
        tensor = model.params[name]
        if tuple(arr.shape) != tensor.data.shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != expected {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype)
    return model, cfg


# -- data feeding --------------------------------------------------------------


def _loader_threads() -> int:
    raw = os.environ.get("OSTEO_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


class _ImageCache:
    """Decoded, normalized images keyed by path; optional parallel warm-up."""

    def __init__(self, image_size: int, channels: int):
        self.image_size = image_size
        self.channels = channels
        self._store: dict[str, Tensor] = {}

    def get(self, record: GradeRecord) -> Tensor:
        t = self._store.get(record.path)
        if t is None:
            t = load_image(record, self.image_size, self.channels)
            self._store[record.path] = t
        return t

    def warm(self, records) -> None:
        pending = [r for r in records if r.path not in self._store]
        threads = _loader_threads()
        if threads > 0 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for rec, tensor in zip(pending, pool.map(lambda r: load_image(r, self.image_size, self.channels), pending)):
                    self._store[rec.path] = tensor
        else:
            for rec in pending:
                self.get(rec)


# -- evaluation -----------------------------------------------------------------


def evaluate_model(
    model: GradingNetwork,
    records,
    image_size: int,
    channels: int,
    cache: _ImageCache | None = None,
    cbam_bypass: bool = False,
    undefined_qwk: float | None = None,
) -> tuple[MetricsReport, ConfusionMatrix]:
    """Eval-mode metrics over records, in manifest order, no augmentation."""
    records = list(records)
    if not records:
        raise DataError("no records to evaluate")
    cache = cache or _ImageCache(image_size, channels)
    cache.warm(records)
    truths, preds = [], []
    for rec in records:
        logits = model.forward(cache.get(rec), training=False, cbam_bypass=cbam_bypass)
        preds.append(predict_grade(ad.softmax(logits).data))
        truths.append(rec.kl_grade)
    return report_from_labels(truths, preds, undefined_qwk=undefined_qwk)


def evaluate_checkpoint(path, manifest: DatasetManifest, split: str = "test"):
    ckpt = load_checkpoint(path)
    model, cfg = model_from_checkpoint(ckpt)
    records = manifest.for_split(split)
    if not records:
        raise DataError(f"manifest has no records in split {split!r}")
    return evaluate_model(model, records, cfg.data.image_size, cfg.data.channels)


# -- training --------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_acc: float
    val_mae: float
    val_qwk: float

    def as_csv_row(self) -> str:
        return (
            f"{self.epoch},{self.train_loss:.10g},{self.val_acc:.10g},"
            f"{self.val_mae:.10g},{self.val_qwk:.10g}"
        )


@dataclass
class TrainResult:
    logs: list[EpochLog]
    best_epoch: int
    best_val_acc: float
    last_path: str
    best_path: str
    log_path: str
    model: GradingNetwork


def _write_log(path, logs: list[EpochLog]) -> None:
    with open(path, "w") as f:
        f.write(LOG_HEADER + "\n")
        for row in logs:
            f.write(row.as_csv_row() + "\n")


def train(
    cfg: RunConfig,
    manifest: DatasetManifest | None = None,
    out_dir: str = "run",
    resume: str | None = None,
    hash_mismatch: str = "fail",
    progress: bool = False,
    epoch_hook=None,
) -> TrainResult:
    """Run the optimization loop and checkpoint under ``out_dir``.

    ``last.ckpt`` is written at each cadence boundary and at the end;
    ``best.ckpt`` tracks the highest validation accuracy. ``resume`` picks
    up from a previous ``last.ckpt`` bit-identically. ``epoch_hook(model,
    log_row)``, when given, runs after each epoch; a truthy return stops
    training early (a final ``last.ckpt`` is still written).
    """
    if cfg.data.channels != cfg.model.in_channels:
        raise ConfigError(
            f"data channels {cfg.data.channels} != model in_channels {cfg.model.in_channels}"
        )
    if manifest is None:
        if not cfg.data.manifest:
            raise ConfigError("no manifest given and [data] manifest is empty")
        manifest = load_manifest(cfg.data.manifest)
    train_records = manifest.for_split("train")
    val_records = manifest.for_split("val")
    if not train_records or not val_records:
        raise DataError("manifest needs non-empty train and val splits")

    os.makedirs(out_dir, exist_ok=True)
    last_path = os.path.join(out_dir, "last.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    log_path = os.path.join(out_dir, "log.csv")

    momentum_state: dict[str, np.ndarray] = {}
    logs: list[EpochLog] = []
    if resume:
        ckpt = load_checkpoint(resume, hash_mismatch)
        if ckpt.config_text != canonical_text(cfg):
            msg = "resume checkpoint was produced by a different config"
            if hash_mismatch == "warn":
                logger.warning(msg)
            else:
                raise CheckpointError(msg)
        model, _ = model_from_checkpoint(ckpt)
        for name, arr in ckpt.momentum.items():
            if name not in model.params:
                raise CheckpointError(f"momentum buffer {name} has no matching parameter")
            momentum_state[name] = arr.astype(model.params[name].data.dtype).copy()
        rng = restore_rng(ckpt.rng_words)
        start_epoch = ckpt.epoch
        best_val_acc = ckpt.best_val_acc
        best_epoch = 0
    else:
        model = build_network(cfg.model, cfg.train.seed)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.train.seed, 0xD1CE])))
        start_epoch = 0
        best_val_acc = -1.0
        best_epoch = 0

    cache = _ImageCache(cfg.data.image_size, cfg.data.channels)
    cache.warm(train_records)
    cache.warm(val_records)
    trainable = dict(model.trainable())

    for epoch in range(start_epoch + 1, cfg.train.epochs + 1):
        order = rng.permutation(len(train_records))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.train.batch_size):
            batch = [train_records[i] for i in order[start : start + cfg.train.batch_size]]
            model.zero_grads()
            scale = 1.0 / len(batch)
            bad: list[tuple[str, float]] = []
            kind = "cross_entropy" if epoch <= cfg.loss.warmup_epochs else cfg.loss.kind
            for rec in batch:
                x = cache.get(rec)
                if cfg.augment.enabled:
                    x = augment(x, cfg.augment, rng)
                logits = model.forward(x, training=True)
                probs = ad.softmax(logits)
                loss = loss_for(kind, probs, rec.kl_grade, cfg.loss.penalty)
                value = loss.item()
                if not math.isfinite(value):
                    bad.append((rec.path, value))
                    continue
                loss_sum += value
                loss.backward(scale)
            if bad:
                dump = "; ".join(f"{p} -> {v}" for p, v in bad)
                raise NumericError(f"non-finite loss at epoch {epoch}: {dump}")
            sgd_step(trainable, momentum_state, cfg.train.lr, cfg.train.momentum)

        report, _ = evaluate_model(
            model, val_records, cfg.data.image_size, cfg.data.channels, cache=cache,
            undefined_qwk=float("nan"),
        )
        row = EpochLog(
            epoch=epoch,
            train_loss=loss_sum / len(train_records),
            val_acc=report.accuracy,
            val_mae=report.mae,
            val_qwk=report.qwk,
        )
        logs.append(row)
        if progress:
            print(row.as_csv_row(), flush=True)

        if report.accuracy > best_val_acc:
            best_val_acc = report.accuracy
            best_epoch = epoch
            save_checkpoint(best_path, model, momentum_state, epoch, rng, best_val_acc, cfg)
        if epoch % cfg.train.checkpoint_every == 0 or epoch == cfg.train.epochs:
            save_checkpoint(last_path, model, momentum_state, epoch, rng, best_val_acc, cfg)
        _write_log(log_path, logs)
        if epoch_hook is not None and epoch_hook(model, row):
            save_checkpoint(last_path, model, momentum_state, epoch, rng, best_val_acc, cfg)
            break

    return TrainResult(
        logs=logs,
        best_epoch=best_epoch,
        best_val_acc=best_val_acc,
        last_path=last_path,
        best_path=best_path,
        log_path=log_path,
        model=model,
    )

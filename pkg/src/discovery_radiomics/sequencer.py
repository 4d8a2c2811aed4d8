"""The convolutional radiomic sequencer.

Architecture (default 18x18 grayscale input)::

    conv 3x3 -> 20, ReLU, maxpool 2x2      18 -> 16 -> 8
    conv 3x3 -> 50, ReLU, maxpool 2x2       8 ->  6 -> 3
    conv 3x3 -> 500, ReLU                   3 ->  1          (radiomic sequence)
    fully-connected 500 -> 2, softmax loss                   (discovery head)

``discover`` trains all layers with mini-batch SGD; ``extract_sequences``
runs the trained convolutional stack and drops the head.
"""

import dataclasses
import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .dataset import stack_pixels
from .errors import (BadMagicError, ConfigError, DimensionError, FormatError,
                     TrainingError, TruncationError, VersionError)
from .io_utils import atomic_write_bytes

log = logging.getLogger(__name__)

MODEL_MAGIC = b"RSEQMDL1"
MODEL_VERSION = 1
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "head_w", "head_b")
SEQUENCE_POINTS = ("post_relu", "pre_relu")


@dataclass(frozen=True)
class SequencerConfig:
    input_size: int = 18
    conv_channels: tuple = (20, 50, 500)
    head_classes: int = 2
    seed: int = 0
    learning_rate: float = 0.001
    epochs: int = 60
    batch_size: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0005
    sequence_point: str = "post_relu"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels must be three positive ints, got {self.conv_channels}")
        if self.head_classes < 2:
            raise ConfigError("head_classes must be at least 2")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0; momentum and weight_decay >= 0")
        if self.sequence_point not in SEQUENCE_POINTS:
            raise ConfigError(f"sequence_point must be one of {SEQUENCE_POINTS}")
        self.spatial_sizes()

    def spatial_sizes(self):
        """Spatial size after each of conv1, pool1, conv2, pool2, conv3."""
        sizes, s = [], self.input_size
        for layer in ("conv1", "pool1", "conv2", "pool2", "conv3"):
            if layer.startswith("conv"):
                s -= 2
                if s < 1:
                    raise ConfigError(f"{layer}: input of size {s + 2} is too small for a 3x3 kernel")
            else:
                if s % 2:
                    raise ConfigError(f"{layer}: input of size {s} is odd and cannot be pooled 2x2")
                s //= 2
            sizes.append(s)
        return sizes

    @property
    def sequence_length(self):
        return self.conv_channels[2] * self.spatial_sizes()[-1] ** 2

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown sequencer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SequencerModel:
    params: dict
    config: SequencerConfig
    trained_epochs: int = 0

    def param_shapes(self):
        return _param_shapes(self.config)

    def __eq__(self, other):
        if not isinstance(other, SequencerModel):
            return NotImplemented
        return (self.config == other.config and self.trained_epochs == other.trained_epochs
                and all(np.array_equal(self.params[k], other.params[k]) for k in PARAM_ORDER))


@dataclass
class RadiomicSequence:
    features: np.ndarray
    patient_id: str
    lesion_id: str
    rotation_deg: int
    annotator_id: int
    label: Optional[int] = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: Optional[float]
    seconds: float


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)

    def to_csv(self):
        lines = ["epoch,train_loss,train_acc,val_acc,seconds"]
        for r in self.epochs:
            val = "" if r.val_acc is None else repr(r.val_acc)
            lines.append(f"{r.epoch},{r.train_loss!r},{r.train_acc!r},{val},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"


def _param_shapes(config):
    c1, c2, c3 = config.conv_channels
    k = T.KERNEL
    return {
        "conv1_w": (c1, 1, k, k), "conv1_b": (c1,),
        "conv2_w": (c2, c1, k, k), "conv2_b": (c2,),
        "conv3_w": (c3, c2, k, k), "conv3_b": (c3,),
        "head_w": (config.head_classes, config.sequence_length), "head_b": (config.head_classes,),
    }


def init_model(config):
    """Glorot-uniform weights, zero biases, seeded by ``config.seed``."""
    config.spatial_sizes()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in, fan_out = shape[1], shape[0]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return SequencerModel(params=params, config=config, trained_epochs=0)


def _check_batch(model, batch):
    p = model.config.input_size
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (p, p):
        raise DimensionError(f"batch must have shape (n, 1, {p}, {p}), got {batch.shape}")


def _forward_train(params, x):
    """Forward pass in NHWC layout, keeping what the backward pass needs."""
    cache = {}
    h = T.to_nhwc(x)
    for i, name in enumerate(("conv1", "conv2", "conv3"), start=1):
        cols = T.im2col_nhwc(h)
        wmat = T.weight_matrix(params[name + "_w"])
        a = T.conv_forward_nhwc(cols, h.shape, wmat, params[name + "_b"])
        cache[name] = (cols, h.shape, wmat, a)
        h = T.relu_forward(a)
        if i < 3:
            h, idx = T.maxpool_forward_nhwc(h)
            cache["pool%d" % i] = idx
    a3 = T.to_nchw(cache["conv3"][3])
    flat = T.relu_forward(a3).reshape(len(a3), -1)
    logits = T.fc_forward(flat, params["head_w"], params["head_b"])
    cache["flat"] = flat
    return a3, flat, logits, cache


def _backward(params, cache, grad_logits):
    grads = {}
    g = T.fc_backward(cache["flat"], params["head_w"], grad_logits)
    grads["head_w"], grads["head_b"] = g.grad_weights, g.grad_bias
    cols, in_shape, wmat, a = cache["conv3"]
    grad = T.to_nhwc(g.grad_input.reshape(T.to_nchw(a).shape))
    for i, name in ((3, "conv3"), (2, "conv2"), (1, "conv1")):
        cols, in_shape, wmat, a = cache[name]
        grad = T.relu_backward(a, grad)
        gx, gw, gb = T.conv_backward_nhwc(cols, in_shape, wmat, grad, need_input_grad=i > 1)
        grads[name + "_w"] = T.wmat_to_weights(gw, params[name + "_w"].shape)
        grads[name + "_b"] = gb
        if i > 1:
            grad = T.maxpool_backward_nhwc(cache["pool%d" % (i - 1)], gx)
    return grads


def loss_and_grads(params, batch, labels):
    """Mean softmax loss of the discovery network on one batch, with gradients."""
    _, _, logits, cache = _forward_train(params, batch)
    loss, grad_logits = T.softmax_cross_entropy(logits, labels)
    return loss, _backward(params, cache, grad_logits), logits


def forward(model, batch):
    """Return ``(sequences, logits)`` for a (n, 1, P, P) batch."""
    _check_batch(model, batch)
    a3, flat, logits, _ = _forward_train(model.params, batch)
    if model.config.sequence_point == "pre_relu":
        sequences = a3.reshape(a3.shape[0], -1)
    else:
        sequences = flat
    return sequences, logits


def _archive_arrays(archive, config):
    if archive.patch_size != config.input_size:
        raise DimensionError(
            f"archive patch size {archive.patch_size} does not match sequencer input {config.input_size}")
    x = stack_pixels(archive)[:, None, :, :]
    y = np.array([p.label for p in archive.patches], dtype=np.int64)
    return x, y


def _predict_labels(model, x, batch_size=500):
    out = []
    for start in range(0, len(x), batch_size):
        _, logits = forward(model, x[start:start + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def discover(train, val, config, progress=None):
    """Train the sequencer plus head on ``train``; log accuracy on ``val``.

    Runs exactly ``config.epochs`` epochs and returns the final weights with
    a per-epoch :class:`TrainingLog`. ``val`` may be None or empty.
    """
    model = init_model(config)
    history = TrainingLog()
    x, y = _archive_arrays(train, config)
    if len(x) == 0:
        raise TrainingError("training archive is empty")
    if len(np.unique(y)) < 2:
        raise TrainingError("training archive contains a single class")
    if val is not None and len(val.patches):
        xv, yv = _archive_arrays(val, config)
    else:
        xv = yv = None

    params = model.params
    state = T.OptimizerState(config.learning_rate, config.momentum, config.weight_decay)
    n = len(x)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads, logits = loss_and_grads(params, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss} at epoch {epoch}, batch {b}")
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
            params, state = T.sgd_step(params, grads, state)
        model = SequencerModel(params=params, config=config, trained_epochs=epoch + 1)
        val_acc = None
        if xv is not None:
            val_acc = float((_predict_labels(model, xv) == yv).mean())
        record = EpochRecord(epoch, loss_sum / n, correct / n, val_acc, time.perf_counter() - t0)
        history.epochs.append(record)
        log.info("epoch %d loss %.4f train_acc %.3f val_acc %s", epoch, record.train_loss,
                 record.train_acc, val_acc)
        if progress is not None:
            progress(record)
    return model, history



def extract_sequences(model, archive, batch_size=500) -> List[RadiomicSequence]:
    x, _ = _archive_arrays(archive, model.config)
    feats = extract_matrix(model, x, batch_size)
    return [
        RadiomicSequence(feats[i], p.patient_id, p.lesion_id, p.rotation_deg, p.annotator_id, p.label)
        for i, p in enumerate(archive.patches)
    ]


def extract_matrix(model, x, batch_size=500):
    chunks = [forward(model, x[s:s + batch_size])[0] for s in range(0, len(x), batch_size)]
    if not chunks:
        return np.zeros((0, model.config.sequence_length))
    return np.concatenate(chunks)


# -- model file -------------------------------------------------------------

def model_to_bytes(model):
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<III", MODEL_VERSION, len(cfg), model.trained_epochs))
    buf.write(cfg)
    for name in PARAM_ORDER:
        arr = model.params[name]
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_model(model, path):
    atomic_write_bytes(path, model_to_bytes(model))


def model_from_bytes(data):
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(data):
            raise TruncationError(f"file ends inside {what}", offset=pos)
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if len(data) < len(MODEL_MAGIC) and MODEL_MAGIC.startswith(data):
        raise TruncationError("file ends inside magic", offset=len(data))
    if data[:8] != MODEL_MAGIC:
        raise BadMagicError("not a sequencer model file", offset=0)
    pos = 8
    version, cfg_len, trained = struct.unpack("<III", take(12, "header"))
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported model version {version}", offset=8)
    cfg_at = pos
    try:
        config = SequencerConfig.from_dict(json.loads(take(cfg_len, "config block").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config block: {exc}", offset=cfg_at) from exc
    shapes = _param_shapes(config)
    params = {}
    for name in PARAM_ORDER:
        at = pos
        (ndim,) = struct.unpack("<I", take(4, f"{name} rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        if shape != shapes[name]:
            raise FormatError(f"{name} has shape {shape}, config implies {shapes[name]}", offset=at)
        count = int(np.prod(shape))
        params[name] = np.frombuffer(take(8 * count, name), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise FormatError("trailing bytes after last parameter", offset=pos)
    return SequencerModel(params=params, config=config, trained_epochs=trained)


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())

"""Vertical and horizontal crossbar sub-networks: construction, training,
center-pixel prediction (per patch or dense over an image) and checkpoints.

Output class 0 is tumor and class 1 is background, so ``probs[:, 0]`` is the
tumor probability.
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .sampling import Orientation, extract_windows, pad_for

log = logging.getLogger(__name__)

# (kind, out_channels, kernel (h, w), stride (h, w)) for the vertical model;
# the horizontal model transposes every kernel and stride.
VERTICAL_LAYERS = (
    ("C", 16, (5, 3), (1, 1)),
    ("C", 36, (5, 3), (1, 1)),
    ("P", 36, (2, 2), (2, 2)),
    ("C", 64, (5, 3), (1, 1)),
    ("P", 64, (2, 2), (2, 2)),
    ("C", 64, (5, 3), (1, 1)),
    ("C", 64, (6, 1), (1, 1)),
    ("C", 64, (6, 1), (1, 1)),
    ("C", 500, (7, 1), (1, 1)),
    ("C", 2, (1, 1), (1, 1)),
    ("S", 2, None, None),
)
DROPOUT_AFTER = 8  # index of the 500-map conv (layer 9)

# map sizes entering layers 1..11 for a vertical patch
VERTICAL_SHAPE_TRACE = ((100, 20), (96, 18), (92, 16), (46, 8), (42, 6), (21, 3),
                        (17, 1), (12, 1), (7, 1), (1, 1), (1, 1))


class CheckpointError(ValueError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class DegenerateLabelsError(ValueError):
    pass


def layer_table(orientation):
    orientation = Orientation(orientation)
    if orientation is Orientation.vertical:
        return VERTICAL_LAYERS
    return tuple((k, c, None if ks is None else ks[::-1], None if st is None else st[::-1])
                 for k, c, ks, st in VERTICAL_LAYERS)


def layer_spec_string(orientation):
    parts = []
    for kind, ch, ks, st in layer_table(orientation):
        if kind == "S":
            parts.append("S")
        else:
            parts.append(f"{kind}{ch}:{ks[0]}x{ks[1]}/{st[0]}x{st[1]}")
    return ",".join(parts)


def patch_dims(orientation):
    return Orientation(orientation).default_dims


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    max_epochs: int = 20
    batch_size: int = 64
    dropout_rate: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    shuffle_seed: int = 0
    patience: int = 3
    restore_best: bool = True

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_error: float
    val_error: float


@dataclass
class SubModel:
    orientation: Orientation
    convs: list
    round_index: int = 1
    rng_seed: int = 0
    optimizer: Optional[nn.OptimizerState] = field(default=None, repr=False)

    @property
    def patch_shape(self):
        return patch_dims(self.orientation)

    @property
    def dtype(self):
        return self.convs[0].kernel.dtype

    def params(self):
        out = []
        for conv in self.convs:
            out += [conv.kernel, conv.bias]
        return out

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        m = self.copy()
        for conv in m.convs:
            conv.kernel = conv.kernel.astype(dtype)
            conv.bias = conv.bias.astype(dtype)
        m.optimizer = None
        return m

    # ---------------------------------------------------------------- forward

    def logits(self, x, mode="eval", rng=None, dropout_rate=0.5, keep_cache=False):
        """Batch forward on ``(n, 1, h, w)`` patches; returns ``(n, 2)`` logits
        (and the backward cache when ``keep_cache``)."""
        expected = self.patch_shape
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != expected:
            raise nn.ShapeError(f"{self.orientation.value} model expects (n, 1, {expected[0]}, {expected[1]}) "
                                f"patches, got {x.shape}")
        x = x.transpose(1, 0, 2, 3)  # channel-major internally
        cache = []
        ci = 0
        for idx, (kind, _, ks, st) in enumerate(layer_table(self.orientation)):
            if kind == "C":
                conv = self.convs[ci]
                ci += 1
                out, cols = nn.conv_forward_cn(x, conv.kernel, conv.bias, conv.stride)
                entry = {"kind": "C", "conv": conv, "shape": x.shape, "cols": cols}
                if ci < len(self.convs):
                    out = nn.relu_forward(out)
                    entry["active"] = out > 0
                if idx == DROPOUT_AFTER:
                    out, entry["drop"] = nn.dropout(out, dropout_rate, mode, rng)
                x = out
            elif kind == "P":
                out, arg = nn.maxpool_forward(x, ks, st)
                entry = {"kind": "P", "shape": x.shape, "arg": arg, "ks": ks, "st": st}
                x = out
            else:
                break
            if keep_cache:
                cache.append(entry)
        z = x.reshape(2, -1).T
        return (z, cache) if keep_cache else np.ascontiguousarray(z)

    def backward(self, cache, grad_logits):
        """Parameter gradients, in :meth:`params` order."""
        g = np.ascontiguousarray(grad_logits.T).reshape(2, -1, 1, 1)
        grads = []
        for pos in range(len(cache) - 1, -1, -1):
            entry = cache[pos]
            if entry["kind"] == "P":
                g = nn.maxpool_backward(g, entry["arg"], entry["shape"], entry["ks"], entry["st"])
                continue
            g = nn.dropout_backward(g, entry.get("drop"))
            if "active" in entry:
                g = g * entry["active"]
            conv = entry["conv"]
            g, gk, gb = nn.conv_backward_cn(entry["shape"], conv.kernel, conv.stride, g, entry["cols"],
                                            need_input_grad=pos > 0)
            grads += [gb, gk]
        return grads[::-1]

    def predict_patches(self, windows, batch_size=256):
        """Tumor/background probabilities for ``(n, h, w)`` patch windows."""
        windows = np.asarray(windows, dtype=self.dtype)
        if windows.ndim == 2:
            windows = windows[None]
        out = np.empty((len(windows), 2), dtype=self.dtype)
        for s in range(0, len(windows), batch_size):
            out[s:s + batch_size] = nn.softmax(self.logits(windows[s:s + batch_size, None]))
        return out

    def forward(self, patch):
        """``(p_tumor, p_background)`` for a single patch (array or Patch)."""
        pixels = getattr(patch, "pixels", patch)
        p = self.predict_patches(np.asarray(pixels)[None])[0]
        return float(p[0]), float(p[1])

    def dense_logits(self, padded):
        """Logits for every window position of an already padded 2-D map.

        Equivalent to running :meth:`logits` on each ``patch_shape`` window
        with top-left at ``(i, j)``; pooling is replaced by dilation so all
        windows share one pass. Returns ``(2, H - h + 1, W - w + 1)``.
        """
        x = np.asarray(padded, dtype=self.dtype)[None]
        dil = [1, 1]
        ci = 0
        for kind, _, ks, st in layer_table(self.orientation):
            if kind == "C":
                conv = self.convs[ci]
                ci += 1
                x = nn.conv2d_dilated(x, conv.kernel, conv.bias, tuple(dil))
                if ci < len(self.convs):
                    np.maximum(x, 0, out=x)
            elif kind == "P":
                x = nn.maxpool_dilated(x, ks, tuple(dil))
                dil = [dil[0] * st[0], dil[1] * st[1]]
        return x

    def dense_probs(self, image, roi=None):
        """Tumor probability for every pixel of ``image`` (or of ``roi`` =
        ``(r0, r1, c0, c1)``, half-open) from one dilated pass."""
        image = np.asarray(image, dtype=self.dtype)
        h, w = self.patch_shape
        padded, _ = pad_for(image, (h, w))
        r0, r1, c0, c1 = roi or (0, image.shape[0], 0, image.shape[1])
        z = self.dense_logits(padded[r0:r1 + h - 1, c0:c1 + w - 1])
        z = z - z.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e[0] / e.sum(axis=0)

    def predict_proba_at(self, image, centers):
        """Tumor probability at each center, picking the cheaper of a dense
        pass over the centers' bounding box or per-patch evaluation."""
        centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        if len(centers) == 0:
            return np.empty(0, dtype=self.dtype)
        r0, c0 = centers.min(axis=0)
        r1, c1 = centers.max(axis=0) + 1
        h, w = self.patch_shape
        box = (r1 - r0 + h) * (c1 - c0 + w)
        if box < DENSE_COST_RATIO * len(centers):
            probs = self.dense_probs(image, (r0, r1, c0, c1))
            return probs[centers[:, 0] - r0, centers[:, 1] - c0]
        return self.predict_patches(extract_windows(image, centers, (h, w), self.dtype))[:, 0]

    def predict_labels(self, image, centers):
        return (self.predict_proba_at(image, centers) > 0.5).astype(np.int64)


# per-pixel cost of one patch forward relative to one dense output pixel
DENSE_COST_RATIO = 40


def shape_trace(orientation):
    """Spatial map size entering each of the 11 layers."""
    h, w = patch_dims(orientation)
    trace = [(h, w)]
    for kind, _, ks, st in layer_table(orientation):
        if kind == "S":
            break
        h, w = (h - ks[0]) // st[0] + 1, (w - ks[1]) // st[1] + 1
        trace.append((h, w))
    return tuple(trace)


def build(orientation, init_seed=0, init_std=None, dtype=np.float32):
    """Gaussian-initialized sub-model for ``orientation``.

    ``init_std=None`` scales each conv by ``sqrt(2 / fan_in)``; a float uses
    that fixed std for every layer. Biases start at zero.
    """
    orientation = Orientation(orientation)
    expected = VERTICAL_SHAPE_TRACE if orientation is Orientation.vertical else \
        tuple(s[::-1] for s in VERTICAL_SHAPE_TRACE)
    trace = shape_trace(orientation)
    if trace != expected:
        raise AssertionError(f"shape trace {trace} != {expected}")
    rng = np.random.default_rng(init_seed)
    convs = []
    in_ch = 1
    for kind, ch, ks, st in layer_table(orientation):
        if kind == "C":
            fan_in = in_ch * ks[0] * ks[1]
            std = np.sqrt(2.0 / fan_in) if init_std is None else init_std
            kernel = (rng.standard_normal((ch, in_ch) + tuple(ks)) * std).astype(dtype)
            convs.append(nn.ConvLayer(kernel, np.zeros(ch, dtype=dtype), tuple(st)))
        in_ch = ch
    return SubModel(orientation, convs, round_index=1, rng_seed=init_seed)


def error_rate(model, windows, labels):
    if len(labels) == 0:
        return float("nan")
    pred = model.predict_patches(windows)[:, 0] > 0.5
    return float(np.mean(pred != (np.asarray(labels) == 1)))


def train_epochs(model, windows, labels, val_windows=None, val_labels=None, config=None):
    """Shuffled mini-batch SGD on ``(n, h, w)`` windows with binary labels
    (1 = tumor). Continues from the model's current parameters and
    optimizer state.

    Returns ``(model, [EpochStats, ...])``. With validation data, training
    stops after ``config.patience`` epochs without a validation
    improvement and (``restore_best``) keeps the best epoch's parameters.
    """
    config = config or TrainConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DegenerateLabelsError("degenerate labels: training set needs both classes")
    windows = np.asarray(windows, dtype=model.dtype)
    targets = 1 - labels  # class 0 = tumor
    has_val = val_windows is not None and len(val_windows) > 0
    if model.optimizer is None or model.optimizer.learning_rate != config.learning_rate \
            or model.optimizer.momentum != config.momentum:
        model.optimizer = nn.OptimizerState(config.learning_rate, config.momentum)
    params = model.params()
    rng = np.random.default_rng([config.shuffle_seed, model.rng_seed, model.round_index])
    stats = []
    best = (np.inf, None, None)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(windows))
        total_loss = 0.0
        wrong = 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            x = windows[idx][:, None]
            z, cache = model.logits(x, "train", rng, config.dropout_rate, keep_cache=True)
            loss, gz = nn.softmax_cross_entropy(z.astype(np.float64), targets[idx])
            total_loss += loss * len(idx)
            wrong += int(np.sum(np.argmax(z, axis=1) != targets[idx]))
            grads = model.backward(cache, gz.astype(model.dtype))
            if config.weight_decay:
                grads = [g + model.dtype.type(config.weight_decay) * p for g, p in zip(grads, params)]
            nn.sgd_step(params, grads, model.optimizer)
        val_err = error_rate(model, val_windows, val_labels) if has_val else float("nan")
        stats.append(EpochStats(epoch, total_loss / len(windows), wrong / len(windows), val_err))
        log.info("%s round %d epoch %d: loss %.4f train_err %.4f val_err %.4f", model.orientation.value,
                 model.round_index, epoch, stats[-1].train_loss, stats[-1].train_error, val_err)
        if not has_val:
            continue
        if val_err < best[0]:
            best = (val_err, [p.copy() for p in params], copy.deepcopy(model.optimizer))
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if has_val and config.restore_best and best[1] is not None:
        for p, b in zip(params, best[1]):
            p[...] = b
        model.optimizer = best[2]
    return model, stats


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = "CROSSBAR-CKPT"
CKPT_VERSION = 1


def save_checkpoint(model, path):
    header = (f"{CKPT_MAGIC} version={CKPT_VERSION} orientation={model.orientation.value} "
              f"round={model.round_index} seed={model.rng_seed} layers={layer_spec_string(model.orientation)}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for conv in model.convs:
            fh.write(np.ascontiguousarray(conv.kernel, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(conv.bias, dtype="<f4").tobytes())


def _parse_header(line):
    try:
        text = line.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise CheckpointHeaderError("corrupt header: not ASCII") from exc
    parts = text.split(" ")
    if not parts or parts[0] != CKPT_MAGIC:
        raise CheckpointHeaderError(f"corrupt header: bad magic {parts[0] if parts else ''!r}")
    fields = {}
    for p in parts[1:]:
        if "=" not in p:
            raise CheckpointHeaderError(f"corrupt header: bad field {p!r}")
        k, v = p.split("=", 1)
        fields[k] = v
    missing = {"version", "orientation", "round", "layers"} - fields.keys()
    if missing:
        raise CheckpointHeaderError(f"corrupt header: missing {sorted(missing)}")
    if fields["version"] != str(CKPT_VERSION):
        raise CheckpointHeaderError(f"corrupt header: unsupported version {fields['version']}")
    try:
        fields["orientation"] = Orientation(fields["orientation"])
        fields["round"] = int(fields["round"])
        fields["seed"] = int(fields.get("seed", 0))
    except ValueError as exc:
        raise CheckpointHeaderError(f"corrupt header: {exc}") from exc
    return fields


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointHeaderError(f"{path}: corrupt header: no header line")
    fields = _parse_header(raw[:nl])
    orientation = fields["orientation"]
    if fields["layers"] != layer_spec_string(orientation):
        raise CheckpointMismatchError(
            f"{path}: layer spec {fields['layers']!r} does not match the {orientation.value} architecture")
    template = build(orientation, 0)
    payload = memoryview(raw)[nl + 1:]
    need = sum(c.kernel.size + c.bias.size for c in template.convs) * 4
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise CheckpointMismatchError(f"{path}: {len(payload) - need} unexpected trailing bytes")
    pos = 0
    for conv in template.convs:
        for name in ("kernel", "bias"):
            arr = getattr(conv, name)
            n = arr.size * 4
            setattr(conv, name, np.frombuffer(payload[pos:pos + n], dtype="<f4")
                    .astype(np.float32).reshape(arr.shape))
            pos += n
    template.round_index = fields["round"]
    template.rng_seed = fields["seed"]
    return template


GRID_MAGIC = "CROSSBAR-GRID"


def save_grid(path, grid):
    grid = np.asarray(grid)
    with open(path, "wb") as fh:
        fh.write(f"{GRID_MAGIC} version={CKPT_VERSION} rows={grid.shape[0]} cols={grid.shape[1]}\n".encode())
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def load_grid(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    parts = raw[:nl].decode("ascii", "replace").split()
    if nl < 0 or not parts or parts[0] != GRID_MAGIC:
        raise CheckpointHeaderError(f"{path}: corrupt grid header")
    f = dict(p.split("=", 1) for p in parts[1:])
    rows, cols = int(f["rows"]), int(f["cols"])
    payload = raw[nl + 1:]
    if len(payload) != rows * cols * 4:
        raise TruncatedPayloadError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)

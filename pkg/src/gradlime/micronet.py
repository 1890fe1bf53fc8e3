"""Fixed micro-CNNs with hand-written forward and backward passes.

Activations are kept channels-last internally ([N, *spatial, C]) so every
convolution is one im2col copy plus one BLAS matmul; the public API takes and
returns channels-first tensors.
"""
from __future__ import annotations

import contextlib
import copy
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import Prng, atomic_write_bytes, read_tensor, write_tensor

log = logging.getLogger(__name__)

STANDARD = "standard"
GUIDED = "guided"
BACKWARD_MODES = (STANDARD, GUIDED)


class ShapeMismatchError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


# -- pass instrumentation -------------------------------------------------------

_counters = threading.local()


@dataclass
class PassCounts:
    forward: int = 0
    backward: int = 0


@contextlib.contextmanager
def count_passes():
    """Count network evaluations made by this thread inside the block.

    A forward call on a batch of N inputs counts N forward passes; each
    backward call counts one.
    """
    stack = getattr(_counters, "stack", None)
    if stack is None:
        stack = _counters.stack = []
    counts = PassCounts()
    stack.append(counts)
    try:
        yield counts
    finally:
        stack.remove(counts)


def _tick(kind, n=1):
    for counts in getattr(_counters, "stack", ()):
        setattr(counts, kind, getattr(counts, kind) + n)


# -- layers ------------------------------------------------------------------------

class Conv:
    """Stride-1 convolution with odd kernel and 'same' zero padding."""

    kind = "conv"

    def __init__(self, name, cin, cout, kernel):
        self.name, self.cin, self.cout, self.kernel = name, cin, cout, tuple(kernel)
        self.pad = tuple(k // 2 for k in self.kernel)

    @property
    def param_shapes(self):
        return {"weight": (self.cout, self.cin) + self.kernel, "bias": (self.cout,)}

    def fan_in(self):
        return self.cin * int(np.prod(self.kernel))

    def _wmat(self, w):
        # (O, C, *k) -> (prod(k) * C, O) matching the im2col column order
        return np.moveaxis(w, 1, -1).reshape(self.cout, -1).T

    def im2col(self, x):
        nd = len(self.kernel)
        pads = [(0, 0)] + [(p, p) for p in self.pad] + [(0, 0)]
        win = sliding_window_view(np.pad(x, pads), self.kernel, axis=tuple(range(1, nd + 1)))
        # [N, *out, C, *k] -> [N, *out, *k, C]
        win = np.moveaxis(win, nd + 1, -1)
        return np.ascontiguousarray(win).reshape(-1, int(np.prod(self.kernel)) * x.shape[-1])

    def forward(self, p, x, cache):
        cols = self.im2col(x)
        out = cols @ self._wmat(p["weight"])
        out += p["bias"]
        if cache is not None and cache.get("keep_cols"):
            cache["cols"] = cols
        return out.reshape(x.shape[:-1] + (self.cout,))

    def backward(self, p, g, cache, need_input=True):
        spatial = g.shape[1:-1]
        g2 = g.reshape(-1, self.cout)
        grads = None
        if "cols" in cache:
            grads = {
                "weight": np.moveaxis(
                    (cache["cols"].T @ g2).T.reshape((self.cout,) + self.kernel + (self.cin,)), -1, 1
                ),
                "bias": g2.sum(axis=0),
            }
        if not need_input:
            return None, grads
        dcols = g2 @ self._wmat(p["weight"]).T
        k3 = (1,) * (3 - len(self.kernel)) + self.kernel
        s3 = (1,) * (3 - len(spatial)) + spatial
        dxp = kernels.pick("col2im")(dcols, g.shape[0], *s3, *k3, self.cin)
        inner = tuple(slice(q, q + s) for q, s in zip(self.pad, spatial))
        dxp = dxp.reshape((g.shape[0],) + tuple(s + 2 * q for s, q in zip(spatial, self.pad)) + (self.cin,))
        return dxp[(slice(None),) + inner], grads


class Relu:
    kind = "relu"
    param_shapes: dict = {}

    def __init__(self, name):
        self.name = name

    def forward(self, p, x, cache):
        out = np.maximum(x, 0)
        if cache is not None:
            cache["out"] = out
        return out

    def backward(self, p, g, cache, mode=STANDARD):
        gate = cache["out"] > 0
        if mode == GUIDED:
            gate &= g > 0
        return g * gate, None


class MaxPool:
    kind = "maxpool"
    param_shapes: dict = {}

    def __init__(self, name, window):
        self.name, self.window = name, tuple(window)

    def _blocks(self, x):
        n, c = x.shape[0], x.shape[-1]
        spatial = x.shape[1:-1]
        out = tuple(s // w for s, w in zip(spatial, self.window))
        shape = (n,)
        for o, w in zip(out, self.window):
            shape += (o, w)
        nd = len(spatial)
        xb = x.reshape(shape + (c,))
        # -> [N, *out, C, *window]
        order = (0,) + tuple(1 + 2 * i for i in range(nd)) + (1 + 2 * nd,) + tuple(2 + 2 * i for i in range(nd))
        return xb.transpose(order).reshape((n,) + out + (c, -1)), out

    def forward(self, p, x, cache):
        if any(s % w for s, w in zip(x.shape[1:-1], self.window)):
            raise ShapeMismatchError(f"pool window {self.window} does not tile {x.shape[1:-1]}")
        if cache is None:
            # no argmax needed: reduce the window axes of a reshaped view, no copy
            n, c = x.shape[0], x.shape[-1]
            shape = (n,)
            for s, w in zip(x.shape[1:-1], self.window):
                shape += (s // w, w)
            return x.reshape(shape + (c,)).max(axis=tuple(2 + 2 * i for i in range(len(self.window))))
        blocks, out = self._blocks(x)
        idx = blocks.argmax(axis=-1)
        cache["argmax"] = idx
        cache["in_shape"] = x.shape
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, p, g, cache):
        n, c = g.shape[0], g.shape[-1]
        out = g.shape[1:-1]
        nd = len(out)
        wsize = int(np.prod(self.window))
        db = np.zeros(g.shape + (wsize,), g.dtype)
        np.put_along_axis(db, cache["argmax"][..., None], g[..., None], axis=-1)
        db = db.reshape((n,) + out + (c,) + self.window)
        # [N, o1, .., C, w1, ..] -> [N, o1, w1, o2, w2, .., C]
        order = (0,)
        for i in range(nd):
            order += (1 + i, 2 + nd + i)
        order += (1 + nd,)
        return db.transpose(order).reshape(cache["in_shape"]), None


class Flatten:
    """Channels-last activations to a channels-first flat vector."""

    kind = "flatten"
    param_shapes: dict = {}

    def __init__(self, name):
        self.name = name

    def forward(self, p, x, cache):
        if cache is not None:
            cache["in_shape"] = x.shape
        return np.moveaxis(x, -1, 1).reshape(x.shape[0], -1)

    def backward(self, p, g, cache):
        shape = cache["in_shape"]
        cf = (shape[0], shape[-1]) + shape[1:-1]
        return np.ascontiguousarray(np.moveaxis(g.reshape(cf), 1, -1)), None


class Dense:
    kind = "dense"

    def __init__(self, name, fin, fout):
        self.name, self.fin, self.fout = name, fin, fout

    @property
    def param_shapes(self):
        return {"weight": (self.fout, self.fin), "bias": (self.fout,)}

    def fan_in(self):
        return self.fin

    def forward(self, p, x, cache):
        if cache is not None:
            cache["x"] = x
        return x @ p["weight"].T + p["bias"]

    def backward(self, p, g, cache, need_input=True):
        grads = None
        if cache.get("keep_cols"):
            grads = {"weight": g.T @ cache["x"], "bias": g.sum(axis=0)}
        return (g @ p["weight"] if need_input else None), grads


# -- network -----------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    num_classes: int

    def __post_init__(self):
        if self.kind not in ("net2d", "net3d"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def input_shape(self):
        return (3, 64, 64) if self.kind == "net2d" else (3, 16, 32, 32)


def _build_layers(spec: NetworkSpec):
    if spec.kind == "net2d":
        k, pools, fc_in = (3, 3), [(2, 2), (2, 2), (2, 2)], 64 * 8 * 8
    else:
        # second pool halves time only, so the tap keeps 8x16x16 and fc_in = 64*4*8*8
        k, pools, fc_in = (3, 3, 3), [(1, 2, 2), (2, 1, 1), (2, 2, 2)], 64 * 4 * 8 * 8
    layers = []
    for i, (cin, cout) in enumerate([(3, 16), (16, 32), (32, 64)], start=1):
        layers += [Conv(f"conv{i}", cin, cout, k), Relu(f"relu{i}"), MaxPool(f"pool{i}", pools[i - 1])]
    layers += [Flatten("flatten"), Dense("fc", fc_in, spec.num_classes)]
    return layers


INPUT_OFFSET = 0.5  # images live in [0, 1]; the spec networks see them centred


class Network:
    """A layer stack plus its parameters.

    ``tap`` is the index of the layer whose output is the final-conv tap
    (the last post-ReLU convolution output). ``input_offset`` is subtracted
    from every input before the first layer.
    """

    def __init__(self, spec, layers, params, input_shape=None, tap=None, input_offset=None):
        self.spec = spec
        if input_offset is None:
            input_offset = INPUT_OFFSET if spec is not None else 0.0
        self.input_offset = float(input_offset)
        self.layers = layers
        self.params = params
        self.input_shape = tuple(input_shape or spec.input_shape)
        if tap is None:
            relus = [i for i, layer in enumerate(layers) if layer.kind == "relu"]
            tap = relus[-1] if relus else None
        self.tap = tap
        for layer in layers:
            for pname, shape in layer.param_shapes.items():
                arr = params[layer.name][pname]
                if arr.shape != shape:
                    raise ShapeMismatchError(f"{layer.name}.{pname}: expected {shape}, got {arr.shape}")

    @property
    def num_classes(self):
        return self.layers[-1].fout

    @property
    def dtype(self):
        for group in self.params.values():
            for arr in group.values():
                return arr.dtype
        return np.dtype(np.float32)

    def astype(self, dtype):
        """Copy with every parameter cast (float64 copies serve as FD oracles)."""
        params = {k: {p: v.astype(dtype) for p, v in d.items()} for k, d in self.params.items()}
        return Network(self.spec, self.layers, params, self.input_shape, self.tap, self.input_offset)

    def copy(self):
        return Network(self.spec, self.layers, copy.deepcopy(self.params), self.input_shape, self.tap,
                       self.input_offset)

    def named_parameters(self):
        for layer in self.layers:
            for pname in layer.param_shapes:
                yield f"{layer.name}.{pname}", self.params[layer.name][pname]


def init_weights(spec: NetworkSpec, seed: int = 0) -> Network:
    """He-uniform weights, zero biases, drawn layer by layer from one Prng."""
    rng = Prng(seed)
    layers = _build_layers(spec)
    params = {}
    for layer in layers:
        if not layer.param_shapes:
            continue
        wshape = layer.param_shapes["weight"]
        bound = np.sqrt(6.0 / layer.fan_in())
        w = rng.uniform(-bound, bound, int(np.prod(wshape))).astype(np.float32).reshape(wshape)
        params[layer.name] = {"weight": w, "bias": np.zeros(layer.param_shapes["bias"], np.float32)}
    return Network(spec, layers, params)


@dataclass
class ForwardTrace:
    """Everything one forward pass leaves behind for a later backward pass."""

    net_id: int
    batch: int
    caches: list = field(repr=False)
    tap: np.ndarray | None
    logits: np.ndarray
    probs: np.ndarray


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _to_internal(net, x):
    x = np.asarray(x, dtype=net.dtype)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ShapeMismatchError(f"expected input {net.input_shape}, got {x.shape}")
    if net.input_offset:
        x = x - x.dtype.type(net.input_offset)
    return np.ascontiguousarray(np.moveaxis(x, 1, -1)), single


def _run(net, x, keep=False, keep_cols=False):
    caches = [] if keep else None
    tap = None
    for i, layer in enumerate(net.layers):
        cache = {"keep_cols": keep_cols} if keep else None
        x = layer.forward(net.params.get(layer.name), x, cache)
        if keep:
            caches.append(cache)
        if i == net.tap:
            tap = x
    return x, caches, tap


def forward(net: Network, x: np.ndarray, keep_trace: bool = True) -> ForwardTrace:
    """Run one input ([C, ...]) or a batch ([N, C, ...]) through the network.

    With ``keep_trace=False`` only logits and probabilities are kept, which is
    what batch scoring needs.
    """
    xi, _ = _to_internal(net, x)
    _tick("forward", xi.shape[0])
    logits, caches, tap = _run(net, xi, keep=keep_trace)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return ForwardTrace(id(net), xi.shape[0], caches or [], tap, logits, softmax(logits.astype(np.float64)))


def predict_proba(net: Network, batch: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Softmax probabilities for a batch, evaluated in chunks."""
    out = []
    for start in range(0, len(batch), batch_size):
        out.append(forward(net, batch[start : start + batch_size], keep_trace=False).probs)
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


def predict(net: Network, x: np.ndarray):
    """(class id, probability vector); ties go to the lowest class id."""
    probs = forward(net, x, keep_trace=False).probs[0]
    return int(np.argmax(probs)), probs


def _output_grad(trace, target_class, num_classes, source):
    if not 0 <= target_class < num_classes:
        raise IndexError(f"class {target_class} outside [0, {num_classes})")
    g = np.zeros((trace.batch, num_classes), trace.logits.dtype)
    if source == "logit":
        g[:, target_class] = 1.0
    elif source == "softmax":
        p = trace.probs
        g[:] = -p[:, target_class : target_class + 1] * p
        g[:, target_class] += p[:, target_class]
    else:
        raise ValueError(f"unknown gradient source {source!r}")
    return g


def _check_trace(net, trace):
    if trace.net_id != id(net) or len(trace.caches) != len(net.layers):
        raise ValueError("trace does not belong to this network (or was made with keep_trace=False)")


def backward(net, trace, target_class, mode=STANDARD, stop_at_tap=False, source="logit", relu_log=None):
    """One backward pass from the target-class score.

    Returns ``(input_grad, tap_grad)`` in channels-first layout with the batch
    axis dropped for single inputs. ``input_grad`` is None with
    ``stop_at_tap``. ``relu_log``, if a list, receives every gradient a ReLU
    passes downwards.
    """
    _check_trace(net, trace)
    if mode not in BACKWARD_MODES:
        raise ValueError(f"unknown backward mode {mode!r}")
    _tick("backward")
    g = _output_grad(trace, target_class, net.num_classes, source)
    tap_grad = None
    for i in range(len(net.layers) - 1, -1, -1):
        if i == net.tap:
            tap_grad = g
            if stop_at_tap:
                break
        layer = net.layers[i]
        if layer.kind == "relu":
            g, _ = layer.backward(None, g, trace.caches[i], mode)
            if relu_log is not None:
                relu_log.append(g)
        else:
            g, _ = layer.backward(net.params.get(layer.name), g, trace.caches[i])
    input_grad = None if stop_at_tap else _from_internal(g, trace.batch)
    return input_grad, (None if tap_grad is None else _from_internal(tap_grad, trace.batch))


def _from_internal(a, batch):
    a = np.moveaxis(a, -1, 1) if a.ndim > 2 else a
    return np.ascontiguousarray(a[0] if batch == 1 else a)


def backward_to_input(net, trace, target_class, mode=STANDARD, source="logit"):
    """d(score of target_class)/d(input), same shape as the input."""
    return backward(net, trace, target_class, mode, source=source)[0]


def final_conv_capture(net, trace, target_class, mode=STANDARD, source="logit"):
    """(post-ReLU final-conv activations, d score / d activations), channels first."""
    if net.tap is None:
        raise ValueError("network has no convolution tap")
    _, tap_grad = backward(net, trace, target_class, mode, stop_at_tap=True, source=source)
    return _from_internal(trace.tap, trace.batch), tap_grad


def head_logits(net, tap):
    """Logits computed from a channels-first tap tensor by the layers above it."""
    x = np.moveaxis(np.asarray(tap, net.dtype)[None], 1, -1)
    for layer in net.layers[net.tap + 1 :]:
        x = layer.forward(net.params.get(layer.name), x, None)
    return x[0]


# -- training ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 15
    batch: int = 16
    lr: float = 0.03
    momentum: float = 0.9
    seed: int = 0
    stop_at: float | None = None  # stop once validation accuracy reaches this


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float | None


def _train_step(net, xb, yb):
    xi, _ = _to_internal(net, xb)
    logits, caches, _ = _run(net, xi, keep=True, keep_cols=True)
    p = softmax(logits.astype(np.float64))
    n = len(yb)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), yb], 1e-300)))
    g = p.copy()
    g[np.arange(n), yb] -= 1.0
    g = (g / n).astype(logits.dtype)
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        need_input = i > 0
        if layer.kind in ("conv", "dense"):
            g, grads[layer.name] = layer.backward(net.params[layer.name], g, caches[i], need_input)
        else:
            g, _ = layer.backward(None, g, caches[i])
        caches[i] = None
    correct = int(np.sum(np.argmax(logits, axis=1) == yb))
    return loss, correct, grads


def accuracy(net, inputs, labels, batch_size=64):
    probs = predict_proba(net, inputs, batch_size)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def train_sgd(net, inputs, labels, cfg=TrainConfig(), val=None, progress=None):
    """Cross-entropy SGD with momentum. Returns a trained copy and per-epoch metrics.

    ``inputs`` is [N, C, ...] float32 and ``labels`` int class ids; ``val`` is an
    optional (inputs, labels) pair scored after every epoch.
    """
    inputs = np.asarray(inputs, np.float32)
    labels = np.asarray(labels, np.int64)
    if len(inputs) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError("labels outside [0, num_classes)")
    net = net.copy()
    velocity = {k: {p: np.zeros_like(v) for p, v in d.items()} for k, d in net.params.items()}
    rng = Prng(cfg.seed)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(inputs))
        total_loss, total_correct = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            loss, correct, grads = _train_step(net, inputs[idx], labels[idx])
            step += 1
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss} at epoch {epoch}, step {step} (lr={cfg.lr})")
            total_loss += loss * len(idx)
            total_correct += correct
            for lname, lgrads in grads.items():
                for pname, gp in lgrads.items():
                    v = velocity[lname][pname]
                    v *= cfg.momentum
                    v += gp
                    net.params[lname][pname] -= cfg.lr * v
        val_acc = accuracy(net, *val) if val is not None else None
        m = EpochMetrics(epoch, total_loss / len(inputs), total_correct / len(inputs), val_acc)
        history.append(m)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %s", epoch, m.loss, m.train_accuracy, val_acc)
        if progress is not None:
            progress(m)
        if cfg.stop_at is not None and val_acc is not None and val_acc >= cfg.stop_at:
            break
    return net, history


# -- checkpoints --------------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_network(net: Network, directory) -> None:
    """Directory of STF1 files plus a ``key = value`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"kind = {net.spec.kind}", f"num_classes = {net.spec.num_classes}"]
    for name, arr in net.named_parameters():
        fname = f"{name}.stf"
        write_tensor(directory / fname, arr)
        lines.append(f"{name} = {fname}")
    atomic_write_bytes(directory / MANIFEST, ("\n".join(lines) + "\n").encode())


def load_network(directory) -> Network:
    directory = Path(directory)
    entries = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            entries[key] = value
    spec = NetworkSpec(entries.pop("kind"), int(entries.pop("num_classes")))
    params = {}
    for key, fname in entries.items():
        lname, pname = key.rsplit(".", 1)
        params.setdefault(lname, {})[pname] = read_tensor(directory / fname)
    return Network(spec, _build_layers(spec), params)

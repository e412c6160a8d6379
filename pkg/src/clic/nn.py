"""Small dense feedforward networks with hand-written backprop, Adam and a
versioned parameter container.

Everything runs in float64. A network is a plain value: forward passes on a
shared net are read-only, gradient and optimizer steps mutate in place.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADS = ("identity", "tanh", "softmax")
LOSSES = ("bce", "mse")

MAGIC = b"CLICPAR\x00"
CONTAINER_VERSION = 1


class ParamFormatError(ValueError):
    """Bad magic, unsupported version or corrupted header/payload."""


class ShapeMismatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, sample_index: int, value: float):
        super().__init__(f"non-finite loss {value!r} at sample {sample_index}")
        self.sample_index = sample_index


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class DenseNet:
    """Affine + ReLU stack with an identity, tanh or softmax head.

    ``out_init`` controls the last layer: ``"he"`` (same as hidden layers),
    ``"small"`` (uniform +-3e-3) or ``"zero"``.
    """

    def __init__(self, sizes, head="identity", dropout=0.0, rng=None, out_init="he"):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeMismatchError(f"invalid layer sizes {sizes}")
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.sizes = sizes
        self.head = head
        self.dropout = float(dropout)
        rng = np.random.default_rng(rng)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(sizes) - 1
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == n_layers - 1
            if last and out_init == "zero":
                w = np.zeros((fan_in, fan_out))
            elif last and out_init == "small":
                w = rng.uniform(-3e-3, 3e-3, size=(fan_in, fan_out))
            else:
                lim = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    def copy(self) -> "DenseNet":
        other = DenseNet.__new__(DenseNet)
        other.sizes, other.head, other.dropout = self.sizes, self.head, self.dropout
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def load_from(self, other: "DenseNet") -> None:
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ShapeMismatchError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        return x

    def _apply_head(self, z):
        if self.head == "tanh":
            return np.tanh(z)
        if self.head == "softmax":
            return _softmax(z)
        return z

    def logits(self, x, train=False, rng=None):
        return self.forward_cached(x, train=train, rng=rng)[1]["z"]

    def forward(self, x, train=False, rng=None):
        x = self._check(x)
        if train and self.dropout > 0.0:
            return self.forward_cached(x, train=True, rng=rng)[0]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                np.maximum(h, 0.0, out=h)
        return self._apply_head(h)

    def forward_cached(self, x, train=False, rng=None):
        x = self._check(x)
        use_dropout = train and self.dropout > 0.0
        if use_dropout and rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = 1.0 - self.dropout
        inputs, masks, drops = [], [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if k < last:
                mask = h > 0.0
                h = h * mask
                masks.append(mask)
                if use_dropout:
                    d = (rng.random(h.shape) < keep) / keep
                    h = h * d
                    drops.append(d)
                else:
                    drops.append(None)
        out = self._apply_head(h)
        return out, {"inputs": inputs, "masks": masks, "drops": drops, "z": h, "out": out}

    def backward(self, cache, dout=None, dlogits=None):
        """Gradients of a scalar loss given dL/d(output) or dL/d(logits).

        Returns ``(grads, dx)`` with grads ordered like ``params``.
        """
        if dlogits is None:
            out = cache["out"]
            if self.head == "tanh":
                dlogits = dout * (1.0 - out * out)
            elif self.head == "softmax":
                dlogits = out * (dout - np.sum(dout * out, axis=-1, keepdims=True))
            else:
                dlogits = dout
        g = dlogits
        n = len(self.weights)
        grads: list[np.ndarray] = [None] * (2 * n)  # type: ignore[list-item]
        for k in range(n - 1, -1, -1):
            a = cache["inputs"][k]
            grads[2 * k] = a.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                d = cache["drops"][k - 1]
                if d is not None:
                    g = g * d
                g = g * cache["masks"][k - 1]
        return grads, g

    def loss_and_grad(self, x, targets, loss="bce", train=False, rng=None, weights=None):
        """Mean loss over the batch and its parameter gradients.

        ``loss`` is ``"bce"`` (softmax head, targets are class-1 labels),
        ``"mse"``, or a callable ``out -> (per_sample_loss, dL/dout)``.
        """
        x = self._check(x)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("batch must be a non-empty 2-D array")
        out, cache = self.forward_cached(x, train=train, rng=rng)
        bsz = x.shape[0]
        w = np.ones(bsz) if weights is None else np.asarray(weights, dtype=np.float64)
        if loss == "bce":
            if self.head != "softmax" or self.sizes[-1] != 2:
                raise ValueError("bce expects a 2-way softmax head")
            y = np.asarray(targets, dtype=np.float64).reshape(-1)
            s = cache["z"][:, 1] - cache["z"][:, 0]
            per = y * softplus(-s) + (1.0 - y) * softplus(s)
            gs = w * (sigmoid(s) - y) / bsz
            dlogits = np.stack([-gs, gs], axis=1)
            grads, _ = self.backward(cache, dlogits=dlogits)
        elif loss == "mse":
            diff = out - np.asarray(targets, dtype=np.float64).reshape(out.shape)
            per = np.sum(diff * diff, axis=1) / out.shape[1]
            grads, _ = self.backward(cache, dout=2.0 * w[:, None] * diff / diff.size)
        elif callable(loss):
            per, dout = loss(out)
            grads, _ = self.backward(cache, dout=dout)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        bad = ~np.isfinite(per)
        if bad.any():
            i = int(np.argmax(bad))
            raise NonFiniteLossError(i, float(per[i]))
        return float(np.mean(w * per)), grads


def bce_from_prob(p1, y, floor=1e-12):
    """Per-sample BCE on probabilities (reporting only; training uses logits)."""
    p1 = np.clip(np.asarray(p1, dtype=np.float64), floor, 1.0 - floor)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p1) + (1.0 - y) * np.log(1.0 - p1))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_step(params, grads, st: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``st``."""
    if len(params) != len(grads) or len(params) != len(st.m):
        raise ShapeMismatchError("params, grads and optimizer state differ in length")
    st.t += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1 ** st.t
    c2 = 1.0 - b2 ** st.t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# -- parameter container ------------------------------------------------------

def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Magic + version + JSON header + little-endian float64 payload."""
    chunks, specs = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        specs.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    payload = b"".join(chunks)
    header = dict(meta)
    header["arrays"] = specs
    header["crc32"] = zlib.crc32(payload)
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ParamFormatError(f"{path}: bad magic")
    if len(raw) < 16:
        raise ShapeMismatchError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CONTAINER_VERSION:
        raise ParamFormatError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamFormatError(f"{path}: unreadable header") from exc
    payload = raw[16 + hlen:]
    expected = sum(8 * int(np.prod(s["shape"], dtype=np.int64)) for s in header["arrays"])
    if len(payload) != expected:
        raise ShapeMismatchError(
            f"{path}: payload has {len(payload)} bytes, header describes {expected}")
    if zlib.crc32(payload) != header.get("crc32"):
        raise ParamFormatError(f"{path}: payload checksum mismatch")
    arrays, off = {}, 0
    for s in header["arrays"]:
        shape = tuple(s["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arrays[s["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return header, arrays


def net_meta(net: DenseNet) -> dict:
    return {"sizes": list(net.sizes), "head": net.head, "dropout": net.dropout}


def net_arrays(net: DenseNet, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}W{k}"] = w
        out[f"{prefix}b{k}"] = b
    return out


def net_from_arrays(meta: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> DenseNet:
    sizes = tuple(meta["sizes"])
    net = DenseNet(sizes, head=meta["head"], dropout=meta["dropout"], rng=0, out_init="zero")
    for k in range(len(sizes) - 1):
        w = arrays.get(f"{prefix}W{k}")
        b = arrays.get(f"{prefix}b{k}")
        if w is None or b is None:
            raise ShapeMismatchError(f"missing parameters for layer {k}")
        if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
            raise ShapeMismatchError(
                f"layer {k}: header sizes {sizes[k]}x{sizes[k + 1]} disagree with stored {w.shape}")
        net.weights[k] = w
        net.biases[k] = b
    return net


def save_params(net: DenseNet, path) -> None:
    write_container(path, {"kind": "dense_net", **net_meta(net)}, net_arrays(net))


def load_params(path) -> DenseNet:
    header, arrays = read_container(path)
    if header.get("kind") != "dense_net":
        raise ParamFormatError(f"{path}: not a dense_net container")
    return net_from_arrays(header, arrays)


@dataclass
class Adam:
    """Optimizer bound to one net."""
    net: DenseNet
    lr: float = 1e-4
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.like(self.net.params, lr=self.lr)

    def step(self, grads) -> None:
        adam_step(self.net.params, grads, self.state)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.array([float(self.state.t)])}
        for k, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"{prefix}m{k}"] = m
            out[f"{prefix}v{k}"] = v
        return out

    def restore(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.state.t = int(arrays[f"{prefix}t"][0])
        for k in range(len(self.state.m)):
            self.state.m[k][...] = arrays[f"{prefix}m{k}"]
            self.state.v[k][...] = arrays[f"{prefix}v{k}"]


"""The fixed-topology embedding network: five TDNN layers over frame
context windows, statistics pooling (per-dimension mean and standard
deviation over frames), and two fully connected layers. Every layer except
the final embedding layer is affine -> batch norm -> ReLU.

Forward and backward passes are written out explicitly (no autograd); the
backward pass differentiates through the pooling standard deviation and the
minibatch batch-norm statistics, and is checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UtteranceTooShort
from .losses import HeadParams

BN_EPS = 1e-10  # small enough that train-mode output variance is gamma^2
POOL_EPS = 1e-10
BN_MOMENTUM = 0.95

MODEL_MAGIC = b"NET1"
MODEL_VERSION = 1
_LAYER_KINDS = ("tdnn", "pool", "fc")
_LOSS_TAGS = {"softmax": 1, "asoftmax": 2, "triplet": 3}
_TAG_LOSSES = {v: k for k, v in _LOSS_TAGS.items()}


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # tdnn | pool | fc
    in_dim: int
    out_dim: int
    context: int = 1  # contiguous frame span, TDNN only


def standard_architecture(in_dim: int = 23, width_divisor: int = 1,
                          embed_dim: int | None = None) -> list[LayerSpec]:
    """The reference layer stack; width_divisor scales every hidden width
    (the 512/1500/3000/512/300 column) for desk-scale runs."""
    h = 512 // width_divisor
    p = 1500 // width_divisor
    e = embed_dim if embed_dim is not None else 300 // width_divisor
    return [
        LayerSpec("tdnn", in_dim, h, 5),
        LayerSpec("tdnn", h, h, 3),
        LayerSpec("tdnn", h, h, 3),
        LayerSpec("tdnn", h, h, 1),
        LayerSpec("tdnn", h, p, 1),
        LayerSpec("pool", p, 2 * p),
        LayerSpec("fc", 2 * p, h),
        LayerSpec("fc", h, e),
    ]


def min_frames(arch: list[LayerSpec]) -> int:
    """Frames consumed by the stacked TDNN contexts, plus one."""
    return 1 + sum(spec.context - 1 for spec in arch if spec.kind == "tdnn")


def embedding_dim(arch: list[LayerSpec]) -> int:
    return arch[-1].out_dim


class NetParams:
    """All weights, biases and batch-norm state of the layer stack.

    Batch norm (and the following ReLU) is attached to every affine layer
    except the last one, whose raw output is the embedding.
    """

    def __init__(self, arch: list[LayerSpec], layers: list[dict],
                 dtype=np.float64):
        self.arch = arch
        self.layers = layers
        self.dtype = np.dtype(dtype)

    def named_parameters(self):
        """Yield (name, array) for every trainable parameter, in a fixed order."""
        for i, layer in enumerate(self.layers):
            for key in ("W", "b", "gamma", "beta"):
                if key in layer:
                    yield f"layer{i}.{key}", layer[key]

    def astype(self, dtype) -> "NetParams":
        layers = [{k: v.astype(dtype) for k, v in layer.items()}
                  for layer in self.layers]
        return NetParams(self.arch, layers, dtype)


def init_net(arch: list[LayerSpec], rng: np.random.Generator,
             dtype=np.float64) -> NetParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases,
    batch-norm gamma=1 beta=0, running mean 0 / variance 1."""
    layers = []
    last_affine = max(i for i, s in enumerate(arch) if s.kind != "pool")
    for i, spec in enumerate(arch):
        if spec.kind == "pool":
            layers.append({})
            continue
        fan_in = spec.in_dim * (spec.context if spec.kind == "tdnn" else 1)
        limit = 1.0 / np.sqrt(fan_in)
        layer = {
            "W": rng.uniform(-limit, limit, size=(fan_in, spec.out_dim)).astype(dtype),
            "b": np.zeros(spec.out_dim, dtype=dtype),
        }
        if i != last_affine:
            layer["gamma"] = np.ones(spec.out_dim, dtype=dtype)
            layer["beta"] = np.zeros(spec.out_dim, dtype=dtype)
            layer["running_mean"] = np.zeros(spec.out_dim, dtype=dtype)
            layer["running_var"] = np.ones(spec.out_dim, dtype=dtype)
        layers.append(layer)
    return NetParams(arch, layers, dtype)


def _splice(h: np.ndarray, context: int) -> np.ndarray:
    """(N, T, D) -> (N, T-context+1, context*D): consecutive frames
    concatenated along the feature axis, materialized contiguously so the
    affine map is a single GEMM."""
    n, t, din = h.shape
    t_out = t - context + 1
    if context == 1:
        return h
    s = np.empty((n, t_out, context * din), dtype=h.dtype)
    for o in range(context):
        s[:, :, o * din: (o + 1) * din] = h[:, o: o + t_out, :]
    return s


def _tdnn_affine(h: np.ndarray, w: np.ndarray, b: np.ndarray, context: int):
    s = _splice(h, context)
    n, t_out, _ = s.shape
    a = s.reshape(n * t_out, -1) @ w + b
    return a.reshape(n, t_out, -1), s


def _bn_forward(a, layer, mode, axes, update_running):
    if mode == "train":
        mean = a.mean(axis=axes)
        var = a.var(axis=axes)
        if update_running:
            mom = BN_MOMENTUM
            layer["running_mean"][...] = mom * layer["running_mean"] + (1 - mom) * mean
            layer["running_var"][...] = mom * layer["running_var"] + (1 - mom) * var
    else:
        mean = layer["running_mean"]
        var = layer["running_var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    # xhat reuses the affine output buffer; z is built in two fused passes
    a -= mean
    a *= inv_std
    xhat = a
    z = xhat * layer["gamma"]
    z += layer["beta"]
    return z, xhat, inv_std


def forward(params: NetParams, x: np.ndarray, mode: str = "infer",
            update_running: bool | None = None):
    """Run the stack on a (N, T, in_dim) batch (or a single (T, in_dim)
    matrix); returns (embeddings, tape). Train mode normalizes with
    minibatch statistics and records everything backward() needs; infer
    mode uses the running statistics and is a pure function.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if update_running is None:
        update_running = mode == "train"
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    need = min_frames(params.arch)
    if x.shape[1] < need:
        raise UtteranceTooShort(
            f"input has {x.shape[1]} frames; the TDNN stack needs >= {need}")

    h = x
    tape = []
    for spec, layer in zip(params.arch, params.layers):
        cache = {"input": h}
        if spec.kind == "tdnn":
            a, spliced = _tdnn_affine(h, layer["W"], layer["b"], spec.context)
            z, xhat, inv_std = _bn_forward(a, layer, mode, (0, 1), update_running)
            cache.update(xhat=xhat, inv_std=inv_std, spliced=spliced)
            h = np.maximum(z, 0.0, out=z)
        elif spec.kind == "pool":
            mu = h.mean(axis=1)
            centered = h - mu[:, None, :]
            sigma = np.sqrt((centered * centered).mean(axis=1) + POOL_EPS)
            cache.update(mu=mu, sigma=sigma, centered=centered)
            h = np.concatenate([mu, sigma], axis=1)
        else:  # fc
            a = h @ layer["W"] + layer["b"]
            if "gamma" in layer:
                z, xhat, inv_std = _bn_forward(a, layer, mode, (0,), update_running)
                cache.update(xhat=xhat, inv_std=inv_std)
                h = np.maximum(z, 0.0, out=z)
            else:
                h = a
        tape.append(cache)
    emb = h[0] if single else h
    return emb, tape


def _bn_backward(gz, layer, cache, axes):
    """Mutates gz in place (it is owned by the caller's mask multiply)."""
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    count = gz.size // gz.shape[-1]
    spec_axes = "ntd,ntd->d" if gz.ndim == 3 else "nd,nd->d"
    dgamma = np.einsum(spec_axes, gz, xhat)
    dbeta = gz.sum(axis=axes)
    gz -= dbeta / count
    gz -= xhat * (dgamma / count)
    gz *= layer["gamma"] * inv_std
    return gz, dgamma, dbeta


def backward(params: NetParams, tape: list[dict], grad_emb: np.ndarray):
    """Gradients of every trainable parameter given d(loss)/d(embedding).

    The tape must come from a train-mode forward of the same minibatch; the
    returned structure mirrors params.layers.
    """
    g = np.asarray(grad_emb, dtype=params.dtype)
    if g.ndim == 1:
        g = g[None]
    grads = [dict() for _ in params.layers]
    for i in range(len(params.arch) - 1, -1, -1):
        spec, layer, cache = params.arch[i], params.layers[i], tape[i]
        h_in = cache["input"]
        if spec.kind == "pool":
            d = spec.in_dim
            gmu, gsig = g[:, :d], g[:, d:]
            t = h_in.shape[1]
            g = cache["centered"] * (gsig / cache["sigma"])[:, None, :]
            g += gmu[:, None, :]
            g /= t
            continue
        if spec.kind == "fc":
            if "gamma" in layer:
                g = g * (tape[i + 1]["input"] > 0)
                g, dgamma, dbeta = _bn_backward(g, layer, cache, (0,))
                grads[i]["gamma"], grads[i]["beta"] = dgamma, dbeta
            grads[i]["W"] = h_in.reshape(-1, spec.in_dim).T @ g
            grads[i]["b"] = g.sum(axis=0)
            g = g @ layer["W"].T
            continue
        # tdnn
        g = g * (tape[i + 1]["input"] > 0)
        g, dgamma, dbeta = _bn_backward(g, layer, cache, (0, 1))
        grads[i]["gamma"], grads[i]["beta"] = dgamma, dbeta
        din = spec.in_dim
        n, t_out, dout = g.shape
        g2 = g.reshape(n * t_out, dout)
        s = cache["spliced"]
        grads[i]["W"] = s.reshape(n * t_out, -1).T @ g2
        grads[i]["b"] = g2.sum(axis=0)
        gs = (g2 @ layer["W"].T).reshape(n, t_out, spec.context * din)
        if spec.context == 1:
            g = gs
        else:
            gh = np.zeros_like(h_in)
            for o in range(spec.context):
                gh[:, o: o + t_out, :] += gs[:, :, o * din: (o + 1) * din]
            g = gh
    return grads


def extract_embedding(params: NetParams, frames: np.ndarray) -> np.ndarray:
    """Infer-mode forward over a whole utterance; returns the embedding."""
    emb, _ = forward(params, np.asarray(frames), mode="infer")
    return emb


# ---------------------------------------------------------------------------
# model file ("NET1")

def save_model(path: str, params: NetParams, head: HeadParams | None,
               loss_type: str, label_map: list[str]) -> None:
    """Architecture descriptor + float32 parameters + head + label map."""
    if loss_type not in _LOSS_TAGS:
        raise ValueError(f"unknown loss type {loss_type!r}")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(params.arch)))
        for spec in params.arch:
            fh.write(struct.pack("<BIII", _LAYER_KINDS.index(spec.kind),
                                 spec.in_dim, spec.out_dim, spec.context))
        fh.write(struct.pack("<B", _LOSS_TAGS[loss_type]))
        fh.write(struct.pack("<I", head.m if head is not None else 0))
        fh.write(struct.pack("<I", len(label_map)))
        for name in label_map:
            data = name.encode("utf-8")
            fh.write(struct.pack("<I", len(data)))
            fh.write(data)
        fh.write(struct.pack("<B", 1 if head is not None else 0))
        if head is not None:
            fh.write(struct.pack("<II", head.W.shape[0], head.W.shape[1]))
            fh.write(struct.pack("<B", 1 if head.b is not None else 0))
        for layer in params.layers:
            for key in ("W", "b", "gamma", "beta", "running_mean", "running_var"):
                if key in layer:
                    fh.write(np.ascontiguousarray(layer[key], dtype="<f4").tobytes())
        if head is not None:
            fh.write(np.ascontiguousarray(head.W, dtype="<f4").tobytes())
            if head.b is not None:
                fh.write(np.ascontiguousarray(head.b, dtype="<f4").tobytes())


def _read_array(fh, shape, dtype):
    n = int(np.prod(shape))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise DataError("truncated model file")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)


def load_model(path: str, dtype=np.float64):
    """Returns (params, head, loss_type, label_map)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise DataError(f"{path!r} is not a model file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != MODEL_VERSION:
            raise DataError(f"unsupported model version {version}")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        arch = []
        for _ in range(n_layers):
            kind, din, dout, ctx = struct.unpack("<BIII", fh.read(13))
            arch.append(LayerSpec(_LAYER_KINDS[kind], din, dout, ctx))
        (loss_tag,) = struct.unpack("<B", fh.read(1))
        (m,) = struct.unpack("<I", fh.read(4))
        (n_labels,) = struct.unpack("<I", fh.read(4))
        label_map = []
        for _ in range(n_labels):
            (n,) = struct.unpack("<I", fh.read(4))
            label_map.append(fh.read(n).decode("utf-8"))
        (has_head,) = struct.unpack("<B", fh.read(1))
        head_shape = head_has_bias = None
        if has_head:
            head_shape = struct.unpack("<II", fh.read(8))
            (head_has_bias,) = struct.unpack("<B", fh.read(1))
        last_affine = max(i for i, s in enumerate(arch) if s.kind != "pool")
        layers = []
        for i, spec in enumerate(arch):
            if spec.kind == "pool":
                layers.append({})
                continue
            fan_in = spec.in_dim * (spec.context if spec.kind == "tdnn" else 1)
            layer = {
                "W": _read_array(fh, (fan_in, spec.out_dim), dtype),
                "b": _read_array(fh, (spec.out_dim,), dtype),
            }
            if i != last_affine:
                for key in ("gamma", "beta", "running_mean", "running_var"):
                    layer[key] = _read_array(fh, (spec.out_dim,), dtype)
            layers.append(layer)
        head = None
        if has_head:
            w = _read_array(fh, head_shape, dtype)
            b = _read_array(fh, (head_shape[0],), dtype) if head_has_bias else None
            head = HeadParams(w, b, m if m else 1)
        return NetParams(arch, layers, dtype), head, _TAG_LOSSES[loss_tag], label_map

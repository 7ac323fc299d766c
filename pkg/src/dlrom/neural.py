"""Layers, networks and reverse-mode gradients.

Tensors are numpy arrays with a leading batch axis: ``(batch, features)``
for standard layers and ``(batch, channels, length)`` for (transposed)
convolutions.  Layer semantics follow the usual cross-correlation
conventions:

    conv:   out[k', j] = sum_{k in group(k')} sum_i W[k', k_loc, i] V[k, j t + i d]
    tconv:  out[k', j t + i d] += W[k_loc, k', i] V[k, j]    (the exact adjoint)

Indices outside the valid ranges contribute nothing.
"""

from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeMismatch

ACTIVATIONS = ("relu", "identity")


def _check_activation(name):
    if name not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {name!r}")


def relu(x):
    return np.maximum(x, 0.0)


class Layer:
    kind = "abstract"
    trainable = ()

    def output_shape(self, shape):
        raise NotImplementedError

    def linear(self, x):
        """Affine part without activation."""
        raise NotImplementedError

    def linear_backward(self, x, grad):
        """Return (grad wrt input, {param: grad})."""
        raise NotImplementedError

    def forward(self, x):
        z = self.linear(x)
        return relu(z) if getattr(self, "activation", "identity") == "relu" else z

    def params(self):
        return {name: getattr(self, name) for name in self.trainable}


@dataclass(eq=False)
class Dense(Layer):
    """Standard layer sigma(W v + b); W has shape (out, in)."""

    W: np.ndarray
    b: np.ndarray | None = None
    activation: str = "relu"
    kind = "dense"
    trainable = ("W", "b")

    def __post_init__(self):
        self.W = np.array(self.W, dtype=float, ndmin=2)
        self.b = np.zeros(self.W.shape[0]) if self.b is None else np.array(self.b, dtype=float)
        _check_activation(self.activation)
        if self.b.shape != (self.W.shape[0],):
            raise ShapeMismatch(f"bias shape {self.b.shape} does not match W {self.W.shape}")

    @property
    def in_features(self):
        return self.W.shape[1]

    @property
    def out_features(self):
        return self.W.shape[0]

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeMismatch(f"dense layer expects ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def linear(self, x):
        return x @ self.W.T + self.b

    def linear_backward(self, x, grad):
        return grad @ self.W, {"W": grad.T @ x, "b": grad.sum(axis=0)}


@dataclass(eq=False)
class _ConvBase(Layer):
    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    activation: str = "relu"
    trainable = ("weight", "bias")

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=float)
        if self.weight.ndim != 3:
            raise ShapeMismatch(f"{self.kind} weight must be 3-D, got {self.weight.shape}")
        _check_activation(self.activation)
        for name in ("stride", "dilation", "groups"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        g = self.groups
        if self.in_channels % g or self.out_channels % g:
            raise ShapeMismatch(
                f"groups={g} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.bias is None:
            self.bias = np.zeros(self.out_channels)
        self.bias = np.array(self.bias, dtype=float)
        if self.bias.ndim not in (1, 2) or self.bias.shape[0] != self.out_channels:
            raise ShapeMismatch(f"bias shape {self.bias.shape} incompatible with {self.out_channels} channels")

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def out_length(self, n):
        raise NotImplementedError

    def output_shape(self, shape):
        if len(shape) != 2 or shape[0] != self.in_channels:
            raise ShapeMismatch(f"{self.kind} expects ({self.in_channels}, n), got {tuple(shape)}")
        n_out = self.out_length(shape[1])
        if n_out < 1:
            raise ShapeMismatch(f"{self.kind} produces empty output for input length {shape[1]}")
        if self.bias.ndim == 2 and self.bias.shape[1] != n_out:
            raise ShapeMismatch(f"per-position bias has length {self.bias.shape[1]}, output has {n_out}")
        return (self.out_channels, n_out)

    def _bias(self):
        return self.bias[:, None] if self.bias.ndim == 1 else self.bias

    def _bias_grad(self, grad):
        gb = grad.sum(axis=0)
        return gb.sum(axis=-1) if self.bias.ndim == 1 else gb


class Conv1d(_ConvBase):
    """1D cross-correlation; weight shape (out, in/groups, kernel)."""

    kind = "conv1d"

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def out_length(self, n):
        return (n - self.dilation * (self.kernel_size - 1) - 1) // self.stride + 1

    def _index(self, n_out):
        return (np.arange(n_out) * self.stride)[:, None] + (
            np.arange(self.kernel_size) * self.dilation
        )[None, :]

    def _grouped_weight(self):
        g = self.groups
        return self.weight.reshape(g, self.out_channels // g, self.in_channels // g, self.kernel_size)

    def linear(self, x):
        B, m, n = x.shape
        n_out = self.output_shape((m, n))[1]
        g = self.groups
        patches = x[:, :, self._index(n_out)].reshape(B, g, m // g, n_out, self.kernel_size)
        out = np.einsum("bgcjs,gocs->bgoj", patches, self._grouped_weight())
        return out.reshape(B, self.out_channels, n_out) + self._bias()

    def linear_backward(self, x, grad):
        B, m, n = x.shape
        n_out = grad.shape[-1]
        g, s, t, d = self.groups, self.kernel_size, self.stride, self.dilation
        Wg = self._grouped_weight()
        patches = x[:, :, self._index(n_out)].reshape(B, g, m // g, n_out, s)
        gg = grad.reshape(B, g, self.out_channels // g, n_out)
        dW = np.einsum("bgcjs,bgoj->gocs", patches, gg).reshape(self.weight.shape)
        dpatch = np.einsum("bgoj,gocs->bgcjs", gg, Wg).reshape(B, m, n_out, s)
        dx = np.zeros_like(x)
        span = (n_out - 1) * t + 1
        for i in range(s):
            dx[:, :, i * d : i * d + span : t] += dpatch[..., i]
        return dx, {"weight": dW, "bias": self._bias_grad(grad)}


class TConv1d(_ConvBase):
    """1D transposed cross-correlation; weight shape (in/groups, out, kernel).

    Output channel k' reads the input channels of its group, each through
    ``weight[k_local, k']``.
    """

    kind = "tconv1d"

    @property
    def in_channels(self):
        return self.weight.shape[0] * self.groups

    @property
    def out_channels(self):
        return self.weight.shape[1]

    def out_length(self, n):
        return (n - 1) * self.stride + self.dilation * (self.kernel_size - 1) + 1

    def _grouped_weight(self):
        g = self.groups
        c, o = self.in_channels // g, self.out_channels // g
        return self.weight.reshape(c, g, o, self.kernel_size).transpose(1, 0, 2, 3)

    def linear(self, x):
        B, m, n = x.shape
        n_out = self.output_shape((m, n))[1]
        g, s, t, d = self.groups, self.kernel_size, self.stride, self.dilation
        Wg = self._grouped_weight()
        xg = x.reshape(B, g, m // g, n)
        out = np.zeros((B, g, self.out_channels // g, n_out))
        span = (n - 1) * t + 1
        for i in range(s):
            out[..., i * d : i * d + span : t] += np.einsum("bgcj,gco->bgoj", xg, Wg[..., i])
        return out.reshape(B, self.out_channels, n_out) + self._bias()

    def linear_backward(self, x, grad):
        B, m, n = x.shape
        g, s, t, d = self.groups, self.kernel_size, self.stride, self.dilation
        Wg = self._grouped_weight()
        xg = x.reshape(B, g, m // g, n)
        gg = grad.reshape(B, g, self.out_channels // g, grad.shape[-1])
        span = (n - 1) * t + 1
        dx = np.zeros_like(xg)
        dWg = np.empty_like(Wg)
        for i in range(s):
            gi = gg[..., i * d : i * d + span : t]
            dx += np.einsum("bgoj,gco->bgcj", gi, Wg[..., i])
            dWg[..., i] = np.einsum("bgcj,bgoj->gco", xg, gi)
        dW = dWg.transpose(1, 0, 2, 3).reshape(self.weight.shape)
        return dx.reshape(B, m, n), {"weight": dW, "bias": self._bias_grad(grad)}


@dataclass(eq=False)
class Reshape(Layer):
    """Row-major reshape R_{c,l}: R^{c l} -> R^{c x l}, or its inverse."""

    channels: int
    length: int
    inverse: bool = False
    kind = "reshape"

    def output_shape(self, shape):
        if self.inverse:
            if tuple(shape) != (self.channels, self.length):
                raise ShapeMismatch(f"inverse reshape expects ({self.channels}, {self.length}), got {tuple(shape)}")
            return (self.channels * self.length,)
        if tuple(shape) != (self.channels * self.length,):
            raise ShapeMismatch(f"reshape expects ({self.channels * self.length},), got {tuple(shape)}")
        return (self.channels, self.length)

    def linear(self, x):
        B = x.shape[0]
        shape = (B, self.channels * self.length) if self.inverse else (B, self.channels, self.length)
        return x.reshape(shape)

    def forward(self, x):
        return self.linear(x)

    def linear_backward(self, x, grad):
        return grad.reshape(x.shape), {}


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Network:
    """Ordered composition of layers.

    ``kind`` is ``"relu_net"`` for standard-layer networks and ``"cnn"`` for
    compositions of (transposed) convolutions and reshapes.
    """

    layers: list
    kind: str = "relu_net"
    input_shape: tuple | None = None

    def __post_init__(self):
        self.layers = list(self.layers)
        if self.input_shape is None and self.layers:
            first = self.layers[0]
            if isinstance(first, Dense):
                self.input_shape = (first.in_features,)
            elif isinstance(first, Reshape):
                self.input_shape = (first.channels, first.length) if first.inverse else (first.channels * first.length,)
        if self.input_shape is not None:
            self.input_shape = tuple(int(v) for v in self.input_shape)
            self.shapes()

    def shapes(self):
        """Per-layer output shapes (validates consecutive compatibility)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeMismatch as exc:
                raise ShapeMismatch(str(exc), layer_index=i) from None
            out.append(shape)
        return out

    @property
    def output_shape(self):
        return self.shapes()[-1] if self.layers else self.input_shape

    @property
    def weighted_layers(self):
        return [l for l in self.layers if not isinstance(l, Reshape)]

    @property
    def output_layer(self):
        return self.weighted_layers[-1]

    def __call__(self, x):
        return self.forward(x)

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(
                f"network expects samples of shape {self.input_shape}, got {tuple(x.shape[1:])}",
                layer_index=0,
            )
        return x

    def forward(self, x, return_cache=False):
        """Evaluate a batch (leading axis) of inputs."""
        x = self._check_input(x)
        cache = []
        for i, layer in enumerate(self.layers):
            try:
                z = layer.linear(x)
            except ShapeMismatch as exc:
                raise ShapeMismatch(str(exc), layer_index=i) from None
            cache.append((x, z))
            x = relu(z) if getattr(layer, "activation", "identity") == "relu" else z
        return (x, cache) if return_cache else x

    def pre_activations(self, x):
        """Affine outputs of every weighted layer (before the activation)."""
        _, cache = self.forward(x, return_cache=True)
        return [z for layer, (_, z) in zip(self.layers, cache) if not isinstance(layer, Reshape)]

    def backward(self, x, upstream, cache=None):
        """Reverse-mode gradients of <upstream, net(x)>.

        Returns ``(grads, dx)`` with ``grads[i]`` a dict per layer (empty for
        reshapes).  The ReLU derivative at 0 is taken as 0.
        """
        if cache is None:
            out, cache = self.forward(x, return_cache=True)
        else:
            out = None
        grad = np.asarray(upstream, dtype=float)
        expected = cache[-1][1].shape if cache else np.shape(x)
        if grad.shape != expected:
            raise ShapeMismatch(f"upstream shape {grad.shape} does not match output {expected}")
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            xin, z = cache[i]
            if getattr(layer, "activation", "identity") == "relu":
                grad = grad * (z > 0)
            grad, g = layer.linear_backward(xin, grad)
            grads[i] = g
        return grads, grad

    # -- parameter plumbing ------------------------------------------------

    def parameters(self):
        """Flat list of (layer index, name, array) for trainable arrays."""
        return [
            (i, name, arr)
            for i, layer in enumerate(self.layers)
            for name, arr in layer.params().items()
        ]

    def copy(self):
        return copy.deepcopy(self)

    def scaled_output(self, eta):
        """Copy with the output layer's weights and bias multiplied by ``eta``."""
        net = self.copy()
        out = net.output_layer
        for name, arr in out.params().items():
            setattr(out, name, eta * arr)
        return net

    def accounting(self):
        return accounting(self)

    def to_dict(self):
        return network_to_dict(self)

    def to_json(self, path=None):
        text = json.dumps(network_to_dict(self), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        return network_from_dict(d)

    @classmethod
    def from_json(cls, source):
        if isinstance(source, str) and source.lstrip().startswith("{"):
            return network_from_dict(json.loads(source))
        with open(source) as fh:
            return network_from_dict(json.load(fh))


def forward(net: Network, x):
    """Evaluate ``net`` on a single, unbatched input."""
    return net.forward(np.asarray(x, dtype=float)[None])[0]


def backward(net: Network, x, upstream):
    """Gradients for a single, unbatched input (see Network.backward)."""
    grads, dx = net.backward(np.asarray(x, dtype=float)[None], np.asarray(upstream, dtype=float)[None])
    return grads, dx[0]


def tconv_forward(layer: TConv1d, x):
    """Apply a transposed convolution layer to one unbatched (channels, length) input."""
    return layer.forward(np.asarray(x, dtype=float)[None])[0]


def mlp(sizes, rng=None, scale="he"):
    """ReLU network with the given layer widths and an affine output layer."""
    rng = np.random.default_rng(rng)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt((2.0 if scale == "he" else 1.0) / n_in)
        last = i == len(sizes) - 2
        layers.append(
            Dense(rng.normal(0.0, std, (n_out, n_in)), np.zeros(n_out), "identity" if last else "relu")
        )
    return Network(layers, kind="relu_net")


# ---------------------------------------------------------------------------
# Dense unrolling and accounting
# ---------------------------------------------------------------------------


def conv_to_dense(layer, n: int) -> np.ndarray:
    """Matrix M with vec(layer(V)) = M vec(V) + vec(bias) (row-major vec).

    Built directly from the index formulas, not through ``forward``.
    """
    m, mp = layer.in_channels, layer.out_channels
    g, s, t, d = layer.groups, layer.kernel_size, layer.stride, layer.dilation
    n_out = layer.out_length(n)
    if n_out < 1:
        raise ShapeMismatch(f"{layer.kind} produces empty output for input length {n}")
    M = np.zeros((mp * n_out, m * n))
    cin, cout = m // g, mp // g
    for kp in range(mp):
        grp = kp // cout
        for kl in range(cin):
            k = grp * cin + kl
            for i in range(s):
                if isinstance(layer, Conv1d):
                    w = layer.weight[kp, kl, i]
                    for j in range(n_out):
                        M[kp * n_out + j, k * n + j * t + i * d] += w
                else:
                    w = layer.weight[kl, kp, i]
                    for j in range(n):
                        M[kp * n_out + j * t + i * d, k * n + j] += w
    return M


def adjoint_layer(layer: Conv1d) -> TConv1d:
    """Transposed convolution whose linear part is the adjoint of ``layer``'s."""
    g = layer.groups
    cin, cout = layer.in_channels // g, layer.out_channels // g
    w = np.zeros((cout, layer.in_channels, layer.kernel_size))
    for grp in range(g):
        w[:, grp * cin : (grp + 1) * cin, :] = layer.weight[grp * cout : (grp + 1) * cout]
    return TConv1d(w, None, layer.stride, layer.dilation, g, activation="identity")


def accounting(net: Network) -> dict:
    """Depth, size, widest channel count and largest kernel of the stored
    realization (reshapes ignored)."""
    weighted = net.weighted_layers
    size = 0
    channels = 0
    kernel = 0
    for layer in weighted:
        size += sum(int(np.count_nonzero(a)) for a in layer.params().values())
        if isinstance(layer, _ConvBase):
            channels = max(channels, layer.in_channels, layer.out_channels)
            kernel = max(kernel, layer.kernel_size)
    return {
        "depth": max(len(weighted) - 1, 0),
        "size": size,
        "channels_max": channels,
        "kernel_max": kernel,
    }


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

FORMAT_NAME = "dlrom-network"
FORMAT_VERSION = 1


def _encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Reshape):
            layers.append({"type": "reshape", "channels": layer.channels, "length": layer.length, "inverse": layer.inverse})
        elif isinstance(layer, Dense):
            layers.append({"type": "dense", "activation": layer.activation, "W": _encode_array(layer.W), "b": _encode_array(layer.b)})
        else:
            layers.append(
                {
                    "type": layer.kind,
                    "activation": layer.activation,
                    "stride": layer.stride,
                    "dilation": layer.dilation,
                    "groups": layer.groups,
                    "weight": _encode_array(layer.weight),
                    "bias": _encode_array(layer.bias),
                }
            )
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": net.kind,
        "input_shape": list(net.input_shape) if net.input_shape is not None else None,
        "layers": layers,
    }


def network_from_dict(d: dict) -> Network:
    if d.get("format") != FORMAT_NAME:
        raise ValueError("not a serialized network")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {d.get('version')}")
    layers = []
    for spec in d["layers"]:
        kind = spec["type"]
        if kind == "reshape":
            layers.append(Reshape(spec["channels"], spec["length"], spec["inverse"]))
        elif kind == "dense":
            layers.append(Dense(_decode_array(spec["W"]), _decode_array(spec["b"]), spec["activation"]))
        elif kind in ("conv1d", "tconv1d"):
            cls = Conv1d if kind == "conv1d" else TConv1d
            layers.append(
                cls(
                    _decode_array(spec["weight"]),
                    _decode_array(spec["bias"]),
                    stride=spec["stride"],
                    dilation=spec["dilation"],
                    groups=spec["groups"],
                    activation=spec["activation"],
                )
            )
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    shape = d.get("input_shape")
    return Network(layers, kind=d.get("kind", "relu_net"), input_shape=tuple(shape) if shape else None)

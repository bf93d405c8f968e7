"""Layer nodes, the network graph, and the parameter checkpoint format."""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradMode, StaleGraphError, Tensor


class ShapeMismatchError(ValueError):
    def __init__(self, node: str, message: str):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(ad.DEFAULT_DTYPE)


class Layer:
    """A graph node kind. Subclasses hold ``params`` (trainable tensors) and
    ``buffers`` (non-trainable arrays) and implement ``__call__``."""

    n_inputs = 1

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {}

    def __call__(self, *inputs: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        self.params["weight"] = Tensor(_he(rng, (k, k, in_channels, out_channels), k * k * in_channels),
                                       requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(out_channels, ad.DEFAULT_DTYPE), requires_grad=True)

    def config(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel_size=self.kernel_size, stride=self.stride, padding=self.padding)

    def __call__(self, x, training=False):
        return ad.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = Tensor(np.ones(channels, ad.DEFAULT_DTYPE), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(channels, ad.DEFAULT_DTYPE), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels, ad.DEFAULT_DTYPE)
        self.buffers["running_var"] = np.ones(channels, ad.DEFAULT_DTYPE)

    def config(self):
        return dict(channels=self.channels, momentum=self.momentum, eps=self.eps)

    def __call__(self, x, training=False):
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        return ad.batch_norm(x, self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
                             self.buffers["running_var"], training, self.momentum, self.eps)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features, self.out_features, self.bias = in_features, out_features, bias
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = Tensor(_he(rng, (in_features, out_features), in_features), requires_grad=True)
        if bias:
            self.params["bias"] = Tensor(np.zeros(out_features, ad.DEFAULT_DTYPE), requires_grad=True)

    def config(self):
        return dict(in_features=self.in_features, out_features=self.out_features, bias=self.bias)

    def __call__(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected (N, {self.in_features}) input, got {x.shape}")
        out = x @ self.params["weight"]
        return out + self.params["bias"] if self.bias else out


class ReLU(Layer):
    def __call__(self, x, training=False):
        return ad.relu(x)


class Sigmoid(Layer):
    def __call__(self, x, training=False):
        return x.sigmoid()


class MaxPool(Layer):
    def __init__(self, kernel_size: int = 2):
        super().__init__()
        self.kernel_size = kernel_size

    def config(self):
        return dict(kernel_size=self.kernel_size)

    def __call__(self, x, training=False):
        return ad.max_pool2d(x, self.kernel_size)


class AvgPool(MaxPool):
    def __call__(self, x, training=False):
        return ad.avg_pool2d(x, self.kernel_size)


class GlobalAvgPool(Layer):
    def __call__(self, x, training=False):
        return ad.global_avg_pool(x)


class Flatten(Layer):
    def __call__(self, x, training=False):
        return x.reshape(x.shape[0], -1)


class Softmax(Layer):
    def __call__(self, x, training=False):
        return ad.softmax(x)


class Add(Layer):
    n_inputs = 2

    def __call__(self, a, b, training=False):
        if a.shape != b.shape:
            raise ValueError(f"cannot add shapes {a.shape} and {b.shape}")
        return a + b


class ChannelPad(Layer):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels

    def config(self):
        return dict(channels=self.channels)

    def __call__(self, x, training=False):
        if x.shape[-1] > self.channels:
            raise ValueError(f"cannot pad {x.shape[-1]} channels down to {self.channels}")
        return ad.channel_pad(x, self.channels)


class Upsample(Layer):
    def __init__(self, size: tuple[int, int]):
        super().__init__()
        self.size = tuple(size)

    def config(self):
        return dict(size=list(self.size))

    def __call__(self, x, training=False):
        return ad.bilinear_upsample(x, self.size)


class Identity(Layer):
    def __call__(self, x, training=False):
        return x


LAYER_KINDS: dict[str, type[Layer]] = {}


def register_layer(cls: type[Layer]) -> type[Layer]:
    LAYER_KINDS[cls.__name__] = cls
    return cls


for _cls in (Conv2d, BatchNorm2d, Dense, ReLU, Sigmoid, MaxPool, AvgPool, GlobalAvgPool, Flatten,
             Softmax, Add, ChannelPad, Upsample, Identity):
    register_layer(_cls)


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    input: np.ndarray | None


class Graph:
    """A directed acyclic network of named layer nodes.

    Nodes are evaluated in insertion order, so a node's inputs must already
    exist when it is added. ``"input"`` names the graph input.
    """

    def __init__(self, input_shape: tuple[int, ...]):
        self.input_shape = tuple(input_shape)
        self.nodes: dict[str, Layer] = {}
        self.inputs: dict[str, tuple[str, ...]] = {}
        self.output_name: str | None = None
        self.activations: dict[str, Tensor] = {}
        self._input: Tensor | None = None
        self._output: Tensor | None = None

    def add(self, name: str, layer: Layer, inputs: str | tuple[str, ...] | None = None) -> str:
        if name in self.nodes or name == "input":
            raise ValueError(f"duplicate node name {name!r}")
        if inputs is None:
            inputs = (self.output_name or "input",)
        elif isinstance(inputs, str):
            inputs = (inputs,)
        for src in inputs:
            if src != "input" and src not in self.nodes:
                raise ValueError(f"node {name!r} references unknown input {src!r}")
        if len(inputs) != layer.n_inputs:
            raise ValueError(f"node {name!r} takes {layer.n_inputs} inputs, got {len(inputs)}")
        self.nodes[name] = layer
        self.inputs[name] = tuple(inputs)
        self.output_name = name
        return name

    # -- parameters -------------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return {f"{n}.{k}": t for n, layer in self.nodes.items() for k, t in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": b for n, layer in self.nodes.items() for k, b in layer.buffers.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.parameters().items()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {**{k: t for k, t in self.parameters().items()}, **self.buffers()}
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, target in own.items():
            value = np.asarray(state[name])
            if isinstance(target, Tensor):
                if value.shape != target.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
                target.data = value.astype(target.dtype, copy=True)
            else:
                if value.shape != target.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
                target[...] = value

    def requires_grad_(self, flag: bool) -> "Graph":
        for t in self.parameters().values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def astype(self, dtype) -> "Graph":
        """Convert parameters and buffers in place (64-bit verification mode)."""
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
        for layer in self.nodes.values():
            for k, b in layer.buffers.items():
                layer.buffers[k] = b.astype(dtype)
        return self

    def copy(self) -> "Graph":
        clone = copy.copy(self)
        clone.nodes = copy.deepcopy(self.nodes)
        clone.activations, clone._input, clone._output = {}, None, None
        return clone

    @property
    def dtype(self):
        params = self.parameters()
        return next(iter(params.values())).dtype if params else np.dtype(ad.DEFAULT_DTYPE)

    # -- evaluation ---------------------------------------------------------------
    def forward(self, x, training: bool = False, input_grad: bool = False) -> Tensor:
        """Evaluate every node on a batch shaped ``(N, *input_shape)``."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if tuple(data.shape[1:]) != self.input_shape:
            raise ShapeMismatchError("input", f"expected (N, {self.input_shape}), got {data.shape}")
        if isinstance(x, Tensor) and x.dtype == self.dtype:
            xt = x
        else:
            xt = Tensor(data.astype(self.dtype, copy=False), requires_grad=input_grad)
        values = {"input": xt}
        for name, layer in self.nodes.items():
            try:
                values[name] = layer(*(values[s] for s in self.inputs[name]), training=training)
            except ValueError as err:
                raise ShapeMismatchError(name, str(err)) from err
        self.activations = values
        self._input = xt
        self._output = values[self.output_name]
        return self._output

    __call__ = forward

    def backward(self, output_grad, mode: GradMode = GradMode.STANDARD) -> Gradients:
        """Back-propagate ``output_grad`` through the last forward pass."""
        if self._output is None:
            raise StaleGraphError("backward called before forward (or tape already consumed)")
        out, self._output = self._output, None
        params = self.parameters()
        for t in params.values():
            t.grad = None
        out.backward(np.asarray(output_grad), mode=mode)
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        return Gradients(params=grads, input=self._input.grad)

    # -- serialisation -------------------------------------------------------------
    def describe(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "output": self.output_name,
            "nodes": [{"name": n, "kind": type(layer).__name__, "inputs": list(self.inputs[n]),
                       "config": layer.config()} for n, layer in self.nodes.items()],
        }

    @classmethod
    def from_description(cls, desc: dict) -> "Graph":
        g = cls(tuple(desc["input_shape"]))
        for node in desc["nodes"]:
            kind = LAYER_KINDS[node["kind"]]
            g.add(node["name"], kind(**node["config"]), tuple(node["inputs"]))
        g.output_name = desc["output"]
        return g


def finite_difference_check(graph: Graph, x, perturbation: float = 1e-5, reduction: str | None = None,
                            training: bool = False, include_params: bool = True) -> float:
    """Max relative error between backward() and central differences over all
    parameters and input entries. The graph must produce a scalar per batch
    unless ``reduction="sum"`` attaches a sum head."""
    xt = Tensor(np.array(x, dtype=graph.dtype))
    with ad.no_grad():
        probe = graph.forward(xt, training=training)
    if probe.size != 1 and reduction is None:
        raise ValueError(f"graph output has shape {probe.shape}; pass reduction='sum' or add a scalar head")

    def run():
        out = graph.forward(xt, training=training)
        return out.sum() if reduction == "sum" else out.reshape(())

    tensors = [xt] + (list(graph.parameters().values()) if include_params else [])
    return ad.gradcheck(run, tensors, eps=perturbation)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "PSCK" | u32 version | u32 len + topology JSON | u32 count |
#   count x (u16 len + name | u8 ndim | ndim x u32 dim | float32 LE payload)

MAGIC = b"PSCK"
VERSION = 1


def save_checkpoint(path: str | Path, graph: Graph, extra: dict | None = None) -> None:
    topo = json.dumps({"graph": graph.describe(), "extra": extra or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(topo)))
    buf.write(topo)
    state = graph.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Graph, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, tlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + tlen])
    pos += tlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        state[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    graph = Graph.from_description(meta["graph"])
    graph.load_state_dict(state)
    return graph, meta["extra"]

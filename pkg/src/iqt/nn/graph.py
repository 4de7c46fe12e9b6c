"""Static layer graphs, their parameters, and checkpoint serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, DataError, ShapeError
from . import tensor as T
from .optim import glorot_normal_init

KINDS = ("input", "conv3d", "deconv3d", "maxpool3d", "relu", "batchnorm", "concat", "add", "output")

BN_EPS = 1e-3
BN_MOMENTUM = 0.99


@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: Tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    channels: int = 0

    def param_shapes(self, in_channels: Sequence[int]) -> Dict[str, tuple]:
        """Learnable parameter shapes keyed by slot name."""
        if self.kind == "conv3d":
            k = tuple(self.attrs["kernel"])
            return {"w": (self.channels, in_channels[0]) + k, "b": (self.channels,)}
        if self.kind == "deconv3d":
            s = tuple(self.attrs["stride"])
            return {"w": (in_channels[0], self.channels) + s, "b": (self.channels,)}
        if self.kind == "batchnorm":
            return {"gamma": (self.channels,), "beta": (self.channels,)}
        return {}


class Graph:
    """A directed acyclic layer graph built in topological order."""

    def __init__(self):
        self.nodes: List[LayerNode] = []
        self._by_name: Dict[str, LayerNode] = {}
        self.spec: dict = {}

    def __getitem__(self, name: str) -> LayerNode:
        return self._by_name[name]

    def __len__(self) -> int:
        return len(self.nodes)

    def _add(self, node: LayerNode) -> str:
        if node.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {node.kind!r}")
        if node.name in self._by_name:
            raise ConfigError(f"duplicate layer name {node.name!r}")
        for i in node.inputs:
            if i not in self._by_name:
                raise ConfigError(f"layer {node.name!r} reads undefined input {i!r}")
        self.nodes.append(node)
        self._by_name[node.name] = node
        return node.name

    def _ch(self, name: str) -> int:
        if name not in self._by_name:
            raise ConfigError(f"undefined layer {name!r}")
        return self._by_name[name].channels

    def input(self, channels: int, name: str = "input") -> str:
        return self._add(LayerNode(name, "input", (), {}, channels))

    def conv(self, x: str, filters: int, kernel=(3, 3, 3), name: str = "") -> str:
        kernel = tuple(int(k) for k in kernel)
        if any(k < 1 or k % 2 == 0 for k in kernel):
            raise ConfigError(f"conv kernel must be odd per axis for same padding, got {kernel}")
        return self._add(LayerNode(name, "conv3d", (x,), {"kernel": kernel}, filters))

    def deconv(self, x: str, filters: int, stride=(2, 2, 2), name: str = "") -> str:
        stride = tuple(int(s) for s in stride)
        if any(s < 1 for s in stride):
            raise ConfigError(f"deconv stride must be positive, got {stride}")
        return self._add(LayerNode(name, "deconv3d", (x,), {"stride": stride, "kernel": stride}, filters))

    def maxpool(self, x: str, window=(2, 2, 2), name: str = "") -> str:
        window = tuple(int(w) for w in window)
        return self._add(LayerNode(name, "maxpool3d", (x,), {"window": window}, self._ch(x)))

    def relu(self, x: str, name: str = "") -> str:
        return self._add(LayerNode(name, "relu", (x,), {}, self._ch(x)))

    def batchnorm(self, x: str, name: str = "") -> str:
        return self._add(LayerNode(name, "batchnorm", (x,), {"eps": BN_EPS, "momentum": BN_MOMENTUM}, self._ch(x)))

    def concat(self, xs: Sequence[str], name: str = "") -> str:
        return self._add(LayerNode(name, "concat", tuple(xs), {}, sum(self._ch(x) for x in xs)))

    def add(self, a: str, b: str, name: str = "") -> str:
        if self._ch(a) != self._ch(b):
            raise ConfigError(f"add: channel counts differ ({self._ch(a)} vs {self._ch(b)})")
        return self._add(LayerNode(name, "add", (a, b), {}, self._ch(a)))

    def output(self, x: str, name: str = "output") -> str:
        return self._add(LayerNode(name, "output", (x,), {}, self._ch(x)))

    @property
    def output_name(self) -> str:
        outs = [n.name for n in self.nodes if n.kind == "output"]
        if len(outs) != 1:
            raise ConfigError(f"graph needs exactly one output node, has {len(outs)}")
        return outs[0]

    def param_shapes(self) -> Dict[str, tuple]:
        shapes = {}
        for node in self.nodes:
            ins = [self._ch(i) for i in node.inputs]
            for slot, shape in node.param_shapes(ins).items():
                shapes[f"{node.name}.{slot}"] = shape
        return shapes

    def state_shapes(self) -> Dict[str, tuple]:
        out = {}
        for node in self.nodes:
            if node.kind == "batchnorm":
                out[f"{node.name}.mean"] = (node.channels,)
                out[f"{node.name}.var"] = (node.channels,)
        return out

    def count_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def forward(
        self,
        store: "ParamStore",
        x,
        training: bool = False,
        update_stats: bool = True,
        keep: bool = False,
        bn_momentum: Optional[float] = None,
    ):
        """Run the graph.

        Returns ``(output, param_tensors, activations)``. Parameter tensors
        require gradients only while gradient recording is on; activations
        are returned only when ``keep`` is set. ``bn_momentum`` overrides
        the per-layer running-statistics momentum.
        """
        track = T._GRAD_ENABLED
        xt = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=store.dtype))
        pt = {k: T.Tensor(v, requires_grad=track) for k, v in store.params.items()}
        acts: Dict[str, T.Tensor] = {}
        for node in self.nodes:
            ins = [acts[i] for i in node.inputs]
            kind = node.kind
            p = lambda slot: pt[f"{node.name}.{slot}"]  # noqa: E731
            if kind == "input":
                if xt.data.ndim != 5 or xt.shape[1] != node.channels:
                    raise ShapeError(f"network input must be (n, {node.channels}, x, y, z), got {xt.shape}")
                out = xt
            elif kind == "conv3d":
                out = T.conv3d(ins[0], p("w"), p("b"))
            elif kind == "deconv3d":
                out = T.deconv3d(ins[0], p("w"), p("b"), node.attrs["stride"])
            elif kind == "maxpool3d":
                out = T.maxpool3d(ins[0], node.attrs["window"])
            elif kind == "relu":
                out = T.relu(ins[0])
            elif kind == "batchnorm":
                out = T.batchnorm(
                    ins[0], p("gamma"), p("beta"),
                    store.state[f"{node.name}.mean"], store.state[f"{node.name}.var"],
                    training=training, eps=node.attrs["eps"],
                    momentum=node.attrs["momentum"] if bn_momentum is None else bn_momentum,
                    update_stats=update_stats,
                )
            elif kind == "concat":
                out = T.concat(ins, axis=1)
            elif kind == "add":
                out = T.add(ins[0], ins[1])
            else:  # output
                out = ins[0]
            acts[node.name] = out
        result = acts[self.output_name]
        return result, pt, (acts if keep else None)

    def predict(self, store: "ParamStore", x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Inference-mode forward in batches, no tape."""
        outs = []
        with T.no_grad():
            for s in range(0, len(x), batch_size):
                out, _, _ = self.forward(store, np.asarray(x[s:s + batch_size], dtype=store.dtype), training=False)
                outs.append(out.data)
        return np.concatenate(outs, axis=0)


def _blob_name(group: str, name: str) -> str:
    return f"{group}__{name}.f32"


@dataclass
class ParamStore:
    params: Dict[str, np.ndarray]
    state: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @property
    def dtype(self):
        first = next(iter(self.params.values()), None)
        return np.float32 if first is None else first.dtype

    @classmethod
    def initialize(cls, graph: Graph, rng: np.random.Generator, dtype=np.float32) -> "ParamStore":
        params = {}
        for name, shape in graph.param_shapes().items():
            slot = name.rsplit(".", 1)[1]
            if slot == "w":
                arr = glorot_normal_init(shape, rng)
            elif slot == "gamma":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = arr.astype(dtype)
        state = {}
        for name, shape in graph.state_shapes().items():
            state[name] = (np.ones(shape) if name.endswith(".var") else np.zeros(shape)).astype(np.float64)
        store = cls(params, state)
        store.reset_moments()
        return store

    def reset_moments(self) -> None:
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0

    def astype(self, dtype) -> "ParamStore":
        cast = lambda d: {k: v.astype(dtype) for k, v in d.items()}  # noqa: E731
        return ParamStore(cast(self.params), {k: v.copy() for k, v in self.state.items()},
                          cast(self.adam_m), cast(self.adam_v), self.step)

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def check_against(self, graph: Graph) -> None:
        want = graph.param_shapes()
        have = {k: v.shape for k, v in self.params.items()}
        if want != have:
            raise ShapeError("parameter store does not match the graph")
        for k in self.params:
            if self.adam_m[k].shape != want[k] or self.adam_v[k].shape != want[k]:
                raise ShapeError(f"Adam buffers for {k} do not match the parameter shape")

    def save(self, directory, graph_spec: Optional[dict] = None) -> None:
        """Write ``manifest.json`` and one little-endian f32 blob per tensor."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for group, tensors in (("param", self.params), ("state", self.state), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name in sorted(tensors):
                fname = _blob_name(group, name)
                np.ascontiguousarray(tensors[name], dtype="<f4").tofile(d / fname)
                entries.append({"group": group, "name": name, "shape": list(tensors[name].shape), "file": fname})
        manifest = {"graph": graph_spec or {}, "step": self.step, "tensors": entries}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory, dtype=np.float32) -> Tuple["ParamStore", dict]:
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except FileNotFoundError:
            raise DataError(f"no checkpoint manifest in {d}") from None
        groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "state": {}, "adam_m": {}, "adam_v": {}}
        for e in manifest["tensors"]:
            shape = tuple(e["shape"])
            raw = np.fromfile(d / e["file"], dtype="<f4")
            if raw.size != int(np.prod(shape)):
                raise DataError(f"blob {e['file']} holds {raw.size} values, manifest says {shape}")
            want = np.float64 if e["group"] == "state" else dtype
            groups[e["group"]][e["name"]] = raw.reshape(shape).astype(want)
        store = cls(groups["param"], groups["state"], groups["adam_m"], groups["adam_v"], int(manifest["step"]))
        return store, manifest["graph"]

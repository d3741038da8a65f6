"""Classifier definitions (linear, MLP, ConvNet), parameter masks, checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .io import ContainerError, read_container, write_container
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"DSVC"
KINDS = ("linear", "mlp", "convnet")


@dataclass(frozen=True)
class Architecture:
    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = ()
    channels: int = 32
    depth: int = 3
    tied: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.tied and (self.kind != "linear" or self.num_classes != 2):
            raise ValueError("tied logits only exist for a binary linear model")
        if self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise ValueError("convnet input shape must be (channels, height, width)")
            _, h, w = self.input_shape
            if h >> self.depth < 1 or w >> self.depth < 1:
                raise ValueError("input too small for the requested depth")

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind, "input_shape": list(self.input_shape),
            "num_classes": self.num_classes, "hidden": list(self.hidden),
            "channels": self.channels, "depth": self.depth, "tied": self.tied,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Architecture:
        d = json.loads(text)
        return cls(kind=d["kind"], input_shape=tuple(d["input_shape"]),
                   num_classes=int(d["num_classes"]), hidden=tuple(d.get("hidden", ())),
                   channels=int(d.get("channels", 32)), depth=int(d.get("depth", 3)),
                   tied=bool(d.get("tied", False)))

    @property
    def in_features(self) -> int:
        return int(np.prod(self.input_shape))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in their fixed declaration order."""
        c = self.num_classes
        if self.kind == "linear":
            if self.tied:
                return {"w": (self.in_features,), "b": ()}
            return {"weight": (c, self.in_features), "bias": (c,)}
        if self.kind == "mlp":
            shapes, fan_in = {}, self.in_features
            for i, width in enumerate(self.hidden):
                shapes[f"fc{i}.weight"] = (width, fan_in)
                shapes[f"fc{i}.bias"] = (width,)
                fan_in = width
            shapes["out.weight"] = (c, fan_in)
            shapes["out.bias"] = (c,)
            return shapes
        shapes, cin = {}, self.input_shape[0]
        for i in range(self.depth):
            shapes[f"conv{i}.weight"] = (self.channels, cin, 3, 3)
            shapes[f"conv{i}.bias"] = (self.channels,)
            cin = self.channels
        _, h, w = self.input_shape
        feat = self.channels * (h >> self.depth) * (w >> self.depth)
        shapes["fc.weight"] = (c, feat)
        shapes["fc.bias"] = (c,)
        return shapes

    def last_layer(self) -> tuple[str, ...]:
        names = tuple(self.param_shapes())
        return names if self.kind == "linear" else names[-2:]


@dataclass(frozen=True)
class Model:
    arch: Architecture
    params: Mapping[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if list(self.params) != list(shapes):
            raise ValueError(f"parameters {list(self.params)} do not match {list(shapes)}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def with_params(self, updates: Mapping[str, Tensor | np.ndarray]) -> Model:
        params = dict(self.params)
        for name, value in updates.items():
            if name not in params:
                raise KeyError(name)
            params[name] = value if isinstance(value, Tensor) else Tensor(value)
        return replace(self, params=params)

    def as_leaves(self, names: Iterable[str] | None = None) -> tuple[Model, dict[str, Tensor]]:
        """Copy of the model whose selected parameters are differentiable leaves."""
        names = list(self.params) if names is None else list(names)
        leaves = {n: Tensor(self.params[n].data, requires_grad=True) for n in names}
        return self.with_params(leaves), leaves

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(arch: Architecture, seed: int = 0) -> Model:
    """Uniform He-style init (bound sqrt(6 / fan_in)); biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("bias") or name == "b":
            params[name] = Tensor(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return Model(arch, params)


def zero_model(arch: Architecture) -> Model:
    return Model(arch, {n: Tensor(np.zeros(s)) for n, s in arch.param_shapes().items()})


def _dense(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    out = T.matmul(h, T.transpose(weight))
    return T.add(out, T.expand(T.reshape(bias, (1, -1)), out.shape))


_TIE = Tensor([[1.0, -1.0]])


def forward(model: Model, x) -> Tensor:
    """Logits of shape (batch, num_classes) for a batch ``x``."""
    x = T.as_tensor(x)
    arch, p = model.arch, model.params
    if tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} does not match {arch.input_shape}")
    n = x.shape[0]
    if arch.kind == "linear":
        h = T.reshape(x, (n, arch.in_features))
        if arch.tied:
            score = T.matmul(h, T.reshape(p["w"], (-1, 1)))
            score = T.add(score, T.expand(T.reshape(p["b"], (1, 1)), score.shape))
            return T.matmul(score, _TIE)
        return _dense(h, p["weight"], p["bias"])
    if arch.kind == "mlp":
        h = T.reshape(x, (n, arch.in_features))
        for i in range(len(arch.hidden)):
            h = T.relu(_dense(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"]))
        return _dense(h, p["out.weight"], p["out.bias"])
    h = x
    for i in range(arch.depth):
        bias = p[f"conv{i}.bias"]
        h = T.conv2d(h, p[f"conv{i}.weight"], padding=1)
        h = T.add(h, T.expand(T.reshape(bias, (1, -1, 1, 1)), h.shape))
        h = T.maxpool2x2(T.relu(h))
    h = T.reshape(h, (n, -1))
    return _dense(h, p["fc.weight"], p["fc.bias"])


def predict(model: Model, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    with T.no_grad():
        out = [forward(model, x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out).argmax(axis=1) if out else np.zeros(0, dtype=int)


def logits(model: Model, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    with T.no_grad():
        return np.concatenate([forward(model, x[i:i + batch_size]).data
                               for i in range(0, len(x), batch_size)])


# ---------------------------------------------------------------- masks

@dataclass(frozen=True)
class ParamMask:
    """Which parameters take part in a flattened parameter vector."""

    include: frozenset[str]

    @classmethod
    def full(cls, model: Model) -> ParamMask:
        return cls(frozenset(model.params))

    @classmethod
    def last_layer(cls, model: Model) -> ParamMask:
        return cls(frozenset(model.arch.last_layer()))

    @classmethod
    def of(cls, names: Iterable[str]) -> ParamMask:
        return cls(frozenset(names))

    @classmethod
    def named(cls, model: Model, spec: str) -> ParamMask:
        if spec == "full":
            return cls.full(model)
        if spec == "last-layer":
            return cls.last_layer(model)
        raise ValueError(f"unknown mask {spec!r} (expected full or last-layer)")

    def names(self, model: Model) -> list[str]:
        unknown = self.include - set(model.params)
        if unknown:
            raise KeyError(f"unknown parameter(s) in mask: {sorted(unknown)}")
        if not self.include:
            raise ValueError("empty parameter mask")
        return [n for n in model.params if n in self.include]


def flatten_params(model: Model, mask: ParamMask | None = None) -> Tensor:
    names = (mask or ParamMask.full(model)).names(model)
    return T.concat([T.reshape(model.params[n], (-1,)) for n in names])


def unflatten_params(model: Model, vector, mask: ParamMask | None = None) -> Model:
    names = (mask or ParamMask.full(model)).names(model)
    vec = np.asarray(vector.data if isinstance(vector, Tensor) else vector, dtype=np.float64)
    expected = sum(model.params[n].size for n in names)
    if vec.shape != (expected,):
        raise ShapeError(f"vector length {vec.size}, mask covers {expected} parameters")
    updates, pos = {}, 0
    for n in names:
        shape = model.params[n].shape
        size = model.params[n].size
        updates[n] = vec[pos:pos + size].reshape(shape)
        pos += size
    return model.with_params(updates)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path, config_text: str = "") -> None:
    """The header is the architecture JSON on one line, then an optional config echo."""
    write_container(path, CHECKPOINT_MAGIC, model.arch.to_json() + "\n" + config_text,
                    {n: p.data for n, p in model.params.items()})


def load_checkpoint(path) -> Model:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    try:
        arch = Architecture.from_json(header.partition("\n")[0])
    except (ValueError, KeyError) as exc:
        raise ContainerError(f"bad architecture descriptor: {exc}") from exc
    shapes = arch.param_shapes()
    if list(arrays) != list(shapes):
        raise ContainerError("shape mismatch: parameter names differ from descriptor")
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise ContainerError(f"shape mismatch: {name} is {arrays[name].shape}, expected {shape}")
    return Model(arch, {n: Tensor(a) for n, a in arrays.items()})

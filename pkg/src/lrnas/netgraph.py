"""Convolutional networks as a layer DAG.

A :class:`NetworkGraph` holds layers in topological order; each layer names
the ids it reads from (``"input"`` is the graph input). Compression targets are
convolutions that may later be replaced by a :class:`BuildingBlock` or a
:class:`SuperBlock` via :func:`substitute`, which never mutates its argument.
"""

from __future__ import annotations

import contextlib
import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import costmodel
from .errors import ArtifactError, ContractError, DimensionError, TrainingError
from .lrspace import BlockConfig, Branch, ConvGeometry, Factorizer, branch_geometry, derive_weights, reconstruct
from .tensor import (
    SGD,
    BatchNormState,
    Tensor,
    avg_pool2d,
    batch_norm,
    conv2d,
    cross_entropy,
    flatten,
    gumbel_softmax,
    linear,
    max_pool2d,
    no_grad,
)

INPUT = "input"
CONV_KINDS = ("conv", "block", "superblock")


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class Layer:
    kind = "layer"

    def __init__(self, id, inputs):
        self.id = id
        self.inputs = list(inputs)

    def parameters(self):
        return []

    def tensors(self):
        """Named arrays to persist, excluding trainable parameters' gradients."""
        return {}

    def spec(self):
        return {"id": self.id, "kind": self.kind, "inputs": self.inputs}


class Conv(Layer):
    kind = "conv"

    def __init__(self, id, inputs, weight, bias=None, stride=1, padding=0, groups=1, in_size=(1, 1)):
        super().__init__(id, inputs)
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        self.bias = bias if bias is None or isinstance(bias, Tensor) else Tensor(bias, requires_grad=True)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.groups = int(groups)
        self.in_size = _pair(in_size)

    @property
    def geometry(self):
        f, cg, kh, kw = self.weight.shape
        return ConvGeometry(f, cg * self.groups, (kh, kw), self.stride, self.padding, self.in_size,
                            self.groups, self.bias is not None)

    def forward(self, x, ctx):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def tensors(self):
        out = {"weight": self.weight.data}
        if self.bias is not None:
            out["bias"] = self.bias.data
        return out

    def spec(self):
        g = self.geometry
        d = super().spec()
        d.update(filters=g.filters, channels=g.channels, kernel=list(g.kernel), stride=list(self.stride),
                 padding=list(self.padding), groups=self.groups, in_size=list(self.in_size),
                 bias=self.bias is not None)
        return d


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, id, inputs, state):
        super().__init__(id, inputs)
        self.state = state

    def forward(self, x, ctx):
        if ctx.bn_inputs is not None:
            ctx.bn_inputs[self.id] = x
        return batch_norm(x, self.state, training=ctx.training, momentum=ctx.bn_momentum)

    def parameters(self):
        return [self.state.gamma, self.state.beta]

    def tensors(self):
        s = self.state
        return {"gamma": s.gamma.data, "beta": s.beta.data, "running_mean": s.running_mean,
                "running_var": s.running_var}

    def spec(self):
        d = super().spec()
        d.update(channels=self.state.channels, eps=self.state.eps, momentum=self.state.momentum)
        return d


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        return x.relu()


class Pool(Layer):
    """Max or average pooling; ``kernel=None`` pools the whole map."""

    kind = "pool"

    def __init__(self, id, inputs, mode="avg", kernel=None, stride=None):
        super().__init__(id, inputs)
        if mode not in ("avg", "max"):
            raise ContractError(f"pool mode must be avg or max, got {mode!r}")
        self.mode = mode
        self.kernel = None if kernel is None else _pair(kernel)
        self.stride = None if stride is None else _pair(stride)

    def forward(self, x, ctx):
        kernel = self.kernel or x.shape[2:]
        fn = avg_pool2d if self.mode == "avg" else max_pool2d
        return fn(x, kernel, self.stride)

    def spec(self):
        d = super().spec()
        d.update(mode=self.mode, kernel=self.kernel and list(self.kernel), stride=self.stride and list(self.stride))
        return d


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return flatten(x)


class FC(Layer):
    kind = "fc"

    def __init__(self, id, inputs, weight, bias=None):
        super().__init__(id, inputs)
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        self.bias = bias if bias is None or isinstance(bias, Tensor) else Tensor(bias, requires_grad=True)

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"fully-connected layer expects (N, {self.in_features}), got {x.shape}")
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def tensors(self):
        out = {"weight": self.weight.data}
        if self.bias is not None:
            out["bias"] = self.bias.data
        return out

    def spec(self):
        d = super().spec()
        d.update(in_features=self.in_features, out_features=self.out_features, bias=self.bias is not None)
        return d


class Add(Layer):
    kind = "add"

    def forward(self, *xs):
        *xs, ctx = xs
        if any(x.shape != xs[0].shape for x in xs):
            raise DimensionError(f"add operands differ in shape: {[x.shape for x in xs]}")
        out = xs[0]
        for x in xs[1:]:
            out = out + x
        return out


class BuildingBlock(Layer):
    """One or two low-rank branches replacing a convolution; branch outputs are summed."""

    kind = "block"

    def __init__(self, id, inputs, geometry, branches, bias=None):
        super().__init__(id, inputs)
        if not 1 <= len(branches) <= 2:
            raise ContractError(f"a building block has 1 or 2 branches, got {len(branches)}")
        self.geometry = geometry
        self.branches = []
        for b in branches:
            w0 = b.w0 if isinstance(b.w0, Tensor) else Tensor(b.w0, requires_grad=True)
            w1 = b.w1 if isinstance(b.w1, Tensor) else Tensor(b.w1, requires_grad=True)
            f, c = geometry.filters, geometry.channels
            if w0.shape != b.config.first_shape(f, c) or w1.shape != b.config.second_shape(f, c):
                raise ContractError(f"branch weights {w0.shape}, {w1.shape} do not fit config {b.config.label()}")
            self.branches.append(Branch(b.config, w0, w1))
        self.bias = bias if bias is None or isinstance(bias, Tensor) else Tensor(bias, requires_grad=True)

    @classmethod
    def from_configs(cls, conv, configs, factorizer=None, residual_factorizer=None):
        """Derive the branches for ``configs`` from a convolution layer's weight.

        Branch 1, when present, is derived from the residual left by branch 0.
        """
        configs = list(configs)
        fac = factorizer if factorizer is not None else Factorizer(conv.weight.data)
        w0, w1 = fac.derive(configs[0])
        branches = [Branch(configs[0], w0, w1)]
        if len(configs) > 1:
            if residual_factorizer is None:
                residual = conv.weight.data - reconstruct(configs[0], w0, w1).astype(conv.weight.dtype)
                residual_factorizer = Factorizer(residual)
            r0, r1 = residual_factorizer.derive(configs[1])
            branches.append(Branch(configs[1], r0, r1))
        return cls(conv.id, conv.inputs, conv.geometry, branches, bias=conv.bias)

    def with_branch(self, cfg, residual_factorizer):
        """A copy of this one-branch block plus a second branch fitted to the residual."""
        r0, r1 = residual_factorizer.derive(cfg)
        return BuildingBlock(self.id, self.inputs, self.geometry, self.branches + [Branch(cfg, r0, r1)], self.bias)

    @property
    def configs(self):
        return [b.config for b in self.branches]

    def reconstruct(self):
        return sum(reconstruct(b.config, b.w0, b.w1) for b in self.branches)

    def forward(self, x, ctx):
        out = None
        for i, b in enumerate(self.branches):
            first, second = branch_geometry(b.config, self.geometry)
            y = conv2d(x, b.w0, None, first.stride, first.padding, b.config.g0)
            y = conv2d(y, b.w1, self.bias if i == 0 else None, second.stride, second.padding, b.config.g1)
            out = y if out is None else out + y
        return out

    def parameters(self):
        ps = [t for b in self.branches for t in (b.w0, b.w1)]
        return ps + ([self.bias] if self.bias is not None else [])

    def tensors(self):
        out = {}
        for i, b in enumerate(self.branches):
            out[f"branch{i}.w0"] = b.w0.data
            out[f"branch{i}.w1"] = b.w1.data
        if self.bias is not None:
            out["bias"] = self.bias.data
        return out

    def spec(self):
        g = self.geometry
        d = super().spec()
        d.update(filters=g.filters, channels=g.channels, kernel=list(g.kernel), stride=list(g.stride),
                 padding=list(g.padding), groups=g.groups, in_size=list(g.in_size), bias=self.bias is not None,
                 branches=[c.to_dict() for c in self.configs])
        return d


class SuperBlock(Layer):
    """Search-time container: candidate 0 is the original layer, the rest are blocks.

    With ``anchor_original=False`` candidate 0 may be any incumbent layer
    (used when searching a residual branch). Forward returns the weighted sum
    of candidates. When ``mixture`` is set to
    ``(indices, weights)`` only those candidates run; otherwise every candidate
    is weighted by a Gumbel-Softmax draw over ``theta`` at ``temperature``.
    """

    kind = "superblock"

    def __init__(self, id, inputs, candidates, theta=None, temperature=5.0, rng=None, anchor_original=True):
        super().__init__(id, inputs)
        if not candidates:
            raise ContractError("a super block needs at least one candidate")
        if anchor_original and candidates[0].kind != "conv":
            raise ContractError("candidate 0 of a super block must be the original convolution")
        self.candidates = list(candidates)
        n = len(self.candidates)
        self.theta = theta if theta is not None else Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)
        if self.theta.shape != (n,):
            raise ContractError(f"theta has shape {self.theta.shape}, expected ({n},)")
        self.temperature = float(temperature)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.mixture = None
        self.geometry = self.candidates[0].geometry

    def forward(self, x, ctx):
        if self.mixture is None:
            idx = list(range(len(self.candidates)))
            weights = gumbel_softmax(self.theta, self.temperature, self.rng)
        else:
            idx, weights = self.mixture
        out = None
        for j, k in enumerate(idx):
            y = self.candidates[k].forward(x, ctx) * weights[j]
            out = y if out is None else out + y
        return out

    def parameters(self):
        return [p for c in self.candidates for p in c.parameters()]


@dataclass
class _Context:
    training: bool = False
    bn_momentum: float = None
    bn_inputs: dict = None


class NetworkGraph:
    """Layers in topological order; the last layer's output is the logits."""

    def __init__(self, input_shape, layers, targets=(), original_costs=None, meta=None):
        self.meta = dict(meta or {})
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        self.targets = list(targets)
        self._index = {layer.id: i for i, layer in enumerate(self.layers)}
        if len(self._index) != len(self.layers) or INPUT in self._index:
            raise ContractError("layer ids must be unique and must not be 'input'")
        seen = {INPUT}
        for layer in self.layers:
            missing = [s for s in layer.inputs if s not in seen]
            if missing or not layer.inputs:
                raise ContractError(f"layer {layer.id!r} reads {missing or 'nothing'} before definition")
            seen.add(layer.id)
        for t in self.targets:
            if t not in self._index or self.layer(t).kind not in CONV_KINDS:
                raise ContractError(f"compression target {t!r} is not a convolution in the graph")
        if original_costs is None:
            original_costs = {t: costmodel.layer_cost(self.layer(t)) for t in self.targets}
        self.original_costs = dict(original_costs)
        missing = [t for t in self.targets if t not in self.original_costs]
        if missing:
            raise ContractError(f"targets without recorded original cost: {missing}")

    def layer(self, layer_id):
        try:
            return self.layers[self._index[layer_id]]
        except KeyError:
            raise ContractError(f"no layer named {layer_id!r}") from None

    def __contains__(self, layer_id):
        return layer_id in self._index

    def conv_layers(self):
        return [layer for layer in self.layers if layer.kind in CONV_KINDS]

    def parameters(self):
        seen, out = set(), []
        for layer in self.layers:
            for p in layer.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def batchnorms(self):
        return [layer for layer in self.layers if layer.kind == "batchnorm"]

    def superblocks(self):
        return [layer for layer in self.layers if layer.kind == "superblock"]

    def clone(self):
        """Deep copy: arrays, parameters and BN buffers are all duplicated."""
        return copy.deepcopy(self)

    def forward(self, x, training=False, capture=False, bn_momentum=None, capture_bn=False):
        """Run the graph on an NCHW batch.

        Returns the logits, or ``(logits, captured)`` when ``capture`` or
        ``capture_bn`` is set; ``captured`` maps conv-like layer ids to their
        outputs and, with ``capture_bn``, ``"bn:<id>"`` to each BN layer's input.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"edge input -> {self.layers[0].id}: expected (N, {self.input_shape}), got {x.shape}")
        ctx = _Context(training, bn_momentum, {} if capture_bn else None)
        values = {INPUT: x}
        captured = {}
        out = x
        for layer in self.layers:
            args = [values[s] for s in layer.inputs]
            try:
                out = layer.forward(*args, ctx)
            except DimensionError as exc:
                raise DimensionError(f"edge {','.join(layer.inputs)} -> {layer.id}: {exc}") from None
            values[layer.id] = out
            if capture and layer.kind in CONV_KINDS:
                captured[layer.id] = out
        if capture_bn:
            captured.update({f"bn:{k}": v for k, v in ctx.bn_inputs.items()})
        if capture or capture_bn:
            return out, captured
        return out

    __call__ = forward

    def predict(self, images, batch_size=500):
        with no_grad():
            return np.concatenate(
                [self.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
            )

    def cost(self, latency_table=None):
        return costmodel.model_cost(self, latency_table)

    def original_cost(self):
        """Model cost with every target restored to its recorded original layer cost."""
        total = costmodel.CostReport()
        for layer in self.layers:
            if layer.id in self.original_costs:
                total = total + self.original_costs[layer.id]
            else:
                total = total + costmodel.layer_cost(layer)
        return total


def _io_contract(layer):
    if layer.kind == "superblock":
        shapes = {(c.geometry.filters, c.geometry.channels, c.geometry.in_size, c.geometry.out_size)
                  for c in layer.candidates}
        if len(shapes) != 1:
            raise ContractError(f"super block {layer.id!r} candidates disagree on input/output shape")
        return shapes.pop()
    g = layer.geometry
    return (g.filters, g.channels, g.in_size, g.out_size)


def substitute(graph, layer_id, replacement):
    """A new graph with ``layer_id`` replaced; ``graph`` itself is left untouched.

    The replacement is rewired to the original layer's inputs and keeps its id.
    Layers other than the replaced one are shared, not copied.
    """
    if layer_id not in graph.targets:
        raise ContractError(f"layer {layer_id!r} is not a compression target")
    current = graph.layer(layer_id)
    if replacement.kind not in CONV_KINDS:
        raise ContractError(f"cannot substitute a {replacement.kind} layer for a convolution")
    if _io_contract(current) != _io_contract(replacement):
        raise ContractError(
            f"replacement io-contract {_io_contract(replacement)} does not match {_io_contract(current)} "
            f"for layer {layer_id!r}"
        )
    new = copy.copy(replacement)
    new.id, new.inputs = layer_id, list(current.inputs)
    layers = [new if layer.id == layer_id else layer for layer in graph.layers]
    return NetworkGraph(graph.input_shape, layers, graph.targets, graph.original_costs, graph.meta)


def original_layer(graph, layer_id):
    """The uncompressed convolution behind a target, whatever currently occupies its slot."""
    layer = graph.layer(layer_id)
    if layer.kind == "superblock":
        return layer.candidates[0]
    if layer.kind == "conv":
        return layer
    raise ContractError(f"layer {layer_id!r} is a {layer.kind}; the original convolution is not stored")


# ---------------------------------------------------------------------------
# evaluation and training


def iterate_batches(images, labels=None, batch_size=256, rng=None):
    n = len(images)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        sel = order[i : i + batch_size]
        yield (images[sel], None if labels is None else labels[sel])


def _as_batches(dataset, batch_size=500):
    if hasattr(dataset, "images") and hasattr(dataset, "labels"):
        return list(iterate_batches(dataset.images, dataset.labels, batch_size))
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        return list(iterate_batches(dataset[0], dataset[1], batch_size))
    return list(dataset)


def accuracy_counts(logits, labels, k=5):
    """Number of top-1 and top-k hits; ties in logits resolve toward the lower class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    order = np.argsort(-logits, axis=1, kind="stable")
    top1 = int((order[:, 0] == labels).sum())
    topk = int((order[:, :k] == labels[:, None]).any(axis=1).sum())
    return top1, topk


def evaluate(graph, dataset, batch_size=500):
    """Top-1 and top-5 accuracy (fractions) of ``graph`` in eval mode."""
    batches = _as_batches(dataset, batch_size)
    total = sum(len(y) for _, y in batches)
    if total == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    hit1 = hit5 = 0
    with no_grad():
        for x, y in batches:
            logits = graph.forward(x).data
            if np.any((y < 0) | (y >= logits.shape[1])):
                raise ContractError("labels outside [0, classes)")
            a, b = accuracy_counts(logits, y)
            hit1 += a
            hit5 += b
    return hit1 / total, hit5 / total


@dataclass
class TrainSchedule:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0


def pretrain(graph, images, labels, schedule=TrainSchedule(), log=None):
    """Cross-entropy SGD with a cosine learning rate; trains a clone and returns it."""
    model = graph.clone()
    params = model.parameters()
    opt = SGD(params, schedule.lr, schedule.momentum, schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    for epoch in range(schedule.epochs):
        opt.lr = 0.5 * schedule.lr * (1 + np.cos(np.pi * epoch / schedule.epochs))
        losses = []
        for x, y in iterate_batches(images, labels, schedule.batch_size, rng):
            opt.zero_grad()
            loss = cross_entropy(model.forward(x, training=True), y)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite training loss in epoch {epoch}", epoch=epoch)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if log is not None:
            log(epoch, float(np.mean(losses)))
    return model


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop gradient recording for ``params``."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


# ---------------------------------------------------------------------------
# desk reference model


def build_desk_model(seed=0, num_classes=10):
    """Six 3x3 convs (16-16-32-32-64-64) with BN, two residual adds, GAP and an FC head.

    Input is 3x16x16. Every conv but the first is a compression target.
    """
    rng = np.random.default_rng(seed)

    def he(f, c, k=3):
        return (rng.standard_normal((f, c, k, k)) * np.sqrt(2.0 / (c * k * k))).astype(np.float32)

    layers = []

    def conv_bn(name, src, c, f, stride, size):
        layers.append(Conv(name, [src], he(f, c), None, stride, 1, 1, size))
        layers.append(BatchNorm(f"bn{name[1:]}", [name], BatchNormState(f)))
        return f"bn{name[1:]}"

    x = conv_bn("c1", INPUT, 3, 16, 1, 16)
    layers.append(ReLU("relu1", [x]))
    x = conv_bn("c2", "relu1", 16, 16, 1, 16)
    layers.append(Add("add2", [x, "relu1"]))
    layers.append(ReLU("relu2", ["add2"]))
    x = conv_bn("c3", "relu2", 16, 32, 2, 16)
    layers.append(ReLU("relu3", [x]))
    x = conv_bn("c4", "relu3", 32, 32, 1, 8)
    layers.append(Add("add4", [x, "relu3"]))
    layers.append(ReLU("relu4", ["add4"]))
    x = conv_bn("c5", "relu4", 32, 64, 2, 8)
    layers.append(ReLU("relu5", [x]))
    x = conv_bn("c6", "relu5", 64, 64, 1, 4)
    layers.append(ReLU("relu6", [x]))
    layers.append(Pool("gap", ["relu6"], "avg"))
    layers.append(Flatten("flat", ["gap"]))
    fc_w = (rng.standard_normal((num_classes, 64)) * np.sqrt(1.0 / 64)).astype(np.float32)
    layers.append(FC("fc", ["flat"], fc_w, np.zeros(num_classes, dtype=np.float32)))
    return NetworkGraph((3, 16, 16), layers, targets=["c2", "c3", "c4", "c5", "c6"])


# ---------------------------------------------------------------------------
# model files


def _blob_path(path):
    path = Path(path)
    return path.with_suffix(".bin")


def save_model(graph, path):
    """Write ``path`` (JSON manifest) and its sibling ``.bin`` blob of little-endian float32."""
    path = Path(path)
    table, chunks, offset = {}, [], 0
    specs = []
    for layer in graph.layers:
        if layer.kind == "superblock":
            raise ContractError(f"super block {layer.id!r} cannot be saved; select a candidate first")
        spec = layer.spec()
        names = {}
        for role, arr in layer.tensors().items():
            name = f"{layer.id}.{role}"
            data = np.ascontiguousarray(arr, dtype="<f4")
            table[name] = {"offset": offset, "shape": list(data.shape)}
            chunks.append(data.tobytes())
            offset += data.nbytes
            names[role] = name
        spec["tensors"] = names
        specs.append(spec)
    manifest = {
        "format": "lrnas-model",
        "version": 1,
        "input_shape": list(graph.input_shape),
        "targets": graph.targets,
        "original_costs": {k: v.to_dict() for k, v in graph.original_costs.items()},
        "layers": specs,
        "tensors": table,
        "blob": _blob_path(path).name,
        "meta": graph.meta,
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    _blob_path(path).write_bytes(b"".join(chunks))


def _read_tensor(blob, entry):
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=int(entry["offset"]))
    return arr.reshape(shape).astype(np.float32)


def load_model(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ArtifactError(path, "model manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(path, f"model manifest is not JSON ({exc})") from None
    if manifest.get("format") != "lrnas-model":
        raise ArtifactError(path, "not a model manifest")
    blob_path = path.parent / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise ArtifactError(blob_path, "model blob not found") from None
    table = manifest["tensors"]
    for name, entry in table.items():
        end = int(entry["offset"]) + 4 * int(np.prod(entry["shape"]))
        if end > len(blob):
            raise ArtifactError(blob_path, f"tensor {name} extends past end of blob")
    try:
        layers = [_layer_from_spec(spec, {r: _read_tensor(blob, table[n]) for r, n in spec["tensors"].items()})
                  for spec in manifest["layers"]]
        costs = {k: costmodel.CostReport(int(v["flops"]), int(v["params"])) for k, v in
                 manifest["original_costs"].items()}
        return NetworkGraph(manifest["input_shape"], layers, manifest["targets"], costs, manifest.get("meta"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(path, f"malformed model manifest ({exc})") from None


def _layer_from_spec(spec, t):
    kind, lid, inputs = spec["kind"], spec["id"], spec["inputs"]
    if kind == "conv":
        return Conv(lid, inputs, t["weight"], t.get("bias"), spec["stride"], spec["padding"], spec["groups"],
                    spec["in_size"])
    if kind == "batchnorm":
        state = BatchNormState(spec["channels"], spec["eps"], spec["momentum"])
        state.gamma.data[:] = t["gamma"]
        state.beta.data[:] = t["beta"]
        state.running_mean = t["running_mean"].copy()
        state.running_var = t["running_var"].copy()
        return BatchNorm(lid, inputs, state)
    if kind == "relu":
        return ReLU(lid, inputs)
    if kind == "pool":
        return Pool(lid, inputs, spec["mode"], spec["kernel"], spec["stride"])
    if kind == "flatten":
        return Flatten(lid, inputs)
    if kind == "fc":
        return FC(lid, inputs, t["weight"], t.get("bias"))
    if kind == "add":
        return Add(lid, inputs)
    if kind == "block":
        geom = ConvGeometry(spec["filters"], spec["channels"], tuple(spec["kernel"]), tuple(spec["stride"]),
                            tuple(spec["padding"]), tuple(spec["in_size"]), spec["groups"], spec["bias"])
        branches = [Branch(BlockConfig.from_dict(c), t[f"branch{i}.w0"], t[f"branch{i}.w1"])
                    for i, c in enumerate(spec["branches"])]
        return BuildingBlock(lid, inputs, geom, branches, t.get("bias"))
    raise ValueError(f"unknown layer kind {kind!r}")


__all__ = [
    "Add",
    "BatchNorm",
    "BuildingBlock",
    "Conv",
    "FC",
    "Flatten",
    "INPUT",
    "NetworkGraph",
    "Pool",
    "ReLU",
    "SuperBlock",
    "TrainSchedule",
    "build_desk_model",
    "derive_weights",
    "evaluate",
    "frozen",
    "iterate_batches",
    "load_model",
    "original_layer",
    "pretrain",
    "save_model",
    "substitute",
]

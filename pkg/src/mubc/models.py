"""Architecture archetypes and the training loss.

Both archetypes share the embedded preprocessing, the (nodes x m) output, and
the embedded Dirichlet imposition:

  * graph trunk: one lifting graph layer, residual blocks of two graph layers
    with batch normalization, periodic re-feeding of the preprocessed input
    via feature concatenation, and a linear graph output layer.  The hidden
    depth is H = [3/2 diam(G)] rounded half up, which guarantees every input
    node can influence every output node with depth to spare.
  * convolutional/FC trunk: one full-length sequence convolution per input
    feature (funnelling the feature count down to 1), residual blocks of two
    FC layers of V units, an (H+1)-th FC layer, and either a final FC layer
    (m = 1) or m parallel branches of m FC layers with a residual connection
    to the (H+1)-th layer, concatenated into the output matrix.  Its depth is
    chosen as the smallest H >= 3 whose parameter count reaches the graph
    model's count.

The training loss is a node-weighted MSE: weight 1 at internal and
only-Neumann nodes, 0 at only-Dirichlet nodes (their values are imposed), and
0.1 at BC-switch nodes.

Checkpoint container (little-endian): magic ``MUBP``, version u32, entry
count u32, then per entry a u16 name length, the UTF-8 name, a u8 rank, u32
dims, and the float64 buffer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .layers import (BatchNorm, ConvSeqLayer, DirichletImposer, FCLayer,
                     GILayer, InputPreprocess)
from .mesh import MeshGraph, NodeClassification


class ModelError(ValueError):
    pass


def ginn_depth(diameter: int) -> int:
    """Hidden graph-layer count: 3/2 of the graph diameter, rounded half up."""
    if diameter < 0:
        raise ModelError(f"diameter must be non-negative, got {diameter}")
    return max(1, int(np.floor(1.5 * diameter + 0.5)))


@dataclass(frozen=True)
class IOSpec:
    """Input/output contract shared by both archetypes."""

    k: int = 1                    # BC value components per node
    q: int = 1                    # physical parameter columns (1 constant if none)
    m: int = 1                    # output fields per node
    beta_scale: float = 1.0
    target_scale: float = 1.0
    phi_box: tuple = None         # q ranges for the [-1, 1] input map, or None

    @property
    def width(self):
        return self.k + 2 + self.q

    @classmethod
    def from_dataset(cls, dataset):
        meta = dataset.metadata
        q = 1 if dataset.experiment == "diffusion" else 2
        phi_box = meta.get("phi_box")
        return cls(k=1, q=q, m=dataset.targets.shape[2],
                   beta_scale=float(meta.get("beta_scale", 1.0)),
                   target_scale=float(meta.get("target_scale", 1.0)),
                   phi_box=tuple(map(tuple, phi_box)) if phi_box else None)


@dataclass(frozen=True)
class GinnConfig:
    f_features: int = 4
    rho: int = 10
    activation: str = "tanh"
    m: int = 1

    def __post_init__(self):
        if self.f_features < 1 or self.rho < 1:
            raise ModelError("f_features and rho must be positive")


@dataclass(frozen=True)
class FcnnConfig:
    depth: int = 3                # H, number of FC layers in the main trunk
    conv_filters: int = 4
    activation: str = "tanh"
    m: int = 1

    def __post_init__(self):
        if self.depth < 3:
            raise ModelError(f"FC trunk depth must be >= 3, got {self.depth}")


@dataclass
class ModelSpec:
    """Serializable layer-by-layer description of a built model."""

    arch: str
    input_width: int
    n_nodes: int
    m: int
    config: dict
    layers: list = field(default_factory=list)   # dicts: name/type/wiring/counts
    trainable_params: int = 0
    non_trainable_params: int = 0

    def add(self, name, kind, wiring, trainable, non_trainable=0, **extra):
        self.layers.append(dict(name=name, type=kind, wiring=wiring,
                                trainable=trainable, non_trainable=non_trainable,
                                **extra))
        self.trainable_params += trainable
        self.non_trainable_params += non_trainable

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def param_count(spec: ModelSpec) -> int:
    """Exact trainable parameter total; must match the per-layer formulas."""
    total = sum(layer["trainable"] for layer in spec.layers)
    if total != spec.trainable_params:
        raise ModelError("spec parameter accounting is inconsistent")
    return total


# ---------------------------------------------------------------------------
# graph-trunk archetype


class _GIBlock:
    """Residual block of two graph layers with batch normalization."""

    def __init__(self, graph, k_in, f, activation, name):
        self.gi1 = GILayer(graph, k_in, f, "identity", f"{name}.gi1")
        self.bn1 = BatchNorm(f, name=f"{name}.bn1")
        self.gi2 = GILayer(graph, f, f, "identity", f"{name}.gi2")
        self.bn2 = BatchNorm(f, name=f"{name}.bn2")
        self.activation = activation

    def sublayers(self):
        return [self.gi1, self.bn1, self.gi2, self.bn2]

    def forward(self, tape, h, skip, training):
        act = ad.ACTIVATIONS[self.activation]
        a = self.bn1.forward(tape, self.gi1.forward(tape, h), training)
        a = act(tape, a)
        b = self.bn2.forward(tape, self.gi2.forward(tape, a), training)
        return act(tape, ad.add(tape, b, skip))


class GinnModel:
    """Residual graph-instructed surrogate with periodic input re-feeding."""

    arch = "ginn"

    def __init__(self, graph: MeshGraph, io: IOSpec, config: GinnConfig):
        if config.m != io.m:
            raise ModelError("config.m must match io.m")
        self.graph = graph
        self.io = io
        self.config = config
        self.depth = ginn_depth(graph.diameter())
        if self.depth < 2:
            raise ModelError(f"graph trunk needs depth >= 2, got {self.depth}")
        f, rho, width = config.f_features, config.rho, io.width

        self.pre = InputPreprocess(io.k, io.q, io.beta_scale, io.phi_box)
        self.lift = GILayer(graph, width, f, config.activation, "gi00")
        self.blocks = []
        self.refeeds = []
        hidden = 1
        last_refeed = 0
        n_blocks = (self.depth - 1) // 2
        for bi in range(n_blocks):
            refeed = hidden - last_refeed >= rho
            if refeed:
                last_refeed = hidden
            k_in = f + width if refeed else f
            self.blocks.append(_GIBlock(graph, k_in, f, config.activation,
                                        f"block{bi:02d}"))
            self.refeeds.append(refeed)
            hidden += 2
        self.extra = None
        if hidden < self.depth:  # one leftover layer keeps the hidden count exact
            self.extra = GILayer(graph, f, f, config.activation,
                                 f"gi{self.depth - 1:02d}")
        self.head = GILayer(graph, f, io.m, "identity", "gi-out")
        self.imposer = DirichletImposer(io.k, io.m, io.target_scale)
        self.spec = self._build_spec()

    def _build_spec(self):
        spec = ModelSpec(self.arch, self.io.width, self.graph.n_nodes, self.io.m,
                         dict(f_features=self.config.f_features, rho=self.config.rho,
                              activation=self.config.activation, depth=self.depth))
        spec.add("preprocess", "preprocess", "input", 0)
        spec.add(self.lift.name, "gi", "hidden-1", self.lift.param_count(),
                 k=self.lift.k_in, f=self.lift.f_out)
        h = 1
        for bi, (block, refeed) in enumerate(zip(self.blocks, self.refeeds)):
            wiring = f"residual-block hidden-{h + 1}..{h + 2}"
            if refeed:
                wiring += " refeed-concat"
            for sub in block.sublayers():
                kind = "gi" if isinstance(sub, GILayer) else "batchnorm"
                nt = sub.non_trainable_count() if isinstance(sub, BatchNorm) else 0
                spec.add(sub.name, kind, wiring, sub.param_count(), nt)
            h += 2
        if self.extra is not None:
            spec.add(self.extra.name, "gi", f"hidden-{h + 1}",
                     self.extra.param_count())
        spec.add(self.head.name, "gi", "output", self.head.param_count(),
                 k=self.head.k_in, f=self.head.f_out)
        spec.add("impose-dirichlet", "postprocess", "output", 0)
        return spec

    def _layers(self):
        out = [self.lift]
        for b in self.blocks:
            out.extend(b.sublayers())
        if self.extra is not None:
            out.append(self.extra)
        out.append(self.head)
        return out

    def parameters(self):
        return [p for layer in self._layers() for p in layer.params()]

    def init_params(self, seed: int):
        for li, layer in enumerate(self._layers()):
            layer.init_params(np.random.default_rng((int(seed), li)))
        return self

    def forward(self, tape: Tape, enc, training=False):
        enc = np.asarray(enc, dtype=np.float64)
        x = self.pre.forward(tape, Tensor(enc))
        xt = ad.transpose01(tape, x)   # (V, B, width)
        h = self.lift.forward(tape, xt)
        for block, refeed in zip(self.blocks, self.refeeds):
            z = ad.concat_features(tape, h, xt) if refeed else h
            h = block.forward(tape, z, h, training)
        if self.extra is not None:
            h = self.extra.forward(tape, h)
        out = self.head.forward(tape, h)
        out = ad.transpose01(tape, out)  # (B, V, m)
        return self.imposer.forward(tape, out, enc)

    def predict(self, enc):
        return self.forward(Tape(), enc, training=False).data

    def state(self):
        d = {}
        for layer in self._layers():
            for p in layer.params():
                d[p.name] = p.data.copy()
            if isinstance(layer, BatchNorm):
                d[f"{layer.name}.running_mean"] = layer.running_mean.copy()
                d[f"{layer.name}.running_var"] = layer.running_var.copy()
        return d

    def load_state(self, state):
        for layer in self._layers():
            for p in layer.params():
                p.data = np.array(state[p.name], dtype=np.float64)
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(state[f"{layer.name}.running_mean"])
                layer.running_var = np.array(state[f"{layer.name}.running_var"])
        return self


# ---------------------------------------------------------------------------
# convolutional/FC archetype


class _FCBlock:
    def __init__(self, n, activation, name):
        self.fc1 = FCLayer(n, n, "identity", f"{name}.fc1")
        self.bn1 = BatchNorm(n, name=f"{name}.bn1")
        self.fc2 = FCLayer(n, n, "identity", f"{name}.fc2")
        self.bn2 = BatchNorm(n, name=f"{name}.bn2")
        self.activation = activation

    def sublayers(self):
        return [self.fc1, self.bn1, self.fc2, self.bn2]

    def forward(self, tape, h, training):
        act = ad.ACTIVATIONS[self.activation]
        a = act(tape, self.bn1.forward(tape, self.fc1.forward(tape, h), training))
        b = self.bn2.forward(tape, self.fc2.forward(tape, a), training)
        return act(tape, ad.add(tape, b, h))


class FcnnModel:
    """Sequence-convolution front end with a fully-connected residual trunk."""

    arch = "fcnn"

    def __init__(self, n_nodes: int, io: IOSpec, config: FcnnConfig):
        if config.m != io.m:
            raise ModelError("config.m must match io.m")
        self.n_nodes = int(n_nodes)
        self.io = io
        self.config = config
        self.depth = config.depth
        v, width, f = self.n_nodes, io.width, config.conv_filters

        self.pre = InputPreprocess(io.k, io.q, io.beta_scale, io.phi_box)
        channels = [width] + [f] * (width - 1) + [1] if width > 1 else [1, 1]
        self.convs = [ConvSeqLayer(v, channels[i], channels[i + 1],
                                   config.activation, f"conv{i:02d}")
                      for i in range(len(channels) - 1)]
        self.blocks = [_FCBlock(v, config.activation, f"block{bi:02d}")
                       for bi in range(self.depth // 2)]
        self.extra = FCLayer(v, v, config.activation,
                             f"fc{self.depth - 1:02d}") if self.depth % 2 else None
        self.bridge = FCLayer(v, v, config.activation, "fc-bridge")  # (H+1)-th
        if io.m == 1:
            self.final = FCLayer(v, v, "identity", "fc-out")
            self.branches = None
        else:
            self.final = None
            self.branches = []
            for j in range(io.m):
                branch = [FCLayer(v, v,
                                  config.activation if li < io.m - 1 else "identity",
                                  f"branch{j}.fc{li}") for li in range(io.m)]
                self.branches.append(branch)
        self.imposer = DirichletImposer(io.k, io.m, io.target_scale)
        self.spec = self._build_spec()

    def _build_spec(self):
        spec = ModelSpec(self.arch, self.io.width, self.n_nodes, self.io.m,
                         dict(depth=self.depth, conv_filters=self.config.conv_filters,
                              activation=self.config.activation))
        spec.add("preprocess", "preprocess", "input", 0)
        for conv in self.convs:
            spec.add(conv.name, "conv-seq", "feature-funnel", conv.param_count(),
                     c_in=conv.c_in, c_out=conv.c_out)
        for bi, block in enumerate(self.blocks):
            for sub in block.sublayers():
                kind = "fc" if isinstance(sub, FCLayer) else "batchnorm"
                nt = sub.non_trainable_count() if isinstance(sub, BatchNorm) else 0
                spec.add(sub.name, kind, f"residual-block-{bi}", sub.param_count(), nt)
        if self.extra is not None:
            spec.add(self.extra.name, "fc", "trunk", self.extra.param_count())
        spec.add(self.bridge.name, "fc", "trunk-bridge", self.bridge.param_count())
        if self.final is not None:
            spec.add(self.final.name, "fc", "output", self.final.param_count())
        else:
            for j, branch in enumerate(self.branches):
                for fc in branch:
                    spec.add(fc.name, "fc", f"branch-{j} residual-to-bridge",
                             fc.param_count())
        spec.add("impose-dirichlet", "postprocess", "output", 0)
        return spec

    def _layers(self):
        out = list(self.convs)
        for b in self.blocks:
            out.extend(b.sublayers())
        if self.extra is not None:
            out.append(self.extra)
        out.append(self.bridge)
        if self.final is not None:
            out.append(self.final)
        else:
            for branch in self.branches:
                out.extend(branch)
        return out

    def parameters(self):
        return [p for layer in self._layers() for p in layer.params()]

    def init_params(self, seed: int):
        for li, layer in enumerate(self._layers()):
            layer.init_params(np.random.default_rng((int(seed), li)))
        return self

    def forward(self, tape: Tape, enc, training=False):
        enc = np.asarray(enc, dtype=np.float64)
        b, v = enc.shape[0], enc.shape[1]
        x = self.pre.forward(tape, Tensor(enc))
        for conv in self.convs:
            x = conv.forward(tape, x)
        h = ad.reshape(tape, x, (b, v))
        for block in self.blocks:
            h = block.forward(tape, h, training)
        if self.extra is not None:
            h = self.extra.forward(tape, h)
        y0 = self.bridge.forward(tape, h)
        if self.final is not None:
            out = ad.reshape(tape, self.final.forward(tape, y0), (b, v, 1))
        else:
            cols = []
            for branch in self.branches:
                y = y0
                for fc in branch:
                    y = fc.forward(tape, y)
                y = ad.add(tape, y, y0)
                cols.append(ad.reshape(tape, y, (b, v, 1)))
            out = cols[0]
            for col in cols[1:]:
                out = ad.concat_features(tape, out, col)
        return self.imposer.forward(tape, out, enc)

    predict = GinnModel.predict
    state = GinnModel.state
    load_state = GinnModel.load_state


# ---------------------------------------------------------------------------
# builders


def build_ginn(graph: MeshGraph, classification: NodeClassification, io: IOSpec,
               config: GinnConfig) -> GinnModel:
    if classification.tags.size != graph.n_nodes:
        raise ModelError("classification does not match the graph")
    return GinnModel(graph, io, config)


def fcnn_budget_depth(n_nodes: int, io: IOSpec, conv_filters: int,
                      target_count: int, max_depth: int = 64) -> int:
    """Smallest trunk depth H >= 3 whose parameter count reaches the target."""
    for depth in range(3, max_depth + 1):
        model_count = _fcnn_count(n_nodes, io, conv_filters, depth)
        if model_count >= target_count:
            return depth
    return max_depth


def _fcnn_count(v, io, f, depth):
    width = io.width
    channels = [width] + [f] * (width - 1) + [1] if width > 1 else [1, 1]
    conv = sum(v * channels[i] * channels[i + 1] + channels[i + 1]
               for i in range(len(channels) - 1))
    fc_unit = v * v + v
    n_fc = depth + 1 + (1 if io.m == 1 else io.m * io.m)
    bn = (depth // 2) * 2 * 2 * v
    return conv + n_fc * fc_unit + bn


def build_fcnn(n_nodes: int, io: IOSpec, config: FcnnConfig = None,
               budget: int = None, conv_filters: int = 4,
               activation: str = "tanh") -> FcnnModel:
    """Build the convolutional/FC archetype; with ``budget`` given, the trunk
    depth is auto-selected by the parameter budget rule."""
    if config is None:
        depth = 3 if budget is None else fcnn_budget_depth(n_nodes, io,
                                                           conv_filters, budget)
        config = FcnnConfig(depth=depth, conv_filters=conv_filters,
                            activation=activation, m=io.m)
    return FcnnModel(n_nodes, io, config)


# ---------------------------------------------------------------------------
# loss


def mse_bc_loss(tape: Tape, predictions: Tensor, targets,
                classification: NodeClassification) -> Tensor:
    """Node-weighted MSE over a batch (see module docstring for the weights)."""
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.data.shape != targets.shape:
        raise ModelError(f"prediction shape {predictions.data.shape} != "
                         f"target shape {targets.shape}")
    if targets.ndim != 3 or targets.shape[0] == 0:
        raise ModelError("loss expects a non-empty (batch, nodes, fields) array")
    lam = classification.loss_weights()
    if lam.size != targets.shape[1]:
        raise ModelError("classification does not match the node count")
    diff = ad.add_const(tape, predictions, -targets)
    sq = ad.mul(tape, diff, diff)
    per_node = ad.reduce_sum(tape, sq, axis=2)        # sum the m fields
    weighted = ad.mul_const(tape, per_node, lam)
    per_sample = ad.scale(tape, ad.reduce_sum(tape, weighted, axis=1),
                          1.0 / targets.shape[1])
    return ad.reduce_mean(tape, per_sample, axis=0)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MUBP"
CKPT_VERSION = 1


def write_checkpoint(state: dict, path):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(state)))
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict:
    state = {}
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ModelError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape)
            state[name] = data.copy()
    return state

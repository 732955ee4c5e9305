"""Network layers: graph-instructed, full-length sequence convolution, fully
connected, batch normalization, and the embedded pre/post-processing.

Layout conventions: the graph-instructed trunk runs node-major, shape
(nodes, batch, features), which keeps the per-node feature mix a single
batched matmul; convolution and FC paths run batch-major.

A graph-instructed layer with node weights ``w[v, k, f]`` and the weighted
adjacency-plus-identity matrix ``S`` computes, per output feature f,

    out[:, f] = sigma( S^T (sum_k w[:, k, f] * x[:, k]) + b[:, f] )

which is the constrained fully-connected layer whose effective weight matrix
for the (k, f) pair is diag(w[:, k, f]) S.  ``S`` is symmetric (edge weights
are symmetric and self-loops weigh exactly 1), so no explicit transpose is
needed.  Trainable parameter counts: V*K*F + V*F per GI layer,
n_out*n_in + n_out per FC layer, V*C_in*C_out + C_out per convolution.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


def _uniform_init(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class GILayer:
    """Graph-instructed layer mapping K to F features per node."""

    def __init__(self, graph, k_in, f_out, activation="tanh", name="gi"):
        self.smat = graph.adjacency_with_self_loops()
        self.n_nodes = graph.n_nodes
        self.k_in = int(k_in)
        self.f_out = int(f_out)
        self.activation = activation
        self.name = name
        v = self.n_nodes
        self.weight = Tensor(np.zeros((v, self.k_in, self.f_out)), trainable=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros((v, 1, self.f_out)), trainable=True,
                           name=f"{name}.bias")

    def init_params(self, rng):
        avg_fanin = self.smat.nnz / self.n_nodes  # mean degree + self-loop
        self.weight.data = _uniform_init(rng, self.weight.data.shape,
                                         self.k_in * avg_fanin, self.f_out * avg_fanin)
        self.bias.data = np.zeros_like(self.bias.data)

    def params(self):
        return [self.weight, self.bias]

    def param_count(self):
        v = self.n_nodes
        return v * self.k_in * self.f_out + v * self.f_out

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        # x: (V, B, K) -> (V, B, F)
        if x.data.ndim != 3 or x.data.shape[0] != self.n_nodes or x.data.shape[2] != self.k_in:
            raise ad.ShapeError(f"{self.name}: expected (V={self.n_nodes}, B, K={self.k_in}), "
                                f"got {x.data.shape}")
        z = ad.matmul(tape, x, self.weight)
        # the adjacency-plus-identity matrix is symmetric, so it serves as
        # its own transpose in the backward pass
        y = ad.sparse_matmul(tape, self.smat, z, smat_t=self.smat)
        y = ad.add_bias(tape, y, self.bias)
        return ad.ACTIVATIONS[self.activation](tape, y)

    def forward_single(self, x):
        """Convenience for a single (V, K) sample; returns (V, F)."""
        x = np.asarray(x, dtype=np.float64)
        out = self.forward(Tape(), Tensor(x[:, None, :]))
        return out.data[:, 0, :]

    def dense_weight(self, k, f):
        """Explicit masked-FC weight matrix diag(w[:, k, f]) S (dense)."""
        return np.diag(self.weight.data[:, k, f]) @ self.smat.toarray()


class ConvSeqLayer:
    """1-D convolution along the node axis with kernel length = sequence length."""

    def __init__(self, n_nodes, c_in, c_out, activation="tanh", name="conv"):
        self.n_nodes = int(n_nodes)
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.activation = activation
        self.name = name
        self.kernel = Tensor(np.zeros((self.n_nodes, self.c_in, self.c_out)),
                             trainable=True, name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(self.c_out), trainable=True, name=f"{name}.bias")

    def init_params(self, rng):
        self.kernel.data = _uniform_init(rng, self.kernel.data.shape,
                                         self.n_nodes * self.c_in,
                                         self.n_nodes * self.c_out)
        self.bias.data = np.zeros_like(self.bias.data)

    def params(self):
        return [self.kernel, self.bias]

    def param_count(self):
        return self.n_nodes * self.c_in * self.c_out + self.c_out

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        # x: (B, V, C_in) -> (B, V, C_out)
        y = ad.conv1d_full(tape, x, self.kernel)
        y = ad.add_bias(tape, y, self.bias)
        return ad.ACTIVATIONS[self.activation](tape, y)

    def forward_single(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = self.forward(Tape(), Tensor(x[None, :, :]))
        return out.data[0]


class FCLayer:
    """Dense affine layer; weight stored (n_in, n_out) for x @ W."""

    def __init__(self, n_in, n_out, activation="tanh", name="fc"):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.activation = activation
        self.name = name
        self.weight = Tensor(np.zeros((self.n_in, self.n_out)), trainable=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(self.n_out), trainable=True, name=f"{name}.bias")

    def init_params(self, rng):
        self.weight.data = _uniform_init(rng, self.weight.data.shape,
                                         self.n_in, self.n_out)
        self.bias.data = np.zeros_like(self.bias.data)

    def params(self):
        return [self.weight, self.bias]

    def param_count(self):
        return self.n_out * self.n_in + self.n_out

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        y = ad.matmul(tape, x, self.weight)
        y = ad.add_bias(tape, y, self.bias)
        return ad.ACTIVATIONS[self.activation](tape, y)

    def forward_single(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = self.forward(Tape(), Tensor(x[None, :]))
        return out.data[0]


class BatchNorm:
    """Per-feature normalization over all leading axes.

    Training mode normalizes with batch statistics and updates the running
    mean/variance by ``running = momentum * running + (1 - momentum) * batch``;
    inference mode applies the running statistics.
    """

    def __init__(self, num_features, momentum=0.9, eps=1e-5, name="bn"):
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.num_features = int(num_features)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.name = name
        self.gamma = Tensor(np.ones(self.num_features), trainable=True,
                            name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(self.num_features), trainable=True,
                           name=f"{name}.beta")
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def init_params(self, rng):
        self.gamma.data = np.ones(self.num_features)
        self.beta.data = np.zeros(self.num_features)
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def params(self):
        return [self.gamma, self.beta]

    def param_count(self):
        return 2 * self.num_features

    def non_trainable_count(self):
        return 2 * self.num_features

    def forward(self, tape: Tape, x: Tensor, training: bool) -> Tensor:
        if x.data.shape[-1] != self.num_features:
            raise ad.ShapeError(f"{self.name}: expected trailing axis "
                                f"{self.num_features}, got {x.data.shape}")
        if training:
            xhat, mean, var = ad.batchnorm_norm(tape, x, self.eps)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            istd = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = ad.add_const(tape, ad.mul_const(tape, x, istd),
                                -self.running_mean * istd)
        return ad.channel_affine(tape, xhat, self.gamma, self.beta)


class InputPreprocess:
    """Embedded, non-trainable input rescaling.

    Maps the 0/1 BC-type pair to -1/+1, divides BC values by ``beta_scale``,
    and sends the physical-parameter columns affinely onto [-1, 1] using the
    sampling box recorded in the dataset metadata (identity when there are no
    physical parameters).
    """

    def __init__(self, k, q, beta_scale=1.0, phi_box=None, name="preprocess"):
        self.k = int(k)
        self.q = int(q)
        self.name = name
        width = self.k + 2 + self.q
        a = np.ones(width)
        c = np.zeros(width)
        a[:k] = 1.0 / float(beta_scale)
        a[k] = a[k + 1] = 2.0
        c[k] = c[k + 1] = -1.0
        if phi_box is not None:
            if len(phi_box) != self.q:
                raise ValueError(f"phi_box must list {self.q} ranges")
            for col, (lo, hi) in enumerate(phi_box):
                a[k + 2 + col] = 2.0 / (hi - lo)
                c[k + 2 + col] = -(hi + lo) / (hi - lo)
        self.scale = a
        self.shift = c

    def params(self):
        return []

    def param_count(self):
        return 0

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.scale.size:
            raise ad.ShapeError(f"{self.name}: expected width {self.scale.size}, "
                                f"got {x.data.shape}")
        return ad.add_const(tape, ad.mul_const(tape, x, self.scale), self.shift)

    def apply(self, enc):
        """Plain-array version (no tape)."""
        return np.asarray(enc) * self.scale + self.shift


class DirichletImposer:
    """Embedded postprocessing: rescale raw outputs back to target units and
    overwrite Dirichlet rows with the boundary values read from the raw
    (unpreprocessed) input.

    With target_scale = 1 the operation is a pure masked replacement and is
    idempotent.  The first min(k, m) output fields are imposed; this artifact
    uses k = m = 1.
    """

    def __init__(self, k, m, target_scale=1.0, name="impose"):
        if k > m:
            raise ValueError(f"cannot impose {k} BC values on {m} output fields")
        self.k = int(k)
        self.m = int(m)
        self.target_scale = float(target_scale)
        self.name = name

    def params(self):
        return []

    def param_count(self):
        return 0

    def forward(self, tape: Tape, raw: Tensor, enc: np.ndarray) -> Tensor:
        # raw: (B, V, m); enc: (B, V, k+2+q) raw input rows (beta, d, n, phi)
        enc = np.asarray(enc, dtype=np.float64)
        if raw.data.shape[:2] != enc.shape[:2] or raw.data.shape[2] != self.m:
            raise ad.ShapeError(f"{self.name}: output {raw.data.shape} does not match "
                                f"input {enc.shape}")
        d = enc[..., self.k:self.k + 1]
        mult = np.full(raw.data.shape, self.target_scale)
        mult[..., :self.k] *= (1.0 - d)
        add = np.zeros(raw.data.shape)
        add[..., :self.k] = enc[..., :self.k] * d
        return ad.add_const(tape, ad.mul_const(tape, raw, mult), add)

    def apply(self, raw, enc):
        enc = np.asarray(enc, dtype=np.float64)
        raw = np.asarray(raw, dtype=np.float64)
        d = enc[..., self.k:self.k + 1]
        out = raw * self.target_scale
        out[..., :self.k] = out[..., :self.k] * (1.0 - d) + enc[..., :self.k] * d
        return out

"""Parameter sampling, input encoding, and dataset assembly.

Boundary draws follow the experiment protocols:

  * diffusion: 1 to 5 interval centers picked uniformly among the circle's
    boundary nodes, each with an integer length drawn from {1, .., [M/5]}
    measured in nodes; a node is flagged when it lies within length/2
    positions (circularly) of some center.  Flagged nodes carry a Neumann
    value mu1 drawn uniformly in (0, 1].
  * advdiff: one center per parametrized segment (left, right, bottom), with
    continuous lengths l1, l2 ~ U(0.4, 0.6) and l3 ~ U(2/3, 1) converted to
    node counts by rounding against the segment's node density; intervals are
    clipped at segment ends.  Flag 1 means Neumann, flag 0 Dirichlet.

Randomness is split into named child streams so every sample is independent
of the others: sample ``i`` of a dataset seeded with ``s`` always uses
``numpy.random.default_rng((s, 0, i))`` and split shuffles for training size
``T`` use ``default_rng((s, 1, T))``.

Dataset container (little-endian binary): magic ``MUBC``, version u32, mesh
SHA-256 digest (32 bytes), u32 dims (N_h, width, m, n_samples, n_train,
n_val, n_test), row-major float64 input block (n_samples x N_h x width),
float64 target block (n_samples x N_h x m), then the three split index
arrays as u32.  A JSON sidecar (same path + ``.json``) records generation
metadata: seed, sizes, experiment, parameter ranges, scaling constants, and
dropped-solve counts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .fem import FemError, solve_advection_diffusion, solve_diffusion
from .mesh import (BC_SWITCH, ONLY_DIRICHLET, ONLY_NEUMANN, Mesh2D,
                   NodeClassification, mesh_hash)

MAGIC = b"MUBC"
VERSION = 1

MU1_RANGE_ADVDIFF = (1e-3, 100.0)
MU2_RANGE_ADVDIFF = (-0.75 * np.pi, -0.25 * np.pi)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParamSample:
    """One draw of (physical params, boundary layout, boundary values)."""

    mu_phi: np.ndarray  # (p_phi,)
    mu_b: np.ndarray    # (p_b,) 0/1 over the canonical boundary order
    mu_v: float         # Neumann value for flagged nodes (0 when unused)

    def __post_init__(self):
        if not np.all(np.isin(self.mu_b, (0, 1))):
            raise DatasetError("mu_b entries must be 0 or 1")
        self.mu_phi.flags.writeable = False
        self.mu_b.flags.writeable = False


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Child stream for sample ``index`` of a dataset seeded with ``seed``."""
    return np.random.default_rng((int(seed), 0, int(index)))


def split_rng(seed: int, T: int) -> np.random.Generator:
    return np.random.default_rng((int(seed), 1, int(T)))


# ---------------------------------------------------------------------------
# boundary layout samplers


def circle_interval_flags(M: int, centers, lengths) -> np.ndarray:
    """Union of circular node intervals: flag j iff |j - c| <= l/2 (mod M)."""
    flags = np.zeros(M, dtype=np.int64)
    for c, l in zip(centers, lengths):
        half = int(np.floor(l / 2.0))
        for off in range(-half, half + 1):
            flags[(c + off) % M] = 1
    return flags


def sample_mub_exp1(classification: NodeClassification, rng: np.random.Generator):
    """Boundary draw for the diffusion experiment: (mu_b, mu1)."""
    M = classification.p_b
    if M < 5:
        raise DatasetError(f"need at least 5 parametrized boundary nodes, got {M}")
    n_c = int(rng.integers(1, 6))
    centers = rng.integers(0, M, size=n_c)
    lengths = rng.integers(1, max(1, M // 5) + 1, size=n_c)
    mu1 = 1.0 - float(rng.uniform(0.0, 1.0))  # uniform on (0, 1]
    return circle_interval_flags(M, centers, lengths), mu1


def segment_interval_flags(sizes, centers, node_counts) -> list:
    """Clipped index intervals on consecutive segments; returns flag arrays."""
    out = []
    for n, c, cnt in zip(sizes, centers, node_counts):
        idx = np.arange(n)
        lo = max(0.0, c - cnt / 2.0)
        hi = min(float(n - 1), c + cnt / 2.0)
        out.append(((idx >= lo) & (idx <= hi)).astype(np.int64))
    return out


def mub_segments(mesh: Mesh2D, classification: NodeClassification):
    """Node lists of the three parametrized segments (left, bottom, right).

    Corner nodes shared by the bottom and a side appear in both lists, and
    each list is ordered along its segment's geometry.
    """
    tol = 1e-9
    flagged = classification.mub_order
    pts = mesh.nodes[flagged]
    left = flagged[pts[:, 0] < tol]
    right = flagged[pts[:, 0] > 1 - tol]
    bottom = flagged[pts[:, 1] < tol]
    left = left[np.argsort(mesh.nodes[left, 1])]
    right = right[np.argsort(mesh.nodes[right, 1])]
    bottom = bottom[np.argsort(mesh.nodes[bottom, 0])]
    return left, bottom, right


def sample_mub_exp2(mesh: Mesh2D, classification: NodeClassification,
                    rng: np.random.Generator) -> np.ndarray:
    """Boundary draw for the advection-diffusion experiment."""
    left, bottom, right = mub_segments(mesh, classification)
    segs = (left, right, bottom)  # draw order: c1 (left), c2 (right), c3 (bottom)
    lengths_geom = (float(rng.uniform(0.4, 0.6)), float(rng.uniform(0.4, 0.6)),
                    float(rng.uniform(2.0 / 3.0, 1.0)))
    centers = [int(rng.integers(0, len(s))) for s in segs]
    counts = []
    for seg, l in zip(segs, lengths_geom):
        coords = mesh.nodes[seg]
        span = float(np.ptp(coords[:, 0]) + np.ptp(coords[:, 1]))
        density = (len(seg) - 1) / span
        counts.append(round(l * density))
    flags_by_seg = segment_interval_flags([len(s) for s in segs], centers, counts)

    node_flag = np.zeros(mesh.n_nodes, dtype=np.int64)
    for seg, fl in zip(segs, flags_by_seg):
        node_flag[seg[fl == 1]] = 1
    return node_flag[classification.mub_order]


def sample_phys(experiment: str, rng: np.random.Generator,
                mu1_range=MU1_RANGE_ADVDIFF) -> np.ndarray:
    """Physical parameter draw; empty for the diffusion experiment."""
    if experiment == "diffusion":
        return np.empty(0)
    if experiment == "advdiff":
        mu1 = float(rng.uniform(*mu1_range))
        mu2 = float(rng.uniform(*MU2_RANGE_ADVDIFF))
        return np.array([mu1, mu2])
    raise DatasetError(f"unknown experiment {experiment!r}")


def draw_sample(mesh, classification, experiment, rng,
                mu1_range=MU1_RANGE_ADVDIFF) -> ParamSample:
    if experiment == "diffusion":
        mu_b, mu1 = sample_mub_exp1(classification, rng)
        return ParamSample(np.empty(0), mu_b, mu1)
    mu_phi = sample_phys(experiment, rng, mu1_range)
    mu_b = sample_mub_exp2(mesh, classification, rng)
    return ParamSample(mu_phi, mu_b, 0.0)


# ---------------------------------------------------------------------------
# input encoding


def encoding_width(classification: NodeClassification) -> int:
    q = 1 if classification.experiment == "diffusion" else 2
    return 1 + 2 + q  # (beta, d, n, phi...)


def encode_input(sample: ParamSample, classification: NodeClassification) -> np.ndarray:
    """Per-node rows (beta, d, n, phi) describing one parameter draw.

    Interior nodes read (0, 0, 0, phi); boundary nodes carry their BC type in
    the d/n pair and the BC value in beta.  Physical parameters are repeated
    on every row; with none, phi is the constant 1.
    """
    if sample.mu_b.shape != (classification.p_b,):
        raise DatasetError(f"mu_b length {sample.mu_b.shape} != p_b {classification.p_b}")
    n = classification.tags.size
    width = encoding_width(classification)
    enc = np.zeros((n, width))

    flags = np.zeros(n, dtype=bool)
    flags[classification.mub_order] = sample.mu_b.astype(bool)
    tags = classification.tags

    dirichlet = tags == ONLY_DIRICHLET
    neumann = tags == ONLY_NEUMANN
    switch = tags == BC_SWITCH
    enc[dirichlet | (switch & ~flags), 1] = 1.0  # d
    enc[neumann | (switch & flags), 2] = 1.0     # n
    if classification.experiment == "diffusion":
        enc[classification.mub_order, 0] = np.where(sample.mu_b == 1, sample.mu_v, 0.0)
        enc[:, 3] = 1.0
        if sample.mu_phi.size:
            raise DatasetError("diffusion experiment carries no physical parameters")
    else:
        if sample.mu_phi.shape != (2,):
            raise DatasetError(f"expected 2 physical parameters, got {sample.mu_phi.shape}")
        enc[:, 3] = sample.mu_phi[0]
        enc[:, 4] = sample.mu_phi[1]
    return enc


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    experiment: str
    mesh_digest: bytes            # 32-byte SHA-256 of the mesh
    inputs: np.ndarray            # (n, N_h, width)
    targets: np.ndarray           # (n, N_h, m)
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.inputs.shape[0]

    @property
    def n_nodes(self):
        return self.inputs.shape[1]

    def split_arrays(self, which):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[which]
        return self.inputs[idx], self.targets[idx]


def resplit(n_samples: int, test_idx: np.ndarray, T: int, seed: int):
    """Deterministic (train, val) split of size (T, T/2) from the non-test pool.

    Depends on the dataset seed and T only, so different training runs share
    identical splits.
    """
    if T % 2:
        raise DatasetError(f"training size must be even, got {T}")
    pool = np.setdiff1d(np.arange(n_samples), test_idx)
    if T + T // 2 > pool.size:
        raise DatasetError(f"cannot split T={T} (+T/2 validation) from pool of {pool.size}")
    perm = split_rng(seed, T).permutation(pool)
    return perm[:T], perm[T:T + T // 2]


def build_dataset(mesh: Mesh2D, classification: NodeClassification, n_total: int,
                  test_size: int, T: int, seed: int,
                  mu1_range=MU1_RANGE_ADVDIFF, log=None) -> Dataset:
    """Run ``n_total`` solver calls and assemble a reproducible dataset.

    Solves that fail are dropped (and counted in the metadata); the fixed
    test split is drawn first, then train/validation of size (T, T/2).
    """
    if test_size + 1.5 * T > n_total:
        raise DatasetError(f"need test_size + 1.5 T <= n_total, got {test_size} + "
                           f"1.5*{T} > {n_total}")
    experiment = classification.experiment
    width = encoding_width(classification)
    inputs, targets, dropped = [], [], 0
    for i in range(n_total):
        rng = sample_rng(seed, i)
        sample = draw_sample(mesh, classification, experiment, rng, mu1_range)
        try:
            if experiment == "diffusion":
                sol = solve_diffusion(mesh, classification, sample.mu_b, sample.mu_v)
            else:
                sol = solve_advection_diffusion(mesh, classification, sample.mu_b,
                                                sample.mu_phi[0], sample.mu_phi[1])
        except FemError as exc:
            dropped += 1
            if log is not None:
                log(f"sample {i} dropped: {exc}")
            continue
        inputs.append(encode_input(sample, classification))
        targets.append(sol.values[:, None])
    n_ok = len(inputs)
    if test_size + 1.5 * T > n_ok:
        raise DatasetError(f"only {n_ok} solves succeeded, not enough for the splits")

    test_idx = np.sort(split_rng(seed, 0).permutation(n_ok)[:test_size])
    train_idx, val_idx = resplit(n_ok, test_idx, T, seed)

    metadata = {
        "experiment": experiment,
        "seed": int(seed),
        "n_requested": int(n_total),
        "n_dropped": int(dropped),
        "test_size": int(test_size),
        "T": int(T),
        "beta_scale": 1.0,
        "target_scale": 1.0,
    }
    if experiment == "advdiff":
        metadata["phi_box"] = [[float(mu1_range[0]), float(mu1_range[1])],
                               [float(MU2_RANGE_ADVDIFF[0]), float(MU2_RANGE_ADVDIFF[1])]]
    return Dataset(experiment, mesh_hash(mesh),
                   np.stack(inputs).astype(np.float64),
                   np.stack(targets).astype(np.float64),
                   train_idx, val_idx, test_idx, int(seed), metadata)


# ---------------------------------------------------------------------------
# binary container


def write_dataset(ds: Dataset, path):
    n, nh, width = ds.inputs.shape
    m = ds.targets.shape[2]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        assert len(ds.mesh_digest) == 32
        f.write(ds.mesh_digest)
        f.write(struct.pack("<7I", nh, width, m, n, len(ds.train_idx),
                            len(ds.val_idx), len(ds.test_idx)))
        f.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.targets, dtype="<f8").tobytes())
        for idx in (ds.train_idx, ds.val_idx, ds.test_idx):
            f.write(np.ascontiguousarray(idx, dtype="<u4").tobytes())
    sidecar = dict(ds.metadata)
    sidecar["mesh_hash"] = ds.mesh_digest.hex()
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DatasetError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise DatasetError(f"{path}: unsupported version {version}")
        digest = f.read(32)
        nh, width, m, n, ntr, nva, nte = struct.unpack("<7I", f.read(28))
        inputs = np.frombuffer(f.read(8 * n * nh * width), dtype="<f8").reshape(n, nh, width)
        targets = np.frombuffer(f.read(8 * n * nh * m), dtype="<f8").reshape(n, nh, m)
        train = np.frombuffer(f.read(4 * ntr), dtype="<u4").astype(np.int64)
        val = np.frombuffer(f.read(4 * nva), dtype="<u4").astype(np.int64)
        test = np.frombuffer(f.read(4 * nte), dtype="<u4").astype(np.int64)
    try:
        with open(str(path) + ".json") as f:
            metadata = json.load(f)
    except FileNotFoundError:
        metadata = {}
    experiment = metadata.get("experiment", "diffusion")
    seed = metadata.get("seed", 0)
    return Dataset(experiment, digest, inputs.copy(), targets.copy(),
                   train, val, test, seed, metadata)

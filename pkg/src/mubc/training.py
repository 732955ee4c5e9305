"""Mini-batch Adam training with early stopping and plateau LR reduction.

Scheduling conventions (exercised by the counter tests): the first validation
value always becomes the best; "improvement" means a strictly smaller
validation loss (min-delta 0).  Counters increase on every epoch without
improvement, the learning rate is halved when the plateau counter reaches its
patience (and that counter then resets), and training stops when the
early-stop counter reaches its patience.  With a constant validation loss
this stops after exactly patience + 1 epochs, with LR reduction events firing
at epochs 101 and 201 for the default patiences.  History records the
learning rate in effect during each epoch's updates, so a reduction at epoch
e shows up in the rates from epoch e + 1 on.

All randomness (weight init, shuffling) derives from integer seeds through
named generator streams, so a rerun with the same seed is bit-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, backward
from .models import mse_bc_loss
from .sampling import Dataset, resplit


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 2000
    early_stop_patience: int = 250
    plateau_patience: int = 100
    plateau_factor: float = 0.5
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise TrainingError("patiences must be >= 1")
        if not (0.0 < self.plateau_factor < 1.0):
            raise TrainingError("plateau factor must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")


class AdamState:
    """First/second moment accumulators and the shared step counter."""

    def __init__(self, params):
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, epsilon=1e-7):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    if lr <= 0:
        raise TrainingError(f"learning rate must be positive, got {lr}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter "
                                f"shape {p.data.shape} for {p.name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {p.name}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + epsilon)
    return state


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = np.inf
    lr_reductions: list = field(default_factory=list)
    stopped_early: bool = False
    aborted: bool = False

    @property
    def n_epochs(self):
        return len(self.val_loss)

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("epoch,train_loss,val_loss,lr,seconds\n")
            for e in range(self.n_epochs):
                f.write(f"{e + 1},{self.train_loss[e]!r},{self.val_loss[e]!r},"
                        f"{self.lr[e]!r},{self.seconds[e]:.6f}\n")


def evaluate_loss(model, inputs, targets, classification, chunk=256):
    """MSE_BC of the model in inference mode over a whole array of samples."""
    total, n = 0.0, inputs.shape[0]
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        tape = Tape()
        pred = model.forward(tape, inputs[lo:hi], training=False)
        loss = mse_bc_loss(tape, pred, targets[lo:hi], classification)
        total += float(loss.data) * (hi - lo)
    return total / n


def train(model, dataset: Dataset, classification, config: TrainConfig,
          train_idx=None, val_idx=None):
    """Train on the dataset's (or the given) splits; returns (state, History).

    The returned state is the snapshot with the best validation loss, and the
    model is left loaded with it.
    """
    train_idx = dataset.train_idx if train_idx is None else train_idx
    val_idx = dataset.val_idx if val_idx is None else val_idx
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise TrainingError("train and validation splits must be non-empty")
    x_train, y_train = dataset.inputs[train_idx], dataset.targets[train_idx]
    x_val, y_val = dataset.inputs[val_idx], dataset.targets[val_idx]

    params = model.parameters()
    state = AdamState(params)
    lr = config.learning_rate
    history = History()
    best_state = model.state()
    early_counter = plateau_counter = 0
    n_train = x_train.shape[0]

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        shuffle = np.random.default_rng((config.seed, 3, epoch)).permutation(n_train)
        epoch_loss = 0.0
        aborted = False
        for lo in range(0, n_train, config.batch_size):
            sel = shuffle[lo:lo + config.batch_size]
            tape = Tape()
            pred = model.forward(tape, x_train[sel], training=True)
            loss = mse_bc_loss(tape, pred, y_train[sel], classification)
            if not np.isfinite(loss.data):
                aborted = True
                break
            backward(tape, loss)
            grads = [p.grad for p in params]
            try:
                adam_step(params, grads, state, lr,
                          config.beta1, config.beta2, config.epsilon)
            except TrainingError:
                aborted = True
                break
            for p in params:
                p.zero_grad()
            epoch_loss += float(loss.data) * len(sel)
        if aborted:
            history.aborted = True
            break

        val = evaluate_loss(model, x_val, y_val, classification)
        history.train_loss.append(epoch_loss / n_train)
        history.val_loss.append(val)
        history.lr.append(lr)
        history.seconds.append(time.perf_counter() - t0)

        if val < history.best_val:
            history.best_val = val
            history.best_epoch = epoch
            best_state = model.state()
            early_counter = 0
            plateau_counter = 0
        else:
            early_counter += 1
            plateau_counter += 1
            if plateau_counter >= config.plateau_patience:
                lr *= config.plateau_factor
                history.lr_reductions.append(epoch)
                plateau_counter = 0
            if early_counter >= config.early_stop_patience:
                history.stopped_early = True
                break

    model.load_state(best_state)
    return best_state, history


def multi_seed_protocol(model_builder, dataset: Dataset, classification,
                        seeds, sizes, config: TrainConfig):
    """Train one model per (seed, T) cell; splits depend on T only.

    ``model_builder`` is a zero-argument callable producing a fresh model.
    Failing cells are recorded and do not stop the others.
    """
    if not seeds:
        raise TrainingError("at least one seed required")
    cells = []
    for T in sizes:
        tr_idx, va_idx = resplit(dataset.n_samples, dataset.test_idx, T, dataset.seed)
        for seed in seeds:
            cell = {"seed": int(seed), "T": int(T)}
            try:
                model = model_builder().init_params(seed)
                cfg = replace(config, seed=int(seed))
                state, history = train(model, dataset, classification, cfg,
                                       train_idx=tr_idx, val_idx=va_idx)
                cell.update(state=state, history=history, model=model)
            except Exception as exc:  # keep the run matrix going
                cell["error"] = repr(exc)
            cells.append(cell)
    return cells

"""Outer training loop: seeded batch sampling, two-view augmentation,
per-anchor SVM solves, backprop, Adam updates, and C / sigma^2 schedules.

State checkpoint format: a header followed by the encoder checkpoint and
the Adam moment buffers (same per-layer layout as the encoder weights):

    magic  b"MMTR1"
    int64  completed epochs, int64 seed
    float64 lr, beta1, beta2, epsilon; int64 adam step
    int64  number of history rows; rows of 6 little-endian float64
           (epoch, C, sigma_sq, mean_loss, knn_acc, linear_acc; NaN when
           a metric was not recorded)
    encoder checkpoint (see mmcl.encoder)
    Adam first-moment buffers, then second-moment buffers
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from .data import AugmentationSpec, Dataset, augment_batch, stream_rng
from .kernels import KernelSpec
from .loss import batch_loss, nce_batch_loss
from .svm import SolverConfig, build_instance

STATE_MAGIC = b"MMTR1"
LOSS_KINDS = ("mmcl_pgd", "mmcl_inv", "nce")
SCHEDULABLE_FIELDS = ("C", "sigma_sq")
METRICS_HEADER = "epoch,C,sigma_sq,loss,knn_acc,linear_acc"


class TrainingAbort(RuntimeError):
    """Raised when a batch produces a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    loss: str = "mmcl_pgd"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    C: float = 100.0
    beta: float = 0.1
    solver: SolverConfig = field(default_factory=SolverConfig)
    fn_correction: bool = False
    schedules: list = field(default_factory=list)  # (epoch, field, value)
    seed: int = 0
    eval_every: int = 0
    # realization knobs beyond the core recipe
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    temperature: float = 0.5
    average_loss: bool = False
    backbone_widths: tuple = (64, 64)
    head_hidden: int = 64
    out_dim: int = 32
    eval_features: str = "backbone"  # backbone | head
    eval_k: int = 200
    probe_epochs: int = 500
    probe_lr: float = 0.1
    test_fraction: float = 0.2
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.eval_features not in ("backbone", "head"):
            raise ValueError(f"eval_features must be 'backbone' or 'head', got {self.eval_features!r}")
        last = -1
        for entry in self.schedules:
            epoch, fieldname, _ = entry
            if fieldname not in SCHEDULABLE_FIELDS:
                raise ValueError(f"cannot schedule field {fieldname!r}; allowed: {SCHEDULABLE_FIELDS}")
            if epoch <= last:
                raise ValueError(f"schedule epochs must be strictly increasing, got {self.schedules}")
            last = epoch


@dataclass
class TrainState:
    params: enc.EncoderParams
    adam: enc.AdamState
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)


def init_state(config: TrainConfig, in_dim: int) -> TrainState:
    params = enc.init_params(in_dim, config.backbone_widths, config.head_hidden,
                             config.out_dim, seed=config.seed)
    adam = enc.init_adam(params, lr=config.lr)
    return TrainState(params=params, adam=adam, epoch=0, seed=config.seed)


def apply_schedules(config: TrainConfig, epoch: int):
    """The (C, KernelSpec) in effect at ``epoch``; a schedule entry
    (e, field, value) takes effect exactly at epoch e."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    C = config.C
    spec = config.kernel
    for e, fieldname, value in config.schedules:
        if e > epoch:
            break
        if fieldname == "C":
            C = float(value)
        else:
            spec = replace(spec, sigma_sq=float(value))
    return C, spec


def _batch_seed(seed: int, epoch: int, batch_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch_index]).generate_state(1)[0])


def run_epoch(state: TrainState, config: TrainConfig, dataset: Dataset):
    """Train one epoch in place of ``state``; returns (state, mean batch loss).

    Shuffling, the two augmentation streams, and the solver initial points
    are all derived from (config.seed, epoch index), so a given epoch is
    reproducible in isolation.
    """
    N = config.batch_size
    if len(dataset) < N:
        raise ValueError(f"dataset has {len(dataset)} samples, need at least {N}")
    epoch = state.epoch
    C, spec = apply_schedules(config, epoch)
    order = stream_rng(config.seed, "shuffle", epoch).permutation(len(dataset))
    n_batches = len(dataset) // N
    method = {"mmcl_pgd": "pgd", "mmcl_inv": "inv"}.get(config.loss)
    losses = []
    for b in range(n_batches):
        rows = dataset.samples[order[b * N:(b + 1) * N]]
        view1 = augment_batch(config.augmentation, rows, stream_rng(config.seed, "aug", epoch, b, 0)).T
        view2 = augment_batch(config.augmentation, rows, stream_rng(config.seed, "aug", epoch, b, 1)).T
        emb1, tape1 = enc.forward(state.params, view1)
        emb2, tape2 = enc.forward(state.params, view2)
        if config.loss == "nce":
            total, g1, g2 = nce_batch_loss(emb1, emb2, config.temperature)
            alphas = None
        else:
            solver = replace(config.solver, seed=_batch_seed(config.seed, epoch, b))
            total, g1, g2, alphas = batch_loss(
                emb1, emb2, spec, C, config.beta, solver,
                fn_correction=config.fn_correction, method=method, threads=config.threads)
        if config.average_loss:
            total /= N
            g1 = g1 / N
            g2 = g2 / N
        if not math.isfinite(total):
            raise TrainingAbort(
                f"non-finite loss {total} at epoch {epoch}, batch {b}",
                _abort_diagnostics(epoch, b, total, emb1, emb2, alphas, spec, C, config.beta))
        grads = enc.add_grads(enc.backward(state.params, tape1, g1),
                              enc.backward(state.params, tape2, g2))
        state.params, state.adam = enc.adam_step(state.params, grads, state.adam)
        losses.append(total)
    state.epoch = epoch + 1
    return state, float(np.mean(losses))


def _abort_diagnostics(epoch, batch_index, loss_value, emb1, emb2, alphas, spec, C, beta) -> dict:
    diag = {"epoch": epoch, "batch_index": batch_index, "loss": loss_value}
    if alphas is not None:
        flat = np.concatenate(alphas)
        diag["alpha_min"] = float(flat.min())
        diag["alpha_max"] = float(flat.max())
        diag["alpha_mean"] = float(flat.mean())
    try:
        negs = np.concatenate([emb1[:, 1:], emb2[:, 1:]], axis=1)
        inst = build_instance(spec, emb1[:, 0], negs, C, beta)
        diag["delta_cond_estimate"] = float(np.linalg.cond(inst.delta))
    except Exception as exc:  # diagnostics must not mask the abort
        diag["delta_cond_estimate"] = f"unavailable: {exc}"
    return diag


def eval_embeddings(params: enc.EncoderParams, samples: np.ndarray, which: str) -> np.ndarray:
    """Row-major embeddings for evaluation: backbone features (default) or
    the normalized head output."""
    X = samples.T
    if which == "head":
        emb, _ = enc.forward(params, X)
        return emb.T
    return enc.forward_features(params, X).T


def eval_split(dataset: Dataset, seed: int, test_fraction: float):
    """Deterministic train/test index split for in-training evaluation."""
    perm = stream_rng(seed, "evalsplit").permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    return perm[n_test:], perm[:n_test]


def train(config: TrainConfig, dataset: Dataset, state: TrainState = None,
          on_epoch=None) -> TrainState:
    """Run (or resume) training for ``config.epochs`` total epochs.

    ``on_epoch`` receives each history row as it is produced. Evaluation
    runs every ``eval_every`` epochs on a held-out split when the dataset
    has labels.
    """
    from .evaluate import knn_readout, linear_probe  # cycle-free local import

    if state is None:
        state = init_state(config, dataset.dim)
    do_eval = config.eval_every > 0 and dataset.labels is not None
    if do_eval:
        train_idx, test_idx = eval_split(dataset, config.seed, config.test_fraction)
    while state.epoch < config.epochs:
        C, spec = apply_schedules(config, state.epoch)
        epoch_index = state.epoch
        state, mean_loss = run_epoch(state, config, dataset)
        knn_acc = linear_acc = math.nan
        if do_eval and (epoch_index + 1) % config.eval_every == 0:
            emb_train = eval_embeddings(state.params, dataset.samples[train_idx], config.eval_features)
            emb_test = eval_embeddings(state.params, dataset.samples[test_idx], config.eval_features)
            knn_acc = knn_readout(emb_train, dataset.labels[train_idx],
                                  emb_test, dataset.labels[test_idx], k=config.eval_k)
            linear_acc = linear_probe(emb_train, dataset.labels[train_idx],
                                      emb_test, dataset.labels[test_idx],
                                      epochs=config.probe_epochs, lr=config.probe_lr)
        row = (epoch_index, C, spec.sigma_sq, mean_loss, knn_acc, linear_acc)
        state.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return state


def format_metrics_row(row) -> str:
    epoch, C, sigma_sq, loss_value, knn_acc, linear_acc = row
    cells = [str(int(epoch)), repr(float(C)), repr(float(sigma_sq)), repr(float(loss_value))]
    for v in (knn_acc, linear_acc):
        cells.append("" if math.isnan(v) else repr(float(v)))
    return ",".join(cells)


def save_state(state: TrainState, path) -> None:
    """Atomic (write-temp-then-rename) checkpoint of the full train state."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(STATE_MAGIC)
            fh.write(struct.pack("<qq", state.epoch, state.seed))
            fh.write(struct.pack("<ddddq", state.adam.lr, state.adam.beta1,
                                 state.adam.beta2, state.adam.epsilon, state.adam.step))
            fh.write(struct.pack("<q", len(state.history)))
            for row in state.history:
                fh.write(struct.pack("<6d", *[float(v) for v in row]))
            enc.save_params(state.params, fh)
            for buffers in (state.adam.m, state.adam.v):
                for mW, mb in buffers:
                    fh.write(np.ascontiguousarray(mW, dtype="<f8").tobytes())
                    fh.write(np.ascontiguousarray(mb, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_state(path) -> TrainState:
    with open(path, "rb") as fh:
        magic = fh.read(len(STATE_MAGIC))
        if magic != STATE_MAGIC:
            raise ValueError(f"{path}: bad train-state magic {magic!r}")
        epoch, seed = struct.unpack("<qq", fh.read(16))
        lr, beta1, beta2, epsilon, step = struct.unpack("<ddddq", fh.read(40))
        (n_rows,) = struct.unpack("<q", fh.read(8))
        history = [tuple(struct.unpack("<6d", fh.read(48))) for _ in range(n_rows)]
        params = enc.load_params(fh)
        def read_buffers():
            out = []
            for W, b in params.all_layers():
                mW = np.frombuffer(fh.read(8 * W.size), dtype="<f8").reshape(W.shape).copy()
                mb = np.frombuffer(fh.read(8 * b.size), dtype="<f8").copy()
                out.append((mW, mb))
            return out
        m = read_buffers()
        v = read_buffers()
    adam = enc.AdamState(m=m, v=v, step=step, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
    return TrainState(params=params, adam=adam, epoch=epoch, seed=seed,
                      history=[(int(r[0]),) + r[1:] for r in history])

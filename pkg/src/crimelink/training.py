"""Losses, optimiser, learning-rate schedule, series-aware folds and the fold training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .dataset import CaseTable, geo_temporal_arrays
from .network import NetConfig, Params, backward, forward_pair, init_params

logger = logging.getLogger(__name__)


class LeakageError(RuntimeError):
    """A training pair touched the validation fold, or a series spans folds."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossConfig:
    weight_contrast: float = 1.0
    weight_recon: float = 0.2
    margin: float = 5.0
    contrastive_scale: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if min(self.weight_contrast, self.weight_recon, self.contrastive_scale) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 128
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_sigma: float = 0.05
    positive_fraction: float = 0.5
    pairs_per_epoch: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("adam_beta1 and adam_beta2 must lie in [0, 1) and adam_eps must be positive")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ValueError("pairs_per_epoch must be positive")


# -- losses ---------------------------------------------------------------------


def hybrid_distance(a, b) -> float:
    """Euclidean plus Manhattan distance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff)) + np.sum(np.abs(diff)))


def contrastive_loss(d: float, y: int, cfg: LossConfig = LossConfig()) -> float:
    if d < 0:
        raise ValueError("distance must be non-negative")
    hinge = max(cfg.margin - d, 0.0)
    return cfg.contrastive_scale * (y * d * d + (1 - y) * hinge * hinge)


def _cosine(v: np.ndarray, u: np.ndarray):
    """Row-wise cosine and the masks of zero-norm rows (cosine taken as 0 there)."""
    nv = np.linalg.norm(v, axis=-1)
    nu = np.linalg.norm(u, axis=-1)
    ok = (nv > 0) & (nu > 0)
    denom = np.where(ok, nv * nu, 1.0)
    cos = np.where(ok, np.sum(v * u, axis=-1) / denom, 0.0)
    return cos, nv, nu, ok


def reconstruction_loss(v1, v1_hat, v2, v2_hat) -> float:
    """``(1 - cos(v1, v1_hat)) + (1 - cos(v2, v2_hat))``; ranges over [0, 4]."""
    c1 = _cosine(np.asarray(v1, float), np.asarray(v1_hat, float))[0]
    c2 = _cosine(np.asarray(v2, float), np.asarray(v2_hat, float))[0]
    return float(np.mean((1.0 - c1) + (1.0 - c2)))


def _recon_terms(v: np.ndarray, u: np.ndarray):
    """Per-row ``1 - cos(v, u)`` and its gradient w.r.t. ``u``."""
    cos, nv, nu, ok = _cosine(v, u)
    safe_nv = np.where(ok, nv, 1.0)[:, None]
    safe_nu = np.where(ok, nu, 1.0)[:, None]
    d_cos = v / (safe_nv * safe_nu) - cos[:, None] * u / (safe_nu * safe_nu)
    grad = np.where(ok[:, None], -d_cos, 0.0)
    return 1.0 - cos, grad, int((~ok).sum())


@dataclass
class LossParts:
    contrast: float
    recon: float
    zero_norm: int


def total_loss(trace, y, cfg: LossConfig = LossConfig(), targets=None, return_parts: bool = False):
    """Batch-mean joint loss and its gradients w.r.t. ``(e1, e2, v1_hat, v2_hat)``.

    ``targets`` are the vectors the reconstructions are compared against; they
    default to the branch inputs stored in the trace. The Euclidean gradient at
    ``e1 == e2`` and the Manhattan subgradient at coordinate ties are taken as 0.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    b = trace.batch
    if len(y) != b:
        raise ValueError("label count does not match batch size")
    v1, v2 = (trace.x1, trace.x2) if targets is None else (np.asarray(t, float).reshape(b, -1) for t in targets)

    diff = trace.e1 - trace.e2
    l2 = np.sqrt(np.sum(diff * diff, axis=1))
    d = l2 + np.sum(np.abs(diff), axis=1)
    hinge = np.maximum(cfg.margin - d, 0.0)
    lc = cfg.contrastive_scale * (y * d * d + (1.0 - y) * hinge * hinge)
    dlc_dd = cfg.contrastive_scale * (2.0 * y * d - 2.0 * (1.0 - y) * hinge)
    unit = np.where(l2[:, None] > 0, diff / np.where(l2 > 0, l2, 1.0)[:, None], 0.0)
    dd_ddiff = unit + np.sign(diff)

    r1, g1, z1 = _recon_terms(v1, trace.v1_hat)
    r2, g2, z2 = _recon_terms(v2, trace.v2_hat)
    lr_ = r1 + r2

    alpha, beta = cfg.weight_contrast, cfg.weight_recon
    value = float(np.mean(alpha * lc + beta * lr_))
    scale = 1.0 / b
    d_e1 = (alpha * scale * dlc_dd)[:, None] * dd_ddiff
    grads = (d_e1, -d_e1, beta * scale * g1, beta * scale * g2)
    if return_parts:
        return value, grads, LossParts(float(np.mean(lc)), float(np.mean(lr_)), z1 + z2)
    return value, grads


# -- optimiser and schedule --------------------------------------------------------


@dataclass
class OptState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "OptState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(
    params: Params,
    grads: Params,
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Params, OptState]:
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or any(p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
        raise ValueError("gradient shapes do not match parameters")
    for i, g in enumerate(g_arrays):
        bad = ~np.isfinite(g)
        if bad.any():
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter array {i} (shape {g.shape}): "
                f"{int(bad.sum())} bad entries at step {state.step + 1}"
            )
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return Params.from_arrays(params, new_p), OptState(new_m, new_v, t)


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


# -- folds --------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    case_ids: tuple[str, ...]
    folds: np.ndarray
    k: int

    def fold_of(self, case_id: str) -> int:
        return int(self.folds[self.case_ids.index(case_id)])

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, val_fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != val_fold)

    def sizes(self) -> list[int]:
        return [int((self.folds == f).sum()) for f in range(self.k)]


def assign_folds(table: CaseTable, k: int = 5, seed=0) -> FoldAssignment:
    """Series-aware fold assignment.

    Series are shuffled, ordered largest first and dealt round-robin over a
    shuffled fold order; one-offs continue the same round-robin.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    members: dict[str, list[int]] = {}
    one_offs = []
    for i, s in enumerate(table.series_ids):
        if s is None:
            one_offs.append(i)
        else:
            members.setdefault(s, []).append(i)
    units = len(members) + len(one_offs)
    if k > units:
        raise ValueError(f"k={k} exceeds the {units} series/one-off units available")
    rng = np.random.default_rng(seed)
    series = list(members.values())
    series = [series[i] for i in rng.permutation(len(series))]
    series.sort(key=len, reverse=True)
    fold_order = rng.permutation(k)
    folds = np.empty(len(table), dtype=np.int64)
    for u, idx in enumerate(series):
        folds[idx] = fold_order[u % k]
    for j, i in enumerate(one_offs):
        folds[i] = fold_order[(len(series) + j) % k]
    return FoldAssignment(table.case_ids, folds, k)


def check_fold_integrity(table: CaseTable, assignment: FoldAssignment) -> None:
    seen: dict[str, int] = {}
    for i, s in enumerate(table.series_ids):
        if s is None:
            continue
        f = int(assignment.folds[i])
        if seen.setdefault(s, f) != f:
            raise LeakageError(f"series {s!r} spans folds {seen[s]} and {f}")


def check_pairs_outside(assignment: FoldAssignment, val_fold: int, ia, ib) -> None:
    touched = (assignment.folds[np.asarray(ia)] == val_fold) | (assignment.folds[np.asarray(ib)] == val_fold)
    if touched.any():
        raise LeakageError(f"{int(touched.sum())} training pair(s) touch validation fold {val_fold}")


# -- pair sampling --------------------------------------------------------------------


@dataclass
class PairBatch:
    index_a: np.ndarray
    index_b: np.ndarray
    labels: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    geo: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def batches_per_epoch(n_train: int, cfg: TrainConfig) -> int:
    pairs = cfg.pairs_per_epoch if cfg.pairs_per_epoch is not None else 20 * n_train
    return max(1, math.ceil(pairs / cfg.batch_size))


class PairSampler:
    """Draws balanced linked/unlinked pairs from the training folds."""

    def __init__(self, table: CaseTable, assignment: FoldAssignment, train_folds: Sequence[int]):
        train_folds = list(train_folds)
        if not train_folds:
            raise ValueError("train_folds must not be empty")
        self.table = table
        self.assignment = assignment
        self.train = np.flatnonzero(np.isin(assignment.folds, train_folds))
        codes = table.series_codes()
        self.codes = codes
        groups: dict[int, list[int]] = {}
        for i in self.train:
            if codes[i] >= 0:
                groups.setdefault(int(codes[i]), []).append(int(i))
        self.groups = [np.array(g) for g in groups.values() if len(g) >= 2]
        if not self.groups:
            raise ValueError("no linked pairs available in the training folds")
        w = np.array([len(g) * (len(g) - 1) / 2 for g in self.groups])
        self.group_p = w / w.sum()
        self.group_sizes = np.array([len(g) for g in self.groups])
        self.group_starts = np.concatenate([[0], np.cumsum(self.group_sizes)[:-1]])
        self.group_members = np.concatenate(self.groups)
        if len(self.train) < 2:
            raise ValueError("need at least two training cases")

    def positives(self, n: int, rng: np.random.Generator):
        which = rng.choice(len(self.groups), size=n, p=self.group_p)
        sizes = self.group_sizes[which]
        a = rng.integers(0, sizes)
        b = rng.integers(0, sizes - 1)
        b = b + (b >= a)
        start = self.group_starts[which]
        return self.group_members[start + a], self.group_members[start + b]

    def negatives(self, n: int, rng: np.random.Generator):
        ia_out, ib_out = [], []
        have = 0
        for _ in range(1000):
            if have >= n:
                break
            m = 2 * (n - have) + 8
            ia = self.train[rng.integers(0, len(self.train), size=m)]
            ib = self.train[rng.integers(0, len(self.train), size=m)]
            keep = self.codes[ia] != self.codes[ib]
            ia_out.append(ia[keep])
            ib_out.append(ib[keep])
            have += int(keep.sum())
        if have < n:
            raise ValueError("could not draw enough unlinked pairs from the training folds")
        return np.concatenate(ia_out)[:n], np.concatenate(ib_out)[:n]

    def batch(self, cfg: TrainConfig, rng: np.random.Generator, size: Optional[int] = None) -> PairBatch:
        size = size or cfg.batch_size
        n_pos = min(size, math.ceil(cfg.positive_fraction * size))
        pa, pb = self.positives(n_pos, rng)
        na, nb = self.negatives(size - n_pos, rng)
        ia = np.concatenate([pa, na])
        ib = np.concatenate([pb, nb])
        labels = np.concatenate([np.ones(n_pos), np.zeros(size - n_pos)])
        feats = self.table.features
        v1 = feats[ia].astype(float)
        v2 = feats[ib].astype(float)
        geo = geo_temporal_arrays(self.table, ia, ib)
        if cfg.noise_sigma > 0:
            x1 = v1 + rng.normal(0.0, cfg.noise_sigma, size=v1.shape)
            x2 = v2 + rng.normal(0.0, cfg.noise_sigma, size=v2.shape)
        else:
            x1, x2 = v1.copy(), v2.copy()
        return PairBatch(ia, ib, labels, x1, x2, geo, v1, v2)


def sample_pairs(
    table: CaseTable,
    assignment: FoldAssignment,
    train_folds: Sequence[int],
    cfg: TrainConfig,
    rng: np.random.Generator,
    n_batches: Optional[int] = None,
) -> Iterator[PairBatch]:
    """Yield ``n_batches`` batches (default: one epoch's worth)."""
    sampler = PairSampler(table, assignment, train_folds)
    if n_batches is None:
        n_batches = batches_per_epoch(len(sampler.train), cfg)
    for _ in range(n_batches):
        yield sampler.batch(cfg, rng)


# -- training loop ----------------------------------------------------------------------


@dataclass
class HistoryRow:
    step: int
    lr: float
    loss_total: float
    loss_contrast: float
    loss_recon: float


HISTORY_HEADER = ["step", "lr", "loss_total", "loss_contrast", "loss_recon"]


def write_history(history: Sequence[HistoryRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for h in history:
            writer.writerow([h.step, repr(h.lr), repr(h.loss_total), repr(h.loss_contrast), repr(h.loss_recon)])


def fold_seeds(seed: int, val_fold: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Independent (init, sampling) seed streams for one fold."""
    init_seq, sample_seq = np.random.SeedSequence([int(seed), int(val_fold)]).spawn(2)
    return init_seq, sample_seq


def train_fold(
    table: CaseTable,
    assignment: FoldAssignment,
    val_fold: int,
    net_cfg: NetConfig,
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
) -> tuple[Params, list[HistoryRow]]:
    if net_cfg.input_dim != table.dims:
        raise ValueError(f"net input_dim {net_cfg.input_dim} != table dims {table.dims}")
    check_fold_integrity(table, assignment)
    init_seq, sample_seq = fold_seeds(train_cfg.seed, val_fold)
    params = init_params(net_cfg, init_seq)
    history: list[HistoryRow] = []
    if train_cfg.epochs == 0:
        return params, history
    train_folds = [f for f in range(assignment.k) if f != val_fold]
    sampler = PairSampler(table, assignment, train_folds)
    per_epoch = batches_per_epoch(len(sampler.train), train_cfg)
    total = train_cfg.epochs * per_epoch
    rng = np.random.default_rng(sample_seq)
    state = OptState.zeros(params)
    zero_norm = 0
    for step in range(total):
        batch = sampler.batch(train_cfg, rng)
        check_pairs_outside(assignment, val_fold, batch.index_a, batch.index_b)
        lr = cosine_lr(step, total, train_cfg.learning_rate)
        trace = forward_pair(params, batch.x1, batch.x2, batch.geo, net_cfg)
        value, head_grads, parts = total_loss(
            trace, batch.labels, loss_cfg, targets=(batch.v1, batch.v2), return_parts=True
        )
        zero_norm += parts.zero_norm
        grads = backward(trace, net_cfg, head_grads)
        params, state = adam_step(
            params, grads, state, lr, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps
        )
        history.append(HistoryRow(step, lr, value, parts.contrast, parts.recon))
    if zero_norm:
        logger.warning("fold %d: %d zero-norm vector(s) in the reconstruction loss", val_fold, zero_norm)
    return params, history

"""Pair scoring, Top-K ranking, linkage metrics, the logistic baseline and cross-validation."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import CaseTable, geo_temporal_arrays
from .network import NetConfig, Params, encode, with_geo
from .training import (
    FoldAssignment,
    HistoryRow,
    LeakageError,
    LossConfig,
    PairBatch,
    TrainConfig,
    assign_folds,
    check_fold_integrity,
    fold_seeds,
    sample_pairs,
    train_fold,
)

METHODS = ("ours", "naive_siamese", "logreg")
METRICS = ("auc", "tp_at_fixed_fp", "auprc")
DECAY_DIVISOR = 1.5


# -- scoring -----------------------------------------------------------------------


@dataclass(frozen=True)
class ScoredPair:
    case_id_a: str
    case_id_b: str
    distance: float
    similarity: float
    label: Optional[int] = None


def decay_scale(margin: float) -> float:
    return margin / DECAY_DIVISOR


def similarity(distance, margin: float = 5.0):
    """``exp(-D / (margin / 1.5))``; accepts scalars or arrays."""
    d = np.asarray(distance, dtype=float)
    if (d < 0).any():
        raise ValueError("distance must be non-negative")
    s = np.exp(-d / decay_scale(margin))
    return float(s) if s.ndim == 0 else s


def pair_labels(table: CaseTable, ia, ib) -> np.ndarray:
    codes = table.series_codes()
    return (codes[np.asarray(ia)] == codes[np.asarray(ib)]).astype(np.int64)


def all_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    ia, ib = np.triu_indices(n, k=1)
    return ia.astype(np.int64), ib.astype(np.int64)


def latent_codes(params: Params, table: CaseTable, net_cfg: NetConfig) -> np.ndarray:
    if net_cfg.fusion == "input_concat":
        raise ValueError("input_concat codes depend on the pair; use pair_distances")
    return encode(params, table.features.astype(float), net_cfg)


def pair_distances(
    params: Params, table: CaseTable, net_cfg: NetConfig, ia, ib, chunk: int = 50_000
) -> np.ndarray:
    """Euclidean latent distance for each index pair."""
    ia = np.asarray(ia, dtype=np.int64)
    ib = np.asarray(ib, dtype=np.int64)
    if net_cfg.input_dim != table.dims:
        raise ValueError(f"params expect {net_cfg.input_dim} features, table has {table.dims}")
    if net_cfg.fusion != "input_concat":
        codes = latent_codes(params, table, net_cfg)
        out = np.empty(len(ia))
        for s in range(0, len(ia), chunk):
            diff = codes[ia[s:s + chunk]] - codes[ib[s:s + chunk]]
            out[s:s + chunk] = np.sqrt(np.sum(diff * diff, axis=1))
        return out
    x = table.features.astype(float)
    out = np.empty(len(ia))
    for s in range(0, len(ia), chunk):
        a, b = ia[s:s + chunk], ib[s:s + chunk]
        g = geo_temporal_arrays(table, a, b)
        diff = encode(params, with_geo(x[a], g), net_cfg) - encode(params, with_geo(x[b], g), net_cfg)
        out[s:s + chunk] = np.sqrt(np.sum(diff * diff, axis=1))
    return out


def score_all_pairs(
    params: Params, table: CaseTable, net_cfg: NetConfig, loss_cfg: LossConfig = LossConfig()
) -> list[ScoredPair]:
    if len(table) == 0:
        raise ValueError("table is empty")
    ia, ib = all_pairs(len(table))
    dist = pair_distances(params, table, net_cfg, ia, ib)
    sim = similarity(dist, loss_cfg.margin)
    labels = pair_labels(table, ia, ib)
    ids = table.case_ids
    out = []
    for a, b, d, s, y in zip(ia.tolist(), ib.tolist(), dist.tolist(), np.atleast_1d(sim).tolist(), labels.tolist()):
        ca, cb = ids[a], ids[b]
        if cb < ca:
            ca, cb = cb, ca
        out.append(ScoredPair(ca, cb, d, s, y))
    return out


@dataclass(frozen=True)
class RankedMatch:
    rank: int
    case_id: str
    similarity: float
    distance: float


def top_k(scored: Iterable[ScoredPair], query: str, k: int) -> list[RankedMatch]:
    """Partners of ``query`` by descending similarity; ties by partner id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = []
    found = False
    for p in scored:
        if p.case_id_a == query:
            hits.append((p.case_id_b, p))
            found = True
        elif p.case_id_b == query:
            hits.append((p.case_id_a, p))
            found = True
    if not found:
        raise KeyError(f"unknown query case_id {query!r}")
    hits.sort(key=lambda h: (-h[1].similarity, h[0]))
    return [RankedMatch(r + 1, cid, p.similarity, p.distance) for r, (cid, p) in enumerate(hits[:k])]


# -- metrics -------------------------------------------------------------------------


def _check_binary(scores, labels, need_both: bool = True):
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    if need_both and (n_pos == 0 or n_pos == len(y)):
        raise ValueError("both classes must be present")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties counted one half."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    ranks = rankdata(s)  # average ranks; every value is a multiple of 1/2
    twice_u = int(round(2 * ranks[y == 1].sum())) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def tp_at_fixed_fp(scores, labels, fp_rate: float = 0.15) -> float:
    """True-positive rate at the most permissive threshold whose FP rate stays within budget.

    A pair is called linked when its score is at or above the threshold.
    """
    if not 0.0 < fp_rate < 1.0:
        raise ValueError("fp_rate must lie in (0, 1)")
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last index of each run of equal scores = counts at threshold == that score
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp, fp = tp[last], fp[last]
    ok = fp <= fp_rate * n_neg
    if not ok.any():
        return 0.0
    return float(tp[ok].max() / n_pos)


def auprc(scores, labels, n_thresholds: int = 100) -> float:
    """Trapezoidal area under the precision-recall curve over uniform thresholds in [0, 1].

    Precision with no predicted positives counts as 1. Points are visited in
    order of increasing recall (decreasing threshold).
    """
    s, y = _check_binary(scores, labels, need_both=False)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("at least one positive is required")
    taus = np.linspace(0.0, 1.0, n_thresholds)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    cum_pos = np.r_[0, np.cumsum(y[order])]
    # number of scores >= tau
    count = np.searchsorted(-s_sorted, -taus, side="right")
    tp = cum_pos[count]
    fp = count - tp
    precision = np.where(count > 0, tp / np.maximum(count, 1), 1.0)
    recall = tp / n_pos
    idx = np.lexsort((-taus, recall))
    r, p = recall[idx], precision[idx]
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def metric_suite(scores, labels, fixed_fp_rate: float = 0.15) -> dict[str, float]:
    """All three metrics as fractions."""
    return {
        "auc": roc_auc(scores, labels),
        "tp_at_fixed_fp": tp_at_fixed_fp(scores, labels, fixed_fp_rate),
        "auprc": auprc(scores, labels),
    }


# -- logistic-regression baseline ----------------------------------------------------------


LOGREG_FEATURIZATION = "absdiff+geo"


def pair_features(v1: np.ndarray, v2: np.ndarray, geo: np.ndarray) -> np.ndarray:
    """``|x_i - x_j|`` followed by the pair's log distance and log interval."""
    return np.concatenate([np.abs(np.asarray(v1, float) - np.asarray(v2, float)), np.asarray(geo, float)], axis=1)


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    featurization: str = LOGREG_FEATURIZATION

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, float) - self.mean) / self.scale
        return z @ self.weights + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision_function(features))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, float)))


def logistic_loss(model: LogRegModel, features, labels, l2: float = 1e-4) -> float:
    z = model.decision_function(features)
    y = np.asarray(labels, float)
    nll = np.mean(np.logaddexp(0.0, z) - y * z)
    return float(nll + 0.5 * l2 * np.sum(model.weights**2))


def fit_logreg_arrays(features, labels, epochs: int, lr: float, l2: float = 1e-4, batch_size=None) -> LogRegModel:
    """Gradient descent on standardised features; full batch unless ``batch_size`` is set."""
    f = np.asarray(features, float)
    y = np.asarray(labels, float)
    if len(np.unique(y)) < 2:
        raise ValueError("both classes must be present")
    mean = f.mean(axis=0)
    scale = f.std(axis=0)
    scale[scale == 0] = 1.0
    model = LogRegModel(np.zeros(f.shape[1]), 0.0, mean, scale)
    step = batch_size or len(f)
    for _ in range(epochs):
        for s in range(0, len(f), step):
            _logreg_step(model, f[s:s + step], y[s:s + step], lr, l2)
    return model


def _logreg_step(model: LogRegModel, f, y, lr, l2):
    z = (f - model.mean) / model.scale
    err = _sigmoid(z @ model.weights + model.bias) - y
    model.weights -= lr * (z.T @ err / len(y) + l2 * model.weights)
    model.bias -= lr * float(err.mean())


def fit_logreg(pairs: Iterable[PairBatch], epochs: int, lr: float = 0.1, l2: float = 1e-4) -> LogRegModel:
    """Mini-batch gradient descent over a fixed list of pair batches, once per epoch.

    Standardisation statistics come from the whole stream. Inputs are the clean
    (noise-free) case vectors of each batch.
    """
    batches = list(pairs)
    feats = [pair_features(b.v1, b.v2, b.geo) for b in batches]
    labels = [np.asarray(b.labels, float) for b in batches]
    if not batches or len(np.unique(np.concatenate(labels))) < 2:
        raise ValueError("both classes must be present in the pair stream")
    allf = np.concatenate(feats)
    mean = allf.mean(axis=0)
    scale = allf.std(axis=0)
    scale[scale == 0] = 1.0
    model = LogRegModel(np.zeros(allf.shape[1]), 0.0, mean, scale)
    for _ in range(epochs):
        for f, y in zip(feats, labels):
            _logreg_step(model, f, y, lr, l2)
    return model


def logreg_pair_scores(model: LogRegModel, table: CaseTable, ia, ib, chunk: int = 50_000) -> np.ndarray:
    x = table.features
    out = np.empty(len(ia))
    for s in range(0, len(ia), chunk):
        a, b = ia[s:s + chunk], ib[s:s + chunk]
        out[s:s + chunk] = model.predict_proba(pair_features(x[a], x[b], geo_temporal_arrays(table, a, b)))
    return out


# -- cross-validation -------------------------------------------------------------------------


@dataclass
class MetricsReport:
    method: str
    k: int
    seed: int
    fixed_fp_rate: float
    config_hash: str
    folds: dict[str, list[float]]
    std_kind: str = "population"

    def mean(self, metric: str) -> float:
        return float(np.mean(self.folds[metric]))

    def std(self, metric: str) -> float:
        return float(np.std(self.folds[metric]))

    def to_json_dict(self) -> dict:
        out = {
            "config_hash": self.config_hash,
            "fixed_fp_rate": self.fixed_fp_rate,
            "k": self.k,
            "method": self.method,
            "seed": self.seed,
            "std_kind": self.std_kind,
            "units": "percent",
        }
        for m in METRICS:
            out[m] = {"folds": list(self.folds[m]), "mean": self.mean(m), "std": self.std(m)}
        return out


@dataclass
class FoldResult:
    fold: int
    metrics: dict[str, float]
    n_val_pairs: int
    n_val_positive: int
    params: Optional[Params] = None
    history: list[HistoryRow] = field(default_factory=list)
    logreg: Optional[LogRegModel] = None


@dataclass
class CVRun:
    report: MetricsReport
    folds: list[FoldResult]
    assignment: FoldAssignment
    net_cfg: Optional[NetConfig]
    loss_cfg: LossConfig


def resolve_method(method: str, net_cfg: NetConfig, loss_cfg: LossConfig) -> tuple[NetConfig, LossConfig]:
    """Configs actually trained for ``method``.

    ``ours`` trains the configured network unchanged. ``naive_siamese`` feeds the
    geo-temporal pair at the input and drops the reconstruction term.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if method == "naive_siamese":
        return dataclasses.replace(net_cfg, fusion="input_concat"), dataclasses.replace(loss_cfg, weight_recon=0.0)
    return net_cfg, loss_cfg


def _evaluate_fold(table, assignment, fold, method, net_cfg, train_cfg, loss_cfg, fixed_fp_rate, logreg_lr):
    val = assignment.indices(fold)
    a, b = all_pairs(len(val))
    ia, ib = val[a], val[b]
    if (assignment.folds[ia] != fold).any() or (assignment.folds[ib] != fold).any():
        raise LeakageError(f"validation pair outside fold {fold}")
    labels = pair_labels(table, ia, ib)
    result = FoldResult(fold, {}, len(ia), int(labels.sum()))
    if method == "logreg":
        _, sample_seq = fold_seeds(train_cfg.seed, fold)
        rng = np.random.default_rng(sample_seq)
        clean = dataclasses.replace(train_cfg, noise_sigma=0.0)
        train_folds = [f for f in range(assignment.k) if f != fold]
        batches = list(sample_pairs(table, assignment, train_folds, clean, rng))
        for batch in batches:
            if (assignment.folds[batch.index_a] == fold).any() or (assignment.folds[batch.index_b] == fold).any():
                raise LeakageError(f"training pair touches validation fold {fold}")
        model = fit_logreg(batches, train_cfg.epochs, logreg_lr)
        scores = logreg_pair_scores(model, table, ia, ib)
        result.logreg = model
    else:
        params, history = train_fold(table, assignment, fold, net_cfg, train_cfg, loss_cfg)
        scores = similarity(pair_distances(params, table, net_cfg, ia, ib), loss_cfg.margin)
        result.params, result.history = params, history
    result.metrics = metric_suite(scores, labels, fixed_fp_rate)
    return result


def run_cross_validation(
    table: CaseTable,
    k: int,
    net_cfg: Optional[NetConfig],
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    method: str = "ours",
    fixed_fp_rate: float = 0.15,
    jobs: int = 1,
    config_hash: str = "",
    logreg_lr: float = 0.1,
) -> CVRun:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if net_cfg is None:
        net_cfg = NetConfig(input_dim=table.dims)
    net_cfg, loss_cfg = resolve_method(method, net_cfg, loss_cfg)
    assignment = assign_folds(table, k, train_cfg.seed)
    check_fold_integrity(table, assignment)

    def run(fold):
        return _evaluate_fold(
            table, assignment, fold, method, net_cfg, train_cfg, loss_cfg, fixed_fp_rate, logreg_lr
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(f) for f in range(k)]
    folds = {m: [100.0 * r.metrics[m] for r in results] for m in METRICS}
    report = MetricsReport(method, k, train_cfg.seed, fixed_fp_rate, config_hash, folds)
    return CVRun(report, results, assignment, None if method == "logreg" else net_cfg, loss_cfg)


def cross_validate(
    table: CaseTable,
    k: int = 5,
    net_cfg: Optional[NetConfig] = None,
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    method: str = "ours",
    fixed_fp_rate: float = 0.15,
    jobs: int = 1,
    config_hash: str = "",
) -> MetricsReport:
    return run_cross_validation(
        table, k, net_cfg, train_cfg, loss_cfg, method, fixed_fp_rate, jobs, config_hash
    ).report

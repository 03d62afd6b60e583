"""Synthetic case tables with series structure.

Every offender (a series, or a one-off treated as a series of one) owns a small
set of characteristic features that show up in each of its offences with
probability ``signature_strength``. All remaining features fire at a shared
population base rate, solved so that the expected fraction of zero cells hits
``target_sparsity``. Series members scatter around a series centroid in space and
follow one another in time; one-offs are spread uniformly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import CaseTable, FeatureSchema


class ConfigError(ValueError):
    """Invalid or infeasible configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class GenConfig:
    n_cases: int = 2000
    target_series_fraction: float = 0.7
    series_size_min: int = 2
    series_size_max: int = 200
    dims: int = 446
    target_sparsity: float = 0.91
    signature_strength: float = 0.9
    n_signature_features: int = 12
    geo_series_sigma_km: float = 10.0
    geo_population_extent_km: float = 300.0
    time_series_gap_days: float = 60.0
    time_extent_days: float = 11322.0
    variants_per_concept: int = 1
    style_dims: int = 0
    style_temperature: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ConfigError("n_cases", "must be at least 1")
        if not 0.0 <= self.target_series_fraction <= 1.0:
            raise ConfigError("target_series_fraction", "must lie in [0, 1]")
        if self.series_size_min < 2:
            raise ConfigError("series_size_min", "must be at least 2")
        if self.series_size_max < self.series_size_min:
            raise ConfigError("series_size_max", "must be >= series_size_min")
        if self.dims < 1:
            raise ConfigError("dims", "must be at least 1")
        if not 0.0 < self.target_sparsity < 1.0:
            raise ConfigError("target_sparsity", "must lie strictly between 0 and 1")
        if not 0.5 < self.signature_strength <= 1.0:
            raise ConfigError("signature_strength", "must lie in (0.5, 1]")
        if not 0 <= self.n_signature_features <= self.dims:
            raise ConfigError("n_signature_features", "must lie in [0, dims]")
        if self.variants_per_concept < 1 or self.dims % self.variants_per_concept:
            raise ConfigError("variants_per_concept", "must be >= 1 and divide dims")
        if self.n_signature_features > self.dims // self.variants_per_concept:
            raise ConfigError("n_signature_features", "exceeds the number of behaviour concepts")
        if self.style_dims < 0 or self.style_temperature < 0:
            raise ConfigError("style_dims", "style_dims and style_temperature must be non-negative")
        for name in ("geo_series_sigma_km", "geo_population_extent_km", "time_series_gap_days", "time_extent_days"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")

    def replace(self, **changes) -> "GenConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class StatsReport:
    sparsity: float
    positive_pair_fraction: float
    n_series: int
    n_one_offs: int
    per_feature_rates: list[float]

    def to_json_dict(self) -> dict:
        return {
            "n_one_offs": self.n_one_offs,
            "n_series": self.n_series,
            "positive_pair_fraction": self.positive_pair_fraction,
            "sparsity": self.sparsity,
        }


def base_rate(config: GenConfig) -> float:
    """Background firing probability that makes expected density ``1 - target_sparsity``."""
    m, k, s = config.dims, config.n_signature_features, config.signature_strength
    ones = (1.0 - config.target_sparsity) * m
    if k == m:
        if not math.isclose(ones, k * s, rel_tol=1e-9):
            raise ConfigError("target_sparsity", "unreachable when every feature is a signature feature")
        return 0.0
    q = (ones - k * s) / (m - k)
    if q < -1e-12:
        raise ConfigError(
            "target_sparsity",
            f"unreachable: signatures alone give sparsity {1 - k * s / m:.4f} < {config.target_sparsity}",
        )
    q = max(q, 0.0)
    if k > 0 and q >= s:
        raise ConfigError(
            "target_sparsity",
            f"unreachable: needs base rate {q:.4f}, not below signature_strength {s}",
        )
    if q > 1.0:
        raise ConfigError("target_sparsity", "unreachable: base rate above 1")
    return q


def _draw_series_sizes(config: GenConfig, rng: np.random.Generator) -> list[int]:
    remaining = int(round(config.target_series_fraction * config.n_cases))
    lo, hi = config.series_size_min, config.series_size_max
    sizes = []
    while remaining >= lo:
        s = int(rng.integers(lo, hi + 1))
        if remaining - s < lo:
            s = remaining
        sizes.append(s)
        remaining -= s
    return sizes


def _draw_signature(config: GenConfig, loadings, rng: np.random.Generator) -> np.ndarray:
    """Characteristic behaviour concepts of one offender.

    Without a style model they are a uniform random subset of concepts. With
    one, the offender gets a unit style vector and concepts are drawn without
    replacement with log-weights ``temperature * loadings @ style`` (Gumbel
    top-k), so offenders of similar style share characteristic concepts.
    """
    k = config.n_signature_features
    n_concepts = config.dims // config.variants_per_concept
    if loadings is None:
        return rng.choice(n_concepts, size=k, replace=False)
    style = rng.normal(size=config.style_dims)
    style /= np.linalg.norm(style)
    logits = config.style_temperature * (loadings @ style) + rng.gumbel(size=n_concepts)
    return np.argsort(-logits, kind="stable")[:k]


def _express(config: GenConfig, signature: np.ndarray, size: int, q: float, rng) -> np.ndarray:
    """Offence vectors for one offender.

    Each characteristic concept shows up with probability ``signature_strength``
    through one of its ``variants_per_concept`` features, picked per offence;
    every other cell fires at the base rate ``q``.
    """
    v = config.variants_per_concept
    x = (rng.random((size, config.dims)) < q).astype(np.uint8)
    if v == 1:
        cols = np.broadcast_to(signature, (size, len(signature)))
    else:
        cols = signature * v + rng.integers(0, v, size=(size, len(signature)))
    rows = np.broadcast_to(np.arange(size)[:, None], cols.shape)
    x[rows, cols] = rng.random(cols.shape) < config.signature_strength
    return x


def default_schema(dims: int) -> FeatureSchema:
    """Alternating behavioural (``b###``) and contextual (``c###``) feature names."""
    width = max(3, len(str(dims - 1)))
    return FeatureSchema(
        tuple(f"{'b' if j % 2 == 0 else 'c'}{j:0{width}d}" for j in range(dims)),
        tuple("behavioural" if j % 2 == 0 else "contextual" for j in range(dims)),
    )


def generate(config: GenConfig) -> CaseTable:
    """Draw a synthetic table. Deterministic given ``config.seed``."""
    q = base_rate(config)
    m = config.dims
    root = np.random.SeedSequence(config.seed)
    size_seq, order_seq, offender_seq, style_seq = root.spawn(4)
    loadings = None
    if config.style_dims > 0:
        n_concepts = m // config.variants_per_concept
        loadings = np.random.default_rng(style_seq).normal(size=(n_concepts, config.style_dims))
        loadings /= np.linalg.norm(loadings, axis=1, keepdims=True)
    sizes = _draw_series_sizes(config, np.random.default_rng(size_seq))
    n_one_offs = config.n_cases - sum(sizes)
    offender_sizes = sizes + [1] * n_one_offs
    streams = offender_seq.spawn(len(offender_sizes))

    extent = config.geo_population_extent_km
    feats, locs, times, series = [], [], [], []
    for k, (size, seq) in enumerate(zip(offender_sizes, streams)):
        rng = np.random.default_rng(seq)
        is_series = k < len(sizes)
        signature = _draw_signature(config, loadings, rng)
        x = _express(config, signature, size, q, rng)
        if is_series:
            centroid = rng.uniform(0.0, extent, size=2)
            loc = centroid + rng.normal(0.0, config.geo_series_sigma_km, size=(size, 2))
            start = rng.uniform(0.0, config.time_extent_days)
            gaps = rng.exponential(config.time_series_gap_days, size=size)
            gaps[0] = 0.0
            # both wrap so every case stays inside the study window
            loc = np.mod(loc, extent)
            t = np.mod(start + np.cumsum(gaps), config.time_extent_days)
            series.extend([f"S{k + 1:04d}"] * size)
        else:
            loc = rng.uniform(0.0, extent, size=(1, 2))
            t = rng.uniform(0.0, config.time_extent_days, size=1)
            series.append(None)
        feats.append(x)
        locs.append(loc)
        times.append(t)

    order = np.random.default_rng(order_seq).permutation(config.n_cases)
    features = np.concatenate(feats)[order]
    locations = np.concatenate(locs)[order]
    t_all = np.concatenate(times)[order]
    series_ids = [series[i] for i in order]
    schema = default_schema(m)
    n_width = len(str(config.n_cases))
    case_ids = [f"C{i + 1:0{n_width}d}" for i in range(config.n_cases)]
    return CaseTable(schema, case_ids, series_ids, features, locations, t_all)


def positive_pair_fraction(series_sizes: Sequence[int], n_cases: int) -> float:
    """Linked pairs over all pairs: ``sum C(s, 2) / C(N, 2)``."""
    total = math.comb(n_cases, 2)
    if total == 0:
        return 0.0
    return sum(math.comb(int(s), 2) for s in series_sizes) / total


def _expected_fraction(n_cases: int, series_fraction: float, lo: int, hi: int) -> float:
    count = hi - lo + 1
    mean_size = (lo + hi) / 2
    sum_sq = (hi * (hi + 1) * (2 * hi + 1) - (lo - 1) * lo * (2 * lo - 1)) / 6
    mean_pairs = (sum_sq / count - mean_size) / 2
    n_series = series_fraction * n_cases / mean_size
    return n_series * mean_pairs / math.comb(n_cases, 2)


def expected_positive_fraction(config: GenConfig) -> float:
    """Expected linked-pair fraction implied by the config's series-size range."""
    if config.n_cases < 2 or round(config.target_series_fraction * config.n_cases) < config.series_size_min:
        return 0.0
    return _expected_fraction(
        config.n_cases, config.target_series_fraction, config.series_size_min, config.series_size_max
    )


def calibrate_imbalance(config: GenConfig, target: float, rel_tol: float = 0.05) -> GenConfig:
    """Narrow the series-size range so the expected linked-pair fraction is ``target``.

    The series fraction is kept; the number of series follows from the chosen
    mean size. Candidate ranges lie inside the config's own size bounds and are
    preferred at a width of about half their mean.
    """
    if not 0.0 < target < 0.5:
        raise ConfigError("target_positive_fraction", "must lie in (0, 0.5)")
    n, f = config.n_cases, config.target_series_fraction
    lo_bound, hi_bound = config.series_size_min, min(config.series_size_max, int(round(f * n)))
    if n < 2 or hi_bound < lo_bound:
        raise ConfigError("target_positive_fraction", "unreachable: too few series cases")
    best = None
    for lo in range(lo_bound, hi_bound + 1):
        for hi in range(lo, hi_bound + 1):
            exp = _expected_fraction(n, f, lo, hi)
            mean = (lo + hi) / 2
            err = abs(exp - target) / target
            width_pen = abs((hi - lo) - 0.5 * mean) / mean
            key = (round(err, 3), width_pen, lo)
            if best is None or key < best[0]:
                best = (key, lo, hi, err)
    _, lo, hi, err = best
    if err > rel_tol:
        reach = (_expected_fraction(n, f, lo_bound, lo_bound), _expected_fraction(n, f, hi_bound, hi_bound))
        raise ConfigError(
            "target_positive_fraction",
            f"unreachable under size bounds: attainable range {reach[0]:.5f}..{reach[1]:.5f}",
        )
    return config.replace(series_size_min=lo, series_size_max=hi)


def summarize(table: CaseTable) -> StatsReport:
    counts: dict[str, int] = {}
    for s in table.series_ids:
        if s is not None:
            counts[s] = counts.get(s, 0) + 1
    n = len(table)
    if n and table.dims:
        sparsity = float(1.0 - table.features.sum(dtype=np.int64) / table.features.size)
        rates = [float(r) for r in table.features.mean(axis=0)]
    else:
        sparsity, rates = 1.0, [0.0] * table.dims
    return StatsReport(
        sparsity=sparsity,
        positive_pair_fraction=positive_pair_fraction(list(counts.values()), n),
        n_series=len(counts),
        n_one_offs=sum(1 for s in table.series_ids if s is None),
        per_feature_rates=rates,
    )

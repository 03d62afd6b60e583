"""Many-to-one feature consolidation with OR aggregation.

A mapping file is a UTF-8 CSV with header ``source_feature,target_feature``.
Features not listed pass through under their own name.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import CaseTable, FeatureSchema

MAPPING_HEADER = ["source_feature", "target_feature"]

# Remaining feature counts of the five expert maps, for a 446-feature source.
REFERENCE_MAP_SIZES = {"map1": 282, "map2": 384, "map3": 266, "map4": 217, "map5": 286}
REFERENCE_DIMS = 446


class MappingError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class MappingSpec:
    entries: tuple[tuple[str, str], ...]
    name: str = "mapping"

    def __post_init__(self):
        entries = tuple((str(s), str(t)) for s, t in self.entries)
        seen = set()
        for i, (src, tgt) in enumerate(entries):
            if src in seen:
                raise MappingError(f"duplicate source feature {src!r}", line=i + 2)
            if not src:
                raise MappingError("empty source feature", line=i + 2)
            if not tgt:
                raise MappingError(f"empty target for {src!r}", line=i + 2)
            seen.add(src)
        object.__setattr__(self, "entries", entries)

    @property
    def sources(self) -> list[str]:
        return [s for s, _ in self.entries]

    @property
    def targets(self) -> list[str]:
        """Distinct targets in first-occurrence order."""
        return list(dict.fromkeys(t for _, t in self.entries))

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for src, tgt in self.entries:
            out.setdefault(tgt, []).append(src)
        return out


def parse_mapping(path, name: str | None = None) -> MappingSpec:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MAPPING_HEADER:
            raise MappingError(f"header must be {','.join(MAPPING_HEADER)}, got {header}", line=1)
        entries = []
        seen: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise MappingError(f"expected 2 columns, got {len(row)}", line=lineno)
            src, tgt = row
            if src in seen:
                raise MappingError(f"duplicate source feature {src!r} (first on line {seen[src]})", line=lineno)
            if not tgt:
                raise MappingError(f"empty target for {src!r}", line=lineno)
            seen[src] = lineno
            entries.append((src, tgt))
    return MappingSpec(tuple(entries), name=name or path.stem)


def save_mapping(spec: MappingSpec, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MAPPING_HEADER)
        writer.writerows(spec.entries)


def mapped_schema(schema: FeatureSchema, spec: MappingSpec) -> tuple[FeatureSchema, list[list[int]]]:
    """Output schema plus, per output feature, the source column indices it ORs."""
    missing = [s for s in spec.sources if s not in schema.names]
    if missing:
        raise MappingError(f"mapped source feature(s) not in schema: {', '.join(missing)}")
    col = {n: j for j, n in enumerate(schema.names)}
    groups = spec.groups()
    names, kinds, members = [], [], []
    for tgt in spec.targets:
        idx = [col[s] for s in groups[tgt]]
        src_kinds = {schema.kinds[j] for j in idx}
        names.append(tgt)
        kinds.append(src_kinds.pop() if len(src_kinds) == 1 else "both")
        members.append(idx)
    mapped = set(spec.sources)
    for j, n in enumerate(schema.names):
        if n in mapped:
            continue
        if n in groups:
            raise MappingError(f"target {n!r} collides with an unmapped feature of the same name")
        names.append(n)
        kinds.append(schema.kinds[j])
        members.append([j])
    return FeatureSchema(tuple(names), tuple(kinds)), members


def apply_mapping(table: CaseTable, spec: MappingSpec) -> CaseTable:
    schema, members = mapped_schema(table.schema, spec)
    out = np.empty((len(table), len(members)), dtype=np.uint8)
    for k, idx in enumerate(members):
        out[:, k] = table.features[:, idx].max(axis=1) if len(table) else 0
    return table.with_features(schema, out)


def identity_spec(schema: FeatureSchema, name: str = "identity") -> MappingSpec:
    return MappingSpec(tuple((n, n) for n in schema.names), name=name)


def reduction_rate(spec: MappingSpec, original_dims: int) -> tuple[int, float]:
    n_sources = len(spec.entries)
    if original_dims < n_sources:
        raise MappingError(f"spec maps {n_sources} sources but only {original_dims} dims exist")
    remaining = original_dims - (n_sources - len(spec.targets))
    return remaining, 1.0 - remaining / original_dims


def make_fixture_map(
    names: Sequence[str], remaining: int, seed: int = 0, name: str = "fixture", max_group: int = 4
) -> MappingSpec:
    """Random grouping of ``names`` that leaves exactly ``remaining`` features.

    Groups hold 2..``max_group`` sources. The grouping carries no meaning; it
    only reproduces a reduction rate.
    """
    m = len(names)
    if not 1 <= remaining <= m:
        raise MappingError(f"remaining must lie in [1, {m}]")
    rng = np.random.default_rng(seed)
    order = [names[i] for i in rng.permutation(m)]
    to_remove = m - remaining
    entries = []
    pos = 0
    g = 0
    while to_remove > 0:
        size = int(rng.integers(2, max_group + 1))
        size = min(size, to_remove + 1)
        if pos + size > m:
            raise MappingError("cannot reach the requested size with the given group bound")
        group = order[pos:pos + size]
        pos += size
        g += 1
        target = f"grp{g:03d}"
        entries.extend((src, target) for src in group)
        to_remove -= size - 1
    return MappingSpec(tuple(entries), name=name)


def reference_fixture_maps(names: Sequence[str] | None = None) -> dict[str, MappingSpec]:
    """Five fixture maps hitting the reference remaining counts on a 446-feature schema."""
    if names is None:
        from .synthgen import default_schema

        names = default_schema(REFERENCE_DIMS).names
    if len(names) != REFERENCE_DIMS:
        raise MappingError(f"reference maps need {REFERENCE_DIMS} features, got {len(names)}")
    return {
        key: make_fixture_map(names, size, seed=i + 1, name=key)
        for i, (key, size) in enumerate(REFERENCE_MAP_SIZES.items())
    }


def bundled_map_path(key: str) -> Path:
    return Path(str(resources.files("crimelink") / "maps" / f"{key}.csv"))


def load_bundled_map(key: str) -> MappingSpec:
    if key not in REFERENCE_MAP_SIZES:
        raise KeyError(f"unknown bundled map {key!r}")
    return parse_mapping(bundled_map_path(key), name=key)


def write_bundled_maps(directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, spec in reference_fixture_maps().items():
        p = directory / f"{key}.csv"
        save_mapping(spec, p)
        paths.append(p)
    return paths

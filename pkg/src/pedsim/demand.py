"""Origin-destination demand: time-binned counts, arrival profiles, supply mixes
and named demand settings.

CSV schema (UTF-8, comma separated, ``.`` decimal point)::

    bin_start,bin_length,origin,destination,count

``destination`` is a route id.  Supply types use ``source,type,percent``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

OD_HEADER = ["bin_start", "bin_length", "origin", "destination", "count"]
SUPPLY_HEADER = ["source", "type", "percent"]


class DemandError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ODBin:
    bin_start: float
    bin_length: float
    origin: str
    destination: str
    count: int

    @property
    def key(self):
        return (self.bin_start, self.origin, self.destination)


def _sort_key(b: ODBin):
    return (b.bin_start, b.origin, b.destination)


@dataclass(frozen=True)
class ODMatrix:
    bins: tuple = ()

    def __post_init__(self):
        bins = tuple(sorted(self.bins, key=_sort_key))
        seen = set()
        for b in bins:
            if not b.bin_length > 0:
                raise DemandError(f"bin {b.key}: bin_length must be positive")
            if b.count < 0:
                raise DemandError(f"bin {b.key}: count must be non-negative")
            if b.key in seen:
                raise DemandError(f"duplicate bin {b.key}")
            seen.add(b.key)
        object.__setattr__(self, "bins", bins)

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)

    @property
    def origins(self):
        return sorted({b.origin for b in self.bins})

    @property
    def destinations(self):
        return sorted({b.destination for b in self.bins})

    def for_origin(self, origin: str):
        return [b for b in self.bins if b.origin == origin]

    def to_rows(self):
        return [[b.bin_start, b.bin_length, b.origin, b.destination, b.count] for b in self.bins]

    @classmethod
    def from_rows(cls, rows) -> "ODMatrix":
        return cls(tuple(ODBin(float(r[0]), float(r[1]), str(r[2]), str(r[3]), int(r[4])) for r in rows))


def _parse_count(text: str, row: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DemandError(f"row {row}: count {text!r} is not a number") from None
    if value != int(value):
        raise DemandError(f"row {row}: count {text!r} is not an integer")
    if value < 0:
        raise DemandError(f"row {row}: negative count {text!r}")
    return int(value)


def parse_od_csv(text: str) -> ODMatrix:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != OD_HEADER:
        raise DemandError(f"row 1: header must be {','.join(OD_HEADER)}")
    bins = []
    seen = {}
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise DemandError(f"row {row_no}: expected 5 columns, got {len(row)}")
        try:
            start = float(row[0])
            length = float(row[1])
        except ValueError:
            raise DemandError(f"row {row_no}: bin_start/bin_length must be numbers") from None
        if not (math.isfinite(start) and math.isfinite(length)):
            raise DemandError(f"row {row_no}: non-finite time")
        if not length > 0:
            raise DemandError(f"row {row_no}: bin_length must be positive")
        count = _parse_count(row[4].strip(), row_no)
        b = ODBin(start, length, row[2].strip(), row[3].strip(), count)
        if b.key in seen:
            raise DemandError(f"row {row_no}: duplicate key {b.key} (first at row {seen[b.key]})")
        seen[b.key] = row_no
        bins.append(b)
    return ODMatrix(tuple(bins))


def export_od_csv(matrix: ODMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OD_HEADER)
    for b in matrix.bins:
        w.writerow([repr(float(b.bin_start)), repr(float(b.bin_length)), b.origin, b.destination, b.count])
    return buf.getvalue()


# -- arrival profiles -----------------------------------------------------

@dataclass(frozen=True)
class ArrivalProfile:
    source: str
    mode: str  # "timetable" | "spread"
    entries: tuple = ()  # (time_s, destination) pairs, non-decreasing in time

    @property
    def times(self):
        return [t for t, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def spread_profile(matrix: ODMatrix, source: str, policy="uniform") -> ArrivalProfile:
    """Turn a source's bins into injection times.

    ``policy`` is ``"uniform"``, ``"timetable"`` or ``("poisson", seed)``.
    Uniform puts the i-th of k arrivals at ``bin_start + (i + 0.5) * L / k``;
    Poisson draws k sorted uniform times inside the bin, which is the
    conditional law of a Poisson process given k events.
    """
    bins = matrix.for_origin(source)
    if not bins:
        raise DemandError(f"source {source!r} does not appear in the OD matrix")
    if isinstance(policy, (tuple, list)):
        name, seed = policy[0], policy[1]
    elif isinstance(policy, dict):
        (name, seed), = policy.items()
    else:
        name, seed = policy, None
    rng = np.random.default_rng(seed) if name == "poisson" else None
    entries = []
    for b in bins:
        k = b.count
        if k == 0:
            continue
        if name == "uniform":
            step = b.bin_length / k
            times = [b.bin_start + (i + 0.5) * step for i in range(k)]
        elif name == "timetable":
            times = [b.bin_start] * k
        elif name == "poisson":
            times = list(b.bin_start + np.sort(rng.random(k)) * b.bin_length)
        else:
            raise DemandError(f"unknown spread policy {name!r}")
        entries.extend((float(t), b.destination) for t in times)
    entries.sort(key=lambda e: e[0])
    mode = "timetable" if name == "timetable" else "spread"
    return ArrivalProfile(source, mode, tuple(entries))


# -- editing --------------------------------------------------------------

def _half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


@dataclass(frozen=True)
class AddBin:
    bin: ODBin


@dataclass(frozen=True)
class DeleteBins:
    keys: tuple


@dataclass(frozen=True)
class ScalePercent:
    percent: float
    keys: tuple | None = None  # None: every bin


@dataclass(frozen=True)
class SetFrequency:
    rate: float  # pedestrians per second
    keys: tuple | None = None


def _targets(matrix: ODMatrix, keys):
    if keys is None:
        return {b.key for b in matrix.bins}
    wanted = {(float(k[0]), k[1], k[2]) for k in keys}
    present = {b.key for b in matrix.bins}
    missing = sorted(wanted - present)
    if missing:
        raise DemandError(f"no such bin(s): {missing}")
    return wanted


def edit_demand(matrix: ODMatrix, op) -> ODMatrix:
    if isinstance(op, AddBin):
        if any(b.key == op.bin.key for b in matrix.bins):
            raise DemandError(f"bin {op.bin.key} already exists")
        return ODMatrix(matrix.bins + (op.bin,))
    if isinstance(op, DeleteBins):
        gone = _targets(matrix, op.keys)
        return ODMatrix(tuple(b for b in matrix.bins if b.key not in gone))
    if isinstance(op, ScalePercent):
        hit = _targets(matrix, op.keys)
        factor = (100 + Fraction(str(op.percent))) / 100
        out = []
        for b in matrix.bins:
            if b.key in hit:
                n = _half_up(b.count * factor)
                if n < 0:
                    raise DemandError(f"bin {b.key}: scaling by {op.percent}% gives a negative count")
                b = ODBin(b.bin_start, b.bin_length, b.origin, b.destination, n)
            out.append(b)
        return ODMatrix(tuple(out))
    if isinstance(op, SetFrequency):
        hit = _targets(matrix, op.keys)
        rate = Fraction(str(op.rate))
        out = []
        for b in matrix.bins:
            if b.key in hit:
                n = _half_up(rate * Fraction(str(b.bin_length)))
                if n < 0:
                    raise DemandError(f"bin {b.key}: negative frequency")
                b = ODBin(b.bin_start, b.bin_length, b.origin, b.destination, n)
            out.append(b)
        return ODMatrix(tuple(out))
    raise DemandError(f"unknown demand edit {op!r}")


# -- supply types ---------------------------------------------------------

@dataclass(frozen=True)
class SupplyType:
    source: str
    mix: tuple  # ((type name, percent), ...)

    def __post_init__(self):
        mix = self.mix.items() if isinstance(self.mix, dict) else self.mix
        mix = tuple((str(k), float(v)) for k, v in mix)
        for name, pct in mix:
            if pct < 0:
                raise DemandError(f"supply {self.source}: negative percentage for {name}")
        object.__setattr__(self, "mix", mix)

    @property
    def total(self) -> float:
        return math.fsum(p for _, p in self.mix)

    def problems(self):
        if abs(self.total - 100.0) > 1e-9:
            return [f"mix sums to {self.total:g}"]
        return []


def assign_types(supply: SupplyType, n: int) -> list:
    """Deterministic apportionment: the i-th arrival gets the type whose
    running quota is furthest behind, ties to the earlier listed type."""
    names = [k for k, _ in supply.mix]
    shares = [p / 100.0 for _, p in supply.mix]
    given = [0] * len(names)
    out = []
    for i in range(n):
        deficits = [(i + 1) * s - g for s, g in zip(shares, given)]
        k = max(range(len(names)), key=lambda j: (deficits[j], -j))
        given[k] += 1
        out.append(names[k])
    return out


def parse_supply_csv(text: str) -> dict:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != SUPPLY_HEADER:
        raise DemandError(f"row 1: header must be {','.join(SUPPLY_HEADER)}")
    mixes: dict = {}
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DemandError(f"row {row_no}: expected 3 columns")
        try:
            pct = float(row[2])
        except ValueError:
            raise DemandError(f"row {row_no}: percent must be a number") from None
        src, typ = row[0].strip(), row[1].strip()
        if typ in mixes.setdefault(src, {}):
            raise DemandError(f"row {row_no}: type {typ!r} listed twice for source {src!r}")
        mixes[src][typ] = pct
    return {src: SupplyType(src, tuple(m.items())) for src, m in mixes.items()}


def export_supply_csv(supplies: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUPPLY_HEADER)
    for src in sorted(supplies):
        for name, pct in supplies[src].mix:
            w.writerow([src, name, repr(float(pct))])
    return buf.getvalue()


# -- named settings -------------------------------------------------------

@dataclass
class DemandSettings:
    settings: dict = field(default_factory=dict)
    active: str | None = None

    def store(self, name: str, matrix: ODMatrix) -> None:
        if not name:
            raise DemandError("setting name must be non-empty")
        self.settings[name] = matrix
        if self.active is None:
            self.active = name

    def load(self, name: str) -> ODMatrix:
        try:
            return self.settings[name]
        except KeyError:
            available = ", ".join(sorted(self.settings)) or "none"
            raise DemandError(f"unknown demand setting {name!r}; available: {available}") from None

    def current(self) -> ODMatrix:
        if self.active is None:
            return ODMatrix()
        return self.load(self.active)


def store_setting(settings: DemandSettings, name: str, matrix: ODMatrix) -> DemandSettings:
    settings.store(name, matrix)
    return settings


def load_setting(settings: DemandSettings, name: str) -> ODMatrix:
    return settings.load(name)


def total_injections(profiles: Iterable[ArrivalProfile]) -> int:
    return sum(len(p) for p in profiles)

"""Ring-width and climate file readers, validated containers and writers.

Years are signed integers. Internally a year maps to the 0-based index
``year - year_min``; tree ages start at 1 on the first measured ring.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ParseError",
    "ValidationError",
    "RingWidthDataset",
    "AgeMatrix",
    "ClimateSeries",
    "parse_ring_widths",
    "parse_climate",
    "compute_ages",
    "align_climate",
    "write_ring_widths_csv",
    "write_tucson",
    "write_climate_csv",
]

_NA_TOKENS = {"", "na", "nan", "null", "none"}
TUCSON_STOP_VALUES = (999, -9999)
TUCSON_MISSING = -999


class ParseError(ValueError):
    """Malformed input file; ``line`` is the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())


class ValidationError(ValueError):
    """Input parsed but violates a dataset invariant."""


@dataclass(frozen=True)
class RingWidthDataset:
    """Ring widths for ``k`` trees on a common calendar.

    ``widths[i]`` holds one value per year from ``first_year[i]`` to
    ``last_year[i]`` inclusive; NaN marks an explicitly missing ring.
    """

    tree_ids: tuple[str, ...]
    first_year: np.ndarray
    last_year: np.ndarray
    widths: tuple[np.ndarray, ...]

    def __post_init__(self):
        first = np.asarray(self.first_year, dtype=np.int64)
        last = np.asarray(self.last_year, dtype=np.int64)
        widths = tuple(np.asarray(w, dtype=np.float64) for w in self.widths)
        object.__setattr__(self, "first_year", first)
        object.__setattr__(self, "last_year", last)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "tree_ids", tuple(str(t) for t in self.tree_ids))
        k = len(self.tree_ids)
        if k == 0:
            raise ValidationError("dataset contains no trees")
        if not (first.shape == last.shape == (k,)) or len(widths) != k:
            raise ValidationError("tree_ids, first_year, last_year and widths disagree in length")
        if len(set(self.tree_ids)) != k:
            raise ValidationError("duplicate tree ids")
        for i, tid in enumerate(self.tree_ids):
            if first[i] > last[i]:
                raise ValidationError(f"tree {tid}: first year {first[i]} after last year {last[i]}")
            if widths[i].shape != (last[i] - first[i] + 1,):
                raise ValidationError(
                    f"tree {tid}: {widths[i].size} widths for span {first[i]}-{last[i]}"
                )
            w = widths[i]
            bad = np.flatnonzero(~np.isnan(w) & ~(w > 0))
            if bad.size:
                year = int(first[i] + bad[0])
                raise ValidationError(f"tree {tid}, year {year}: width {w[bad[0]]} is not positive")
            if np.isnan(w).all():
                raise ValidationError(f"tree {tid}: no measured rings")
            w.setflags(write=False)

    @property
    def k(self) -> int:
        return len(self.tree_ids)

    @property
    def year_min(self) -> int:
        return int(self.first_year.min())

    @property
    def year_max(self) -> int:
        return int(self.last_year.max())

    @property
    def year_range(self) -> tuple[int, int]:
        return self.year_min, self.year_max

    @property
    def n(self) -> int:
        return self.year_max - self.year_min + 1

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.year_min, self.year_max + 1, dtype=np.int64)

    @property
    def segment_lengths(self) -> np.ndarray:
        return self.last_year - self.first_year + 1

    def to_long(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(tree_index, year, width)`` for every measured ring."""
        tree, year, width = [], [], []
        for i, w in enumerate(self.widths):
            keep = ~np.isnan(w)
            yrs = self.first_year[i] + np.flatnonzero(keep)
            tree.append(np.full(yrs.size, i, dtype=np.int64))
            year.append(yrs.astype(np.int64))
            width.append(w[keep])
        return np.concatenate(tree), np.concatenate(year), np.concatenate(width)

    def depth(self) -> np.ndarray:
        """Number of measured rings per calendar year."""
        _, year, _ = self.to_long()
        return np.bincount(year - self.year_min, minlength=self.n)

    def trees_overlapping(self, start_year: int) -> int:
        return int(np.sum(self.last_year >= start_year))

    def summary(self, climate: "ClimateSeries | None" = None) -> dict:
        seg = self.segment_lengths
        out = {
            "k": self.k,
            "n": self.n,
            "year_min": self.year_min,
            "year_max": self.year_max,
            "rings": int(sum(np.count_nonzero(~np.isnan(w)) for w in self.widths)),
            "segment_min": int(seg.min()),
            "segment_mean": float(seg.mean()),
            "segment_max": int(seg.max()),
        }
        if climate is not None and climate.observed.any():
            first_obs = int(climate.years[climate.observed][0])
            out["observed_start"] = first_obs
            out["trees_in_observed_span"] = self.trees_overlapping(first_obs)
        return out

    def subset(self, idx: Sequence[int]) -> "RingWidthDataset":
        idx = list(idx)
        return RingWidthDataset(
            tree_ids=tuple(self.tree_ids[i] for i in idx),
            first_year=self.first_year[idx],
            last_year=self.last_year[idx],
            widths=tuple(self.widths[i] for i in idx),
        )

    def equals(self, other: "RingWidthDataset") -> bool:
        if self.tree_ids != other.tree_ids:
            return False
        if not (np.array_equal(self.first_year, other.first_year)
                and np.array_equal(self.last_year, other.last_year)):
            return False
        return all(np.array_equal(a, b, equal_nan=True) for a, b in zip(self.widths, other.widths))


@dataclass(frozen=True)
class AgeMatrix:
    """Tree ages on the dataset calendar; ``dense`` is k x n with NaN off-span."""

    year_min: int
    first_year: np.ndarray
    last_year: np.ndarray
    dense: np.ndarray = field(repr=False)

    def age(self, tree: int, year: int) -> int | None:
        if not (self.first_year[tree] <= year <= self.last_year[tree]):
            return None
        return int(year - self.first_year[tree] + 1)

    def max_age(self) -> np.ndarray:
        return self.last_year - self.first_year + 1


def compute_ages(d: RingWidthDataset) -> AgeMatrix:
    """Ages ``a_it = t - f_i + 1`` over each tree's span."""
    dense = np.full((d.k, d.n), np.nan)
    for i in range(d.k):
        lo = d.first_year[i] - d.year_min
        hi = d.last_year[i] - d.year_min + 1
        dense[i, lo:hi] = np.arange(1, hi - lo + 1)
    dense.setflags(write=False)
    return AgeMatrix(d.year_min, d.first_year.copy(), d.last_year.copy(), dense)


@dataclass(frozen=True)
class ClimateSeries:
    """Annual climate values with NaN for unobserved years."""

    years: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        years = np.asarray(self.years, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64).copy()
        if years.shape != values.shape or years.ndim != 1:
            raise ValidationError("years and values must be 1-D and the same length")
        if years.size and np.any(np.diff(years) != 1):
            raise ValidationError("climate years must be consecutive and increasing")
        if np.isinf(values).any():
            raise ValidationError("observed climate values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return int(self.years.size)

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def m(self) -> int:
        """Number of years with missing climate."""
        return int(self.missing.sum())

    @property
    def is_contiguous(self) -> bool:
        obs = np.flatnonzero(self.observed)
        return obs.size == 0 or obs[-1] - obs[0] + 1 == obs.size

    def observed_span(self) -> tuple[int, int] | None:
        obs = np.flatnonzero(self.observed)
        if obs.size == 0:
            return None
        return int(self.years[obs[0]]), int(self.years[obs[-1]])

    def with_missing(self, mask: np.ndarray) -> "ClimateSeries":
        """Copy with additional years blanked out (used by hold-out refits)."""
        values = self.values.copy()
        values[np.asarray(mask, dtype=bool)] = np.nan
        return ClimateSeries(self.years, values)


def _is_na(token: str) -> bool:
    return token.strip().lower() in _NA_TOKENS


def _read_csv_rows(path: Path, header: Sequence[str]) -> Iterable[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        got = None
        for row in reader:
            if row and any(c.strip() for c in row):
                got = [c.strip().lower() for c in row]
                break
        if got is None:
            raise ParseError("empty file", path=str(path))
        if got != list(header):
            raise ParseError(f"expected header {','.join(header)}, got {','.join(got)}",
                             line=reader.line_num, path=str(path))
        for row in reader:
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}",
                                 line=reader.line_num, path=str(path))
            yield reader.line_num, [c.strip() for c in row]


def _parse_int(token: str, line: int, path: Path, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        try:
            f = float(token)
        except ValueError:
            raise ParseError(f"{what} {token!r} is not an integer", line=line, path=str(path)) from None
        if not f.is_integer():
            raise ParseError(f"{what} {token!r} is not an integer", line=line, path=str(path))
        return int(f)


def _parse_float(token: str, line: int, path: Path, what: str) -> float:
    if _is_na(token):
        return math.nan
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"{what} {token!r} is not a number", line=line, path=str(path)) from None
    if math.isinf(v):
        raise ParseError(f"{what} {token!r} is not finite", line=line, path=str(path))
    return v


def _assemble(records: dict[str, dict[int, float]]) -> RingWidthDataset:
    ids, first, last, widths = [], [], [], []
    for tid, by_year in records.items():
        years = sorted(by_year)
        f, l = years[0], years[-1]
        if len(years) != l - f + 1:
            have = set(years)
            gap = next(y for y in range(f, l + 1) if y not in have)
            raise ValidationError(
                f"tree {tid}: year {gap} absent inside span {f}-{l}; encode missing rings as NA"
            )
        ids.append(tid)
        first.append(f)
        last.append(l)
        widths.append(np.array([by_year[y] for y in years], dtype=np.float64))
    return RingWidthDataset(tuple(ids), np.array(first), np.array(last), tuple(widths))


def _parse_csv_long(path: Path) -> RingWidthDataset:
    records: dict[str, dict[int, float]] = {}
    for line, (tid, year_s, width_s) in _read_csv_rows(path, ("tree_id", "year", "width_mm")):
        if not tid:
            raise ParseError("empty tree_id", line=line, path=str(path))
        year = _parse_int(year_s, line, path, "year")
        width = _parse_float(width_s, line, path, "width")
        if not math.isnan(width) and width <= 0:
            raise ValidationError(f"tree {tid}, year {year}: width {width} is not positive (line {line})")
        by_year = records.setdefault(tid, {})
        if year in by_year:
            raise ParseError(f"duplicate year {year} for tree {tid}", line=line, path=str(path))
        by_year[year] = width
    if not records:
        raise ParseError("no data rows", path=str(path))
    return _assemble(records)


def _tucson_fields(body: str) -> list[str]:
    # Fixed 6-column fields when the layout allows it, else whitespace split.
    stripped = body.rstrip()
    if len(stripped) % 6 == 0 and all(stripped[i:i + 6].strip() for i in range(0, len(stripped), 6)):
        return [stripped[i:i + 6].strip() for i in range(0, len(stripped), 6)]
    return stripped.split()


def _parse_tucson(path: Path) -> RingWidthDataset:
    records: dict[str, dict[int, float]] = {}
    scale: dict[str, float] = {}
    pending: dict[str, list[tuple[int, int, int]]] = {}
    closed: set[str] = set()
    with open(path, encoding="utf-8-sig") as fh:
        lines = fh.read().splitlines()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        if len(raw) < 13:
            raise ParseError("line too short for Tucson layout", line=lineno, path=str(path))
        tid = raw[:8].strip()
        try:
            decade = int(raw[8:12])
        except ValueError:
            raise ParseError(f"bad decade field {raw[8:12]!r}", line=lineno, path=str(path)) from None
        tokens = _tucson_fields(raw[12:])
        try:
            values = [int(tok) for tok in tokens]
        except ValueError:
            raise ParseError("non-integer ring value", line=lineno, path=str(path)) from None
        if not tid:
            raise ParseError("empty series id", line=lineno, path=str(path))
        if len(values) > 10:
            raise ParseError(f"{len(values)} values on a decade line (max 10)", line=lineno, path=str(path))
        if tid in closed:
            raise ParseError(f"series {tid} continues after its stop marker", line=lineno, path=str(path))
        for j, v in enumerate(values):
            if v in TUCSON_STOP_VALUES:
                scale[tid] = 0.01 if v == 999 else 0.001
                closed.add(tid)
                if j != len(values) - 1:
                    raise ParseError("values after stop marker", line=lineno, path=str(path))
                break
            pending.setdefault(tid, []).append((decade + j, v, lineno))
    for tid, vals in pending.items():
        if tid not in closed:
            raise ParseError(f"series {tid} has no stop marker", path=str(path))
        unit = scale[tid]
        by_year: dict[int, float] = {}
        for year, v, lineno in vals:
            if year in by_year:
                raise ParseError(f"duplicate year {year} for series {tid}", line=lineno, path=str(path))
            if v == TUCSON_MISSING:
                by_year[year] = math.nan
            elif v <= 0:
                raise ValidationError(f"tree {tid}, year {year}: width {v * unit} is not positive (line {lineno})")
            else:
                by_year[year] = round(v * unit, 6)
        records[tid] = by_year
    if not records:
        raise ParseError("no series found", path=str(path))
    return _assemble(records)


def parse_ring_widths(path, format: str = "csv_long") -> RingWidthDataset:
    """Read ring widths from ``csv_long`` (tree_id,year,width_mm) or ``tucson``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "csv_long":
        return _parse_csv_long(path)
    if format == "tucson":
        return _parse_tucson(path)
    raise ValueError(f"unknown ring-width format {format!r}")


def parse_climate(path, allow_gaps: bool = False) -> ClimateSeries:
    """Read a ``year,temperature_c`` CSV; NA marks unobserved years.

    Years absent from the file inside its range are treated as missing.
    Observed values must form one contiguous block unless ``allow_gaps``.
    """
    path = Path(path)
    values: dict[int, float] = {}
    for line, (year_s, value_s) in _read_csv_rows(path, ("year", "temperature_c")):
        year = _parse_int(year_s, line, path, "year")
        if year in values:
            raise ParseError(f"duplicate year {year}", line=line, path=str(path))
        values[year] = _parse_float(value_s, line, path, "temperature")
    if not values:
        raise ParseError("no data rows", path=str(path))
    lo, hi = min(values), max(values)
    years = np.arange(lo, hi + 1, dtype=np.int64)
    vals = np.array([values.get(int(y), math.nan) for y in years])
    series = ClimateSeries(years, vals)
    if not allow_gaps and not series.is_contiguous:
        raise ValidationError("observed climate values are not contiguous; pass allow_gaps to treat gaps as missing")
    return series


def align_climate(climate: ClimateSeries, dataset: RingWidthDataset) -> ClimateSeries:
    """Re-index ``climate`` onto the dataset calendar.

    Years the climate file does not cover become missing; climate years
    outside the ring-width range are an error.
    """
    if climate.years.size and (climate.years[0] < dataset.year_min or climate.years[-1] > dataset.year_max):
        raise ValidationError(
            f"climate years {climate.years[0]}-{climate.years[-1]} fall outside "
            f"ring-width range {dataset.year_min}-{dataset.year_max}"
        )
    vals = np.full(dataset.n, np.nan)
    idx = climate.years - dataset.year_min
    vals[idx] = climate.values
    return ClimateSeries(dataset.years, vals)


def _fmt(v: float) -> str:
    return "NA" if math.isnan(v) else format(float(v), ".6g")


def write_ring_widths_csv(dataset: RingWidthDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tree_id", "year", "width_mm"])
        for i, tid in enumerate(dataset.tree_ids):
            for j, width in enumerate(dataset.widths[i]):
                w.writerow([tid, int(dataset.first_year[i] + j), _fmt(width)])


def write_climate_csv(climate: ClimateSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "temperature_c"])
        for y, v in zip(climate.years, climate.values):
            w.writerow([int(y), _fmt(v)])


def write_tucson(dataset: RingWidthDataset, path) -> None:
    """Write decade-block Tucson format in 0.01 mm units with 999 stop markers."""
    out = []
    for i, tid in enumerate(dataset.tree_ids):
        if len(tid) > 8:
            raise ValidationError(f"tree id {tid!r} longer than 8 characters")
        first, last = int(dataset.first_year[i]), int(dataset.last_year[i])
        vals = [TUCSON_MISSING if math.isnan(v) else int(round(v * 100)) for v in dataset.widths[i]]
        if any(v == 0 for v in vals):
            raise ValidationError(f"tree {tid}: width below 0.005 mm cannot be written in 0.01 mm units")
        vals.append(999)
        years = list(range(first, last + 2))
        row_start = 0
        while row_start < len(vals):
            y0 = years[row_start]
            # rows break on decade boundaries
            end = row_start + 1
            while end < len(vals) and years[end] % 10 != 0 and end - row_start < 10:
                end += 1
            chunk = vals[row_start:end]
            out.append(f"{tid:<8}{y0:4d}" + "".join(f"{v:6d}" for v in chunk))
            row_start = end
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")

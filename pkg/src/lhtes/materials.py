"""Material databases for the storage-device co-design toolkit.

Two CSV databases ship with the package: high-conductivity materials
(``hcm.csv``: name, k, c_p, rho, cost) and phase-change materials
(``pcm.csv``: name, k, c_p, rho, L, T_m).  All values are SI: W/(m K),
J/(kg K), kg/m^3, currency/kg, J/kg, K.  Attributes are log-transformed
and min-max scaled to [0, 1] before any learning; the scaling parameters
are retained so normalization is exactly invertible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

HCM_ATTRIBUTES = ("k", "c_p", "rho", "cost")
PCM_ATTRIBUTES = ("k", "c_p", "rho", "L", "T_m")


class MaterialError(ValueError):
    """Raised for malformed database files or invalid property values."""


@dataclass(frozen=True)
class MaterialRecord:
    """One material: physical properties plus kind-specific extras.

    HCM records carry ``cost`` and no ``L``/``T_m``; PCM records carry
    ``L``/``T_m`` and no ``cost``.  Every stored property is strictly
    positive.
    """

    name: str
    kind: str  # "hcm" | "pcm"
    k: float
    c_p: float
    rho: float
    cost: float | None = None
    L: float | None = None
    T_m: float | None = None

    def __post_init__(self):
        if self.kind not in ("hcm", "pcm"):
            raise MaterialError(f"unknown material kind {self.kind!r}")
        if self.kind == "hcm" and (self.cost is None or self.L is not None or self.T_m is not None):
            raise MaterialError(f"{self.name}: HCM records need cost and no L/T_m")
        if self.kind == "pcm" and (self.cost is not None or self.L is None or self.T_m is None):
            raise MaterialError(f"{self.name}: PCM records need L and T_m and no cost")
        for attr in attributes_for(self.kind):
            value = getattr(self, attr)
            if not np.isfinite(value) or value <= 0.0:
                raise MaterialError(f"{self.name}: non-positive property {attr} = {value}")

    def attribute_vector(self) -> np.ndarray:
        return np.array([getattr(self, a) for a in attributes_for(self.kind)], dtype=float)


@dataclass(frozen=True)
class NormalizationParams:
    """Per-attribute scaling retained for inverting the normalization.

    ``lo``/``hi`` are the min/max of each attribute after the log step
    (``log_applied`` records whether the log was taken; it always is in
    this toolkit since every attribute is strictly positive).
    """

    attributes: tuple
    log_applied: tuple
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(self.hi <= self.lo):
            bad = self.attributes[int(np.argmax(self.hi <= self.lo))]
            raise MaterialError(f"constant attribute column: {bad}")


def attributes_for(kind: str) -> tuple:
    return HCM_ATTRIBUTES if kind == "hcm" else PCM_ATTRIBUTES


def bundled_database_path(kind: str) -> Path:
    """Path of the CSV database shipped with the package."""
    return Path(resources.files("lhtes").joinpath(f"data/{kind}.csv"))


def load_database(path, kind: str) -> list:
    """Read a material CSV and return validated records.

    Raises :class:`MaterialError` on a missing file, a header not
    matching the schema for ``kind``, non-numeric or non-positive
    properties, and duplicate names.
    """
    attrs = attributes_for(kind)
    path = Path(path)
    if not path.exists():
        raise MaterialError(f"database file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MaterialError(f"{path}: empty file, expected header {('name',) + attrs}")
        if tuple(h.strip() for h in header) != ("name",) + attrs:
            raise MaterialError(f"{path}: wrong column set for kind {kind!r}: {header}")
        records = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(attrs) + 1:
                raise MaterialError(f"{path}:{lineno}: expected {len(attrs) + 1} columns, got {len(row)}")
            name = row[0].strip()
            if name in seen:
                raise MaterialError(f"{path}:{lineno}: duplicate name {name!r}")
            seen.add(name)
            try:
                values = [float(cell) for cell in row[1:]]
            except ValueError as exc:
                raise MaterialError(f"{path}:{lineno}: non-numeric property ({exc})") from None
            fields = dict(zip(attrs, values))
            records.append(MaterialRecord(name=name, kind=kind, **fields))
    return records


def records_matrix(records: list) -> np.ndarray:
    """Stack the physical attribute vectors of ``records`` into (n, d)."""
    if not records:
        raise MaterialError("no records")
    return np.stack([r.attribute_vector() for r in records])


def normalize(records: list) -> tuple:
    """Log-transform then min-max scale all attributes to [0, 1].

    Needs at least two records so every attribute has min < max.
    Returns the (n, d) normalized matrix and the scaling parameters.
    """
    if len(records) < 2:
        raise MaterialError("normalization needs at least 2 records")
    kind = records[0].kind
    raw = records_matrix(records)
    logged = np.log(raw)
    lo = logged.min(axis=0)
    hi = logged.max(axis=0)
    attrs = attributes_for(kind)
    params = NormalizationParams(
        attributes=attrs, log_applied=(True,) * len(attrs), lo=lo, hi=hi
    )
    return (logged - lo) / (hi - lo), params


def denormalize(row, params: NormalizationParams) -> np.ndarray:
    """Invert :func:`normalize` for one attribute row.

    Inputs are clamped to [0, 1] first: decoder outputs may overshoot
    the training range slightly and clamping keeps downstream physics
    positive and finite.
    """
    clamped = np.clip(np.asarray(row, dtype=float), 0.0, 1.0)
    logged = params.lo + clamped * (params.hi - params.lo)
    return np.exp(logged)


def find_record(records: list, name: str) -> MaterialRecord:
    for record in records:
        if record.name == name:
            return record
    available = ", ".join(r.name for r in records)
    raise MaterialError(f"unknown material {name!r}; available: {available}")

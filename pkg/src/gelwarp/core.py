"""Shared domain types: gels, lanes, landmark grids, standardization transforms.

Traces are equi-spaced 1-D intensity profiles, one per lane, grouped by gel.
All downstream stages (peak detection, alignment, dewarping, clustering)
consume the types defined here.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_REFERENCE_KDA = (200.0, 116.0, 97.0, 66.0, 45.0, 31.0, 21.5)


class GelwarpWarning(UserWarning):
    """Non-fatal data issue (degenerate lane, weakly identified gel, ...)."""


@dataclass(frozen=True)
class LandmarkGrid:
    """Equi-spaced candidate band positions nu_0 < ... < nu_{L+1} on [0, 1].

    ``L`` counts interior landmarks; peaks are only ever assigned to the
    interior positions 1..L.  The endpoints 0 and 1 anchor the warp field.
    """

    L: int

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"landmark count must be >= 1, got {self.L}")

    @property
    def nu(self) -> np.ndarray:
        """All L+2 positions l/(L+1), l = 0..L+1."""
        return np.arange(self.L + 2) / (self.L + 1)

    @property
    def spacing(self) -> float:
        return 1.0 / (self.L + 1)

    def interior(self) -> np.ndarray:
        return self.nu[1:-1]


@dataclass(frozen=True)
class Lane:
    index: int
    intensity: np.ndarray
    is_reference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "intensity", np.asarray(self.intensity, dtype=float))
        if self.intensity.ndim != 1:
            raise ValueError(f"lane {self.index}: intensity must be 1-D")


@dataclass(frozen=True)
class GelTrace:
    """All lanes of one gel, indices contiguous 1..N_g, at most one reference."""

    gel_id: str
    lanes: tuple[Lane, ...]

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        indices = [lane.index for lane in self.lanes]
        if sorted(indices) != list(range(1, len(indices) + 1)):
            raise ValueError(
                f"gel {self.gel_id}: lane indices must be contiguous 1..{len(indices)}, "
                f"got {sorted(indices)}"
            )
        lengths = {lane.intensity.size for lane in self.lanes}
        if len(lengths) > 1:
            raise ValueError(
                f"gel {self.gel_id}: lanes have differing lengths {sorted(lengths)}"
            )
        n_ref = sum(lane.is_reference for lane in self.lanes)
        if n_ref > 1:
            raise ValueError(f"gel {self.gel_id}: more than one reference lane")

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    def lane(self, index: int) -> Lane:
        for ln in self.lanes:
            if ln.index == index:
                return ln
        raise KeyError(f"gel {self.gel_id}: no lane {index}")

    def reference_lane(self) -> Lane:
        for ln in self.lanes:
            if ln.is_reference:
                return ln
        raise ValueError(f"gel {self.gel_id}: no reference lane flagged")

    def sample_lanes(self) -> tuple[Lane, ...]:
        return tuple(ln for ln in self.lanes if not ln.is_reference)


@dataclass(frozen=True)
class IntensityGrid:
    """Per-lane traces sampled on the common grid t_b = b/B, b = 1..B."""

    gels: tuple[GelTrace, ...]
    B: int

    def __post_init__(self):
        object.__setattr__(self, "gels", tuple(self.gels))
        if self.B < 1:
            raise ValueError("bin count B must be positive")
        for gel in self.gels:
            for lane in gel.lanes:
                if lane.intensity.size != self.B:
                    raise ValueError(
                        f"gel {gel.gel_id} lane {lane.index}: expected {self.B} bins, "
                        f"got {lane.intensity.size}"
                    )
                if not np.all(np.isfinite(lane.intensity)):
                    raise ValueError(
                        f"gel {gel.gel_id} lane {lane.index}: non-finite intensity"
                    )

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.B + 1) / self.B

    @property
    def n_lanes_total(self) -> int:
        return sum(gel.n_lanes for gel in self.gels)

    def gel(self, gel_id: str) -> GelTrace:
        for g in self.gels:
            if g.gel_id == gel_id:
                return g
        raise KeyError(f"no gel {gel_id}")

    def lane_keys(self, include_reference: bool = True) -> list[tuple[str, int]]:
        """(gel_id, lane_index) pairs in gel/lane order."""
        keys = []
        for gel in self.gels:
            for lane in gel.lanes:
                if include_reference or not lane.is_reference:
                    keys.append((gel.gel_id, lane.index))
        return keys

    def matrix(self, include_reference: bool = True) -> np.ndarray:
        """Stack traces into an (n_lanes, B) array, gel/lane order."""
        rows = []
        for gel in self.gels:
            for lane in gel.lanes:
                if include_reference or not lane.is_reference:
                    rows.append(lane.intensity)
        return np.array(rows)


@dataclass(frozen=True)
class Standardizer:
    """Location-scale transform x -> (x - center) / scale."""

    center: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.center) / self.scale

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.center

    def to_dict(self) -> dict:
        return {"center": self.center, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(center=float(d["center"]), scale=float(d["scale"]))


def fit_standardizer(values) -> Standardizer:
    """Mean/sd transform so that transformed values have mean 0, sample sd 1.

    Raises ValueError("zero variance") on a constant sequence.
    """
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 values to fit a standardizer")
    sd = float(np.std(x, ddof=1))
    if sd == 0.0 or not math.isfinite(sd):
        raise ValueError("zero variance")
    return Standardizer(center=float(np.mean(x)), scale=sd)


def _scale_lane_minmax(x: np.ndarray, label: str) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        warnings.warn(f"{label}: constant intensity, mapped to zeros", GelwarpWarning)
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _scale_lane_quantile(x: np.ndarray, label: str) -> np.ndarray:
    lo = float(np.quantile(x, 0.10))
    hi = float(np.quantile(x, 0.99))
    if hi <= lo:
        warnings.warn(f"{label}: degenerate quantile range, mapped to zeros", GelwarpWarning)
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def standardize_intensities(raw: IntensityGrid, method: str = "minmax") -> IntensityGrid:
    """Map every lane's intensities into [0, 1].

    ``minmax`` rescales by the lane's range; ``quantile`` subtracts the lane's
    10th percentile as background and scales by the 99th, clipping to [0, 1].
    Both are monotone per lane, so within-lane ordering is preserved.
    A constant lane maps to all zeros and emits a GelwarpWarning.
    """
    if method not in ("minmax", "quantile"):
        raise ValueError(f"unknown standardization method {method!r}")
    scale = _scale_lane_minmax if method == "minmax" else _scale_lane_quantile
    gels = []
    for gel in raw.gels:
        lanes = []
        for lane in gel.lanes:
            label = f"gel {gel.gel_id} lane {lane.index}"
            lanes.append(
                Lane(lane.index, scale(lane.intensity, label), lane.is_reference)
            )
        gels.append(GelTrace(gel.gel_id, tuple(lanes)))
    return IntensityGrid(tuple(gels), raw.B)


# ---------------------------------------------------------------------------
# File formats: traces CSV + sidecar manifest JSON
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("gel_id", "lane", "bin", "intensity")


def read_manifest(path) -> dict:
    """Sidecar manifest: per-gel reference lane, reference weights, masks.

    Schema: {"gel_id": {"reference_lane": int, "reference_kda": [floats],
    "masked_intervals": [[lo, hi], ...]}}.  All fields per gel optional.
    """
    with open(path) as f:
        manifest = json.load(f)
    if not isinstance(manifest, dict):
        raise ValueError(f"manifest {path}: expected a JSON object keyed by gel_id")
    for gel_id, entry in manifest.items():
        if not isinstance(entry, dict):
            raise ValueError(f"manifest {path}: entry for gel {gel_id} must be an object")
        if "reference_lane" in entry and not isinstance(entry["reference_lane"], int):
            raise ValueError(f"manifest {path}: gel {gel_id}: reference_lane must be an integer")
        for lo, hi in entry.get("masked_intervals", []):
            if not (0.0 <= lo < hi <= 1.0):
                raise ValueError(
                    f"manifest {path}: gel {gel_id}: bad masked interval [{lo}, {hi}]"
                )
    return manifest


def read_traces_csv(path, manifest: dict | None = None) -> IntensityGrid:
    """Load a traces CSV (columns gel_id,lane,bin,intensity, bins 1..B).

    Bins must be present and contiguous for every lane; every lane within a
    gel must have the same bin count.  Reference lanes are flagged from the
    manifest when given.
    """
    per_lane: dict[tuple[str, int], dict[int, float]] = {}
    gel_order: list[str] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACE_COLUMNS:
            raise ValueError(
                f"{path}: expected header {','.join(TRACE_COLUMNS)}, got {header}"
            )
        for row_num, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{row_num}: expected 4 columns, got {len(row)}")
            gel_id, lane_s, bin_s, val_s = row
            try:
                lane_i, bin_i, val = int(lane_s), int(bin_s), float(val_s)
            except ValueError as exc:
                raise ValueError(f"{path}:{row_num}: {exc}") from None
            key = (gel_id, lane_i)
            if key not in per_lane:
                per_lane[key] = {}
            if bin_i in per_lane[key]:
                raise ValueError(f"gel {gel_id} lane {lane_i}: duplicate bin {bin_i}")
            per_lane[key][bin_i] = val
            if gel_id not in gel_order:
                gel_order.append(gel_id)
    if not per_lane:
        raise ValueError(f"{path}: no data rows")

    B = None
    gels = []
    for gel_id in gel_order:
        entry = (manifest or {}).get(gel_id, {})
        ref_lane = entry.get("reference_lane")
        lanes = []
        for (g, lane_i), bins in per_lane.items():
            if g != gel_id:
                continue
            nb = len(bins)
            for b in range(1, nb + 1):
                if b not in bins:
                    raise ValueError(f"gel {gel_id} lane {lane_i}: missing bin {b}")
            if B is None:
                B = nb
            elif nb != B:
                raise ValueError(
                    f"gel {gel_id} lane {lane_i}: {nb} bins, expected {B}"
                )
            intensity = np.array([bins[b] for b in range(1, nb + 1)])
            lanes.append(Lane(lane_i, intensity, is_reference=(lane_i == ref_lane)))
        lanes.sort(key=lambda ln: ln.index)
        gels.append(GelTrace(gel_id, tuple(lanes)))
    return IntensityGrid(tuple(gels), B)


def write_traces_csv(grid: IntensityGrid, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for gel in grid.gels:
            for lane in gel.lanes:
                for b, val in enumerate(lane.intensity, start=1):
                    writer.writerow([gel.gel_id, lane.index, b, repr(float(val))])


def write_manifest(manifest: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

# moment_invariants.py - Second-order 3D moment invariants for grain shape statistics
#
# Moments are Riemann sums in voxel space: each solid voxel is a unit point
# mass at its center (i + 0.5, j + 0.5, k + 0.5).

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

import matgan_logger as _mlog

logger = _mlog.get("moments")

INVARIANT_NAMES = ("omega1", "omega2", "omega3")


class EmptyDistributionError(ValueError):
    pass


class InvariantMismatchError(ValueError):
    pass


class InvalidReason(enum.Enum):
    ZERO_VOLUME = "zero_volume"
    SINGULAR_O = "singular_O"
    NONFINITE = "nonfinite"


@dataclass(frozen=True)
class MomentSet:
    volume: int
    centroid: tuple
    mu200: float
    mu020: float
    mu002: float
    mu110: float
    mu101: float
    mu011: float

    def matrix(self):
        """Symmetric central second-moment matrix."""
        return np.array([[self.mu200, self.mu110, self.mu101],
                         [self.mu110, self.mu020, self.mu011],
                         [self.mu101, self.mu011, self.mu002]], dtype=np.float64)


@dataclass(frozen=True)
class OmegaInvariants:
    omega1: float
    omega2: float
    omega3: float
    valid: bool
    invalid_reason: InvalidReason = None
    volume: int = 0

    def value(self, which):
        return getattr(self, _check_which(which))


@dataclass
class DistributionSummary:
    which: str
    count: int
    mean: float
    std: float
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    omitted_count: int = 0

    @property
    def population(self):
        return self.count + self.omitted_count


@dataclass
class Comparison:
    which: str
    delta_mean: float
    std_ratio: float
    intersection: float
    low_tail_fraction: float
    signature_holds: bool
    reference: DistributionSummary = field(repr=False)
    candidate: DistributionSummary = field(repr=False)


def _check_which(which):
    if isinstance(which, int):
        which = f"omega{which}"
    if which not in INVARIANT_NAMES:
        raise ValueError(f"invariant must be one of {INVARIANT_NAMES}, got {which!r}")
    return which


# ========== MOMENTS ==========
def _moments_from_indices(idx, origin):
    """
    idx: (V, 3) integer voxel indices. Central moments use indices relative to
    their bounding-box corner, so integer translations give bitwise-equal results.
    """
    if idx.shape[0] == 0:
        return MomentSet(0, (0.0, 0.0, 0.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    corner = idx.min(axis=0)
    rel = (idx - corner).astype(np.float64)
    mean = rel.mean(axis=0)
    d = rel - mean
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    centroid = tuple(float(c) for c in (np.asarray(origin) + corner + mean + 0.5))
    return MomentSet(
        volume=int(idx.shape[0]),
        centroid=centroid,
        mu200=float(np.dot(x, x)),
        mu020=float(np.dot(y, y)),
        mu002=float(np.dot(z, z)),
        mu110=float(np.dot(x, y)),
        mu101=float(np.dot(x, z)),
        mu011=float(np.dot(y, z)),
    )


def compute_moments(grid):
    """Volume, centroid and central second moments of a binary grid."""
    data = grid.data if hasattr(grid, "data") else np.asarray(grid)
    if not np.all((data == 0) | (data == 1)):
        raise ValueError("compute_moments expects a binary grid")
    return _moments_from_indices(np.argwhere(data > 0), (0, 0, 0))


def omega_invariants(m):
    """Volume-normalized invariants; degenerate grains come back with valid=False."""
    if m.volume == 0:
        return OmegaInvariants(np.nan, np.nan, np.nan, False, InvalidReason.ZERO_VOLUME, 0)

    o1 = m.mu200 + m.mu020 + m.mu002
    o2 = (m.mu200 * m.mu020 + m.mu200 * m.mu002 + m.mu020 * m.mu002
          - m.mu110 ** 2 - m.mu101 ** 2 - m.mu011 ** 2)
    # determinant of the moment matrix, written out
    o3 = (m.mu200 * m.mu020 * m.mu002 + 2.0 * m.mu110 * m.mu101 * m.mu011
          - m.mu200 * m.mu011 ** 2 - m.mu020 * m.mu101 ** 2 - m.mu002 * m.mu110 ** 2)

    v = float(m.volume)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        omegas = (
            np.float64(3.0) * v ** (5.0 / 3.0) / np.float64(o1),
            np.float64(3.0) * v ** (10.0 / 3.0) / np.float64(o2),
            np.float64(v) ** 5 / np.float64(o3),
        )
    omegas = tuple(float(w) for w in omegas)

    if o1 <= 0.0 or o2 <= 0.0 or o3 <= 0.0:
        return OmegaInvariants(*omegas, False, InvalidReason.SINGULAR_O, m.volume)
    if not all(np.isfinite(omegas)):
        return OmegaInvariants(*omegas, False, InvalidReason.NONFINITE, m.volume)
    return OmegaInvariants(*omegas, True, None, m.volume)


def invariants_for_labels(volume, workers=1):
    """{label: OmegaInvariants} for every grain, ordered by label id."""
    boxes = ndimage.find_objects(volume.labels.astype(np.int64))

    def _one(item):
        label, box = item
        if box is None:
            return label, omega_invariants(_moments_from_indices(np.empty((0, 3), np.int64), (0, 0, 0)))
        idx = np.argwhere(volume.labels[box] == label)
        origin = tuple(s.start for s in box)
        return label, omega_invariants(_moments_from_indices(idx + np.asarray(origin), (0, 0, 0)))

    items = list(enumerate(boxes, start=1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, items))
    else:
        results = [_one(item) for item in items]
    invalid = sum(1 for _, inv in results if not inv.valid)
    logger.info(f"Computed invariants for {len(results)} grains ({invalid} nonphysical)")
    return dict(results)


# ========== DISTRIBUTIONS ==========
def summarize(population, bins=100, which="omega1"):
    which = _check_which(which)
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    population = list(population)
    if not population:
        raise ValueError("population is empty")

    values = np.array([inv.value(which) for inv in population if inv.valid], dtype=np.float64)
    omitted = len(population) - values.size
    if values.size == 0:
        raise EmptyDistributionError("empty distribution")
    if omitted:
        logger.warning(f"{which}: omitted {omitted}/{len(population)} nonphysical grains "
                       f"({100.0 * omitted / len(population):.2f}%)")

    counts, edges = np.histogram(values, bins=bins, range=(values.min(), values.max()))
    return DistributionSummary(
        which=which,
        count=int(values.size),
        mean=float(values.mean()),
        std=float(values.std()),
        bin_edges=edges,
        bin_counts=counts.astype(np.int64),
        omitted_count=int(omitted),
    )


def _cdf(summary, points):
    """Histogram mass below each point, with mass spread uniformly inside a bin."""
    cum = np.concatenate([[0.0], np.cumsum(summary.bin_counts, dtype=np.float64)])
    return np.interp(points, summary.bin_edges, cum / cum[-1])


def compare(a, b):
    """Compare candidate distribution `b` against reference `a`."""
    if a.which != b.which:
        raise InvariantMismatchError(f"cannot compare {a.which} with {b.which}")

    grid = np.union1d(a.bin_edges, b.bin_edges)
    mass_a = np.diff(_cdf(a, grid))
    mass_b = np.diff(_cdf(b, grid))
    intersection = float(np.clip(np.minimum(mass_a, mass_b).sum(), 0.0, 1.0))

    if a.std == 0.0:
        std_ratio = 1.0 if b.std == 0.0 else float("inf")
    else:
        std_ratio = b.std / a.std
    result = Comparison(
        which=a.which,
        delta_mean=b.mean - a.mean,
        std_ratio=std_ratio,
        intersection=intersection,
        low_tail_fraction=float(_cdf(b, np.array([a.bin_edges[0]]))[0]),
        signature_holds=bool(b.mean <= a.mean and b.std >= a.std),
        reference=a,
        candidate=b,
    )
    logger.info(f"{a.which}: Δmean={result.delta_mean:.4g} std ratio={result.std_ratio:.4g} "
                f"intersection={result.intersection:.3f}")
    return result


# ========== CSV EXPORT ==========
SUMMARY_HEADER = ["which", "count", "mean", "std", "omitted_count"]
BIN_HEADER = ["lower_edge", "upper_edge", "count"]


def write_summary_csv(path, summary):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_HEADER)
        w.writerow([summary.which, summary.count, repr(summary.mean), repr(summary.std),
                    summary.omitted_count])
        w.writerow(BIN_HEADER)
        for lo, hi, n in zip(summary.bin_edges[:-1], summary.bin_edges[1:], summary.bin_counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(n)])


def read_summary_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if len(rows) < 3 or rows[0] != SUMMARY_HEADER or rows[2] != BIN_HEADER:
        raise ValueError(f"{path}: not a distribution summary CSV")
    which, count, mean, std, omitted = rows[1]
    bins = rows[3:]
    if not bins:
        raise ValueError(f"{path}: summary has no histogram rows")
    edges = [float(r[0]) for r in bins] + [float(bins[-1][1])]
    return DistributionSummary(
        which=_check_which(which),
        count=int(count),
        mean=float(mean),
        std=float(std),
        bin_edges=np.array(edges, dtype=np.float64),
        bin_counts=np.array([int(r[2]) for r in bins], dtype=np.int64),
        omitted_count=int(omitted),
    )


def write_comparison_csv(path, result):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["key", "value"])
        w.writerow(["which", result.which])
        w.writerow(["reference_mean", repr(result.reference.mean)])
        w.writerow(["reference_std", repr(result.reference.std)])
        w.writerow(["candidate_mean", repr(result.candidate.mean)])
        w.writerow(["candidate_std", repr(result.candidate.std)])
        w.writerow(["delta_mean", repr(result.delta_mean)])
        w.writerow(["std_ratio", repr(result.std_ratio)])
        w.writerow(["intersection", repr(result.intersection)])
        w.writerow(["low_tail_fraction", repr(result.low_tail_fraction)])
        w.writerow(["signature_holds", str(result.signature_holds).lower()])


def write_invariants_csv(path, rows):
    """rows: (source, label, OmegaInvariants), written one grain per line."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["source", "label", "volume", *INVARIANT_NAMES, "valid", "invalid_reason"])
        for source, label, inv in rows:
            w.writerow([source, label, inv.volume, repr(inv.omega1), repr(inv.omega2), repr(inv.omega3),
                        str(inv.valid).lower(), inv.invalid_reason.value if inv.invalid_reason else ""])

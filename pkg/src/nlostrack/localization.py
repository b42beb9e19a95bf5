"""Elliptical back-projection, density fusion, and multi-target association.

Each fitted return time constrains the hidden target to an ellipse with
the laser spot and the detector's wall spot as foci (the path sum equals
c times the measured flight time, with the fitted width as the ellipse
thickness). Maps from several pixels are fused by a cellwise product,
assuming independent time measurements; the overlap of the ellipse bands
is the retrieved position. The search runs on a fixed horizontal plane,
which collapses the problem from a volume to an area.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as _ndimage

from .geometry import SPEED_OF_LIGHT, Point3
from .processing import PeakEstimate


class InfeasibleTimeError(ValueError):
    """The measured path is shorter than the focus separation: no ellipse exists."""


class EmptyIntersectionError(ValueError):
    """The fused density underflowed to zero everywhere: inconsistent measurements."""


class TooManyTargetsError(ValueError):
    """More simultaneous targets requested than the method can resolve."""


class AmbiguousAssociationError(RuntimeError):
    """Two peak-to-target assignments score within 1 percent of each other.

    Carries both candidate solutions so callers can surface them.
    """

    def __init__(self, message, best, second, best_score, second_score):
        super().__init__(message)
        self.best = best
        self.second = second
        self.best_score = best_score
        self.second_score = second_score


@dataclass(frozen=True)
class GridSpec:
    """A regular (x, y) cell grid on the fixed scattering plane z_plane."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    resolution: float = 0.02
    z_plane: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("grid extent must satisfy x_min < x_max and y_min < y_max")
        if not (math.isfinite(self.resolution) and self.resolution > 0):
            raise ValueError(f"resolution must be > 0, got {self.resolution!r}")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid must have at least 2 cells per axis")

    @property
    def nx(self) -> int:
        return int(math.floor((self.x_max - self.x_min) / self.resolution + 1e-9))

    @property
    def ny(self) -> int:
        return int(math.floor((self.y_max - self.y_min) / self.resolution + 1e-9))

    @property
    def cell_area(self) -> float:
        return self.resolution * self.resolution

    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.resolution

    def y_centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.ny) + 0.5) * self.resolution

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class ProbabilityMap:
    """Non-negative density over a grid; values[iy, ix] follows y rows, x columns."""

    grid: GridSpec
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.grid.ny, self.grid.nx):
            raise ValueError(
                f"values shape {values.shape} does not match grid ({self.grid.ny}, {self.grid.nx})"
            )
        if not np.all(np.isfinite(values)) or values.min() < 0:
            raise ValueError("map values must be finite and >= 0")
        if self.normalized:
            total = values.sum() * self.grid.cell_area
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"normalized map must integrate to 1, got {total!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def argmax_cell(self) -> tuple[int, int]:
        iy, ix = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(iy), int(ix)


@dataclass(frozen=True)
class TrackEstimate:
    """A localized target on the scattering plane."""

    position: tuple[float, float]
    sigma_x: float
    sigma_y: float
    peak_value: float
    target_label: str = "target-1"

    def __post_init__(self):
        if not (self.sigma_x >= 0 and self.sigma_y >= 0):
            raise ValueError("sigma_x and sigma_y must be >= 0")


def backproject(peak: PeakEstimate, r_l: Point3, r_i: Point3, grid: GridSpec) -> ProbabilityMap:
    """Map one fitted return time onto its ellipse band over the grid.

    Cell value is exp(-(path - c t)^2 / (2 (c sigma)^2)) with path the
    two-bounce distance through the cell center; the fitted time width is
    converted to meters so the exponent is dimensionless.
    """
    from . import _kernels

    ct = SPEED_OF_LIGHT * peak.t_s
    c_sigma = SPEED_OF_LIGHT * peak.sigma_s
    baseline = r_l.distance_to(r_i)
    if ct <= baseline:
        raise InfeasibleTimeError(
            f"c*t = {ct:.4f} m does not exceed the focus separation {baseline:.4f} m"
        )
    values = _kernels.ellipse_map(
        grid.x_centers(), grid.y_centers(), grid.z_plane,
        r_l.as_tuple(), r_i.as_tuple(), ct, c_sigma,
    )
    return ProbabilityMap(grid=grid, values=values, normalized=False)


def _log_product(maps: list[ProbabilityMap]) -> np.ndarray:
    # Cellwise product accumulated in log space; map order is fixed by the
    # caller so the summation order (and hence the result) is deterministic.
    with np.errstate(divide="ignore"):
        logs = [np.log(m.values) for m in maps]
    return np.sum(logs, axis=0)


def fuse(maps: list[ProbabilityMap]) -> ProbabilityMap:
    """Cellwise product of per-pixel densities, normalized to integrate to 1."""
    if len(maps) < 1:
        raise ValueError("need at least one map to fuse")
    grid = maps[0].grid
    for m in maps[1:]:
        if m.grid != grid:
            raise ValueError("all maps must share the same grid")
    log_prod = _log_product(maps)
    peak_log = float(np.max(log_prod))
    if not np.isfinite(peak_log) or math.exp(peak_log) == 0.0:
        raise EmptyIntersectionError(
            "product of densities underflowed to zero everywhere; measurements are inconsistent"
        )
    work = np.exp(log_prod - peak_log)
    values = work / (work.sum() * grid.cell_area)
    return ProbabilityMap(grid=grid, values=values, normalized=True)


def localize(pmap: ProbabilityMap, target_label: str = "target-1") -> TrackEstimate:
    """Extract a point estimate and spreads from a normalized density.

    Position is the probability-weighted centroid of the connected region
    of cells at or above half the peak that contains the global maximum
    (so a secondary lobe does not drag the estimate). The spreads are the
    square roots of the second central moments of the whole map.

    This is a map-only operation and inherits the grid's sampling limits;
    associate_and_localize sharpens its tracks afterwards against the
    continuous density defined by the measured times.
    """
    if not pmap.normalized:
        raise ValueError("localize requires a normalized map; fuse() produces one")
    values = pmap.values
    grid = pmap.grid
    iy0, ix0 = pmap.argmax_cell()
    mask = values >= 0.5 * values[iy0, ix0]
    labels, _ = _ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    region = labels == labels[iy0, ix0]

    xx, yy = np.meshgrid(grid.x_centers(), grid.y_centers())
    w_region = values[region]
    pos_x = float((w_region * xx[region]).sum() / w_region.sum())
    pos_y = float((w_region * yy[region]).sum() / w_region.sum())

    cell_mass = values * grid.cell_area
    mean_x = float((cell_mass * xx).sum())
    mean_y = float((cell_mass * yy).sum())
    var_x = float((cell_mass * (xx - mean_x) ** 2).sum())
    var_y = float((cell_mass * (yy - mean_y) ** 2).sum())

    return TrackEstimate(
        position=(pos_x, pos_y),
        sigma_x=math.sqrt(max(var_x, 0.0)),
        sigma_y=math.sqrt(max(var_y, 0.0)),
        peak_value=float(values[iy0, ix0]),
        target_label=target_label,
    )


def _refine_position(seed_xy, z, measurements, grid, max_iter=25):
    """Continuous Gauss-Newton maximization of the fused log-density.

    ``measurements`` is a list of (r_l, r_i, ct, c_sigma). The grid only
    samples the density at cell centers, which lets the argmax slide along
    a narrow ridge by a few cells; solving on the continuous coordinates
    removes that quantization. Returns the seed unchanged on breakdown.
    """
    x, y = seed_xy
    for _ in range(max_iter):
        jac = np.empty((len(measurements), 2))
        res = np.empty(len(measurements))
        for k, (r_l, r_i, ct, c_sigma) in enumerate(measurements):
            d1 = math.sqrt((x - r_l.x) ** 2 + (y - r_l.y) ** 2 + (z - r_l.z) ** 2)
            d2 = math.sqrt((x - r_i.x) ** 2 + (y - r_i.y) ** 2 + (z - r_i.z) ** 2)
            if d1 == 0.0 or d2 == 0.0:
                return seed_xy
            res[k] = (d1 + d2 - ct) / c_sigma
            jac[k, 0] = ((x - r_l.x) / d1 + (x - r_i.x) / d2) / c_sigma
            jac[k, 1] = ((y - r_l.y) / d1 + (y - r_i.y) / d2) / c_sigma
        jtj = jac.T @ jac
        try:
            step = np.linalg.solve(jtj + 1e-12 * np.eye(2), -(jac.T @ res))
        except np.linalg.LinAlgError:
            return seed_xy
        limit = 10.0 * grid.resolution
        norm = float(np.hypot(step[0], step[1]))
        if norm > limit:
            step *= limit / norm
        x_new, y_new = x + float(step[0]), y + float(step[1])
        x_new = min(max(x_new, grid.x_min), grid.x_max)
        y_new = min(max(y_new, grid.y_min), grid.y_max)
        if abs(x_new - x) < 1e-12 and abs(y_new - y) < 1e-12:
            break
        x, y = x_new, y_new
    return x, y


# ---------------------------------------------------------------------------
# Peak-to-target association
# ---------------------------------------------------------------------------


def _pixel_assignments(n_peaks: int, k_targets: int):
    # Ways one pixel's peaks can serve the targets: each target gets at most
    # one peak, each peak serves at most one target, and as many pairings as
    # possible are made (min(n_peaks, k) of them).
    if n_peaks >= k_targets:
        for chosen in itertools.permutations(range(n_peaks), k_targets):
            yield tuple(chosen)  # index: target -> peak
    else:
        for targets in itertools.permutations(range(k_targets), n_peaks):
            assignment = [None] * k_targets
            for peak_idx, t in enumerate(targets):
                assignment[t] = peak_idx
            yield tuple(assignment)


def associate_and_localize(
    peaks_per_pixel: list[list[PeakEstimate]],
    r_l: Point3,
    pixels: list[Point3],
    grid: GridSpec,
    k_targets: int = 1,
    ambiguity_margin: float = 0.01,
    return_maps: bool = False,
):
    """Assign per-pixel peaks to targets and localize each target.

    Exhaustively enumerates peak-to-target assignments (tiny at this
    scale), scores each by the product over targets of the peak value of
    the target's fused density, evaluated at its continuous optimum (a
    pure consistency measure), and localizes the winner. Targets must be
    seen by at least two pixels.

    Raises AmbiguousAssociationError when the runner-up assignment scores
    within ``ambiguity_margin`` (relative) of the winner, carrying both
    solutions; TooManyTargetsError for k_targets > 2.
    """
    if k_targets > 2:
        raise TooManyTargetsError(
            f"k_targets={k_targets}: resolving more than two simultaneous targets is unsupported"
        )
    if k_targets < 1:
        raise ValueError("k_targets must be >= 1")
    if len(peaks_per_pixel) != len(pixels):
        raise ValueError("peaks_per_pixel and pixels must align")
    if any(len(p) == 0 for p in peaks_per_pixel):
        raise ValueError("every pixel must contribute at least one peak")

    # Back-project each (pixel, peak) once; associations only recombine them.
    log_maps: dict[tuple[int, int], np.ndarray] = {}
    infeasible: set[tuple[int, int]] = set()
    last_error: Exception | None = None
    for ipix, (pixel, peaks) in enumerate(zip(pixels, peaks_per_pixel)):
        for ipk, peak in enumerate(peaks):
            try:
                m = backproject(peak, r_l, pixel, grid)
            except InfeasibleTimeError as exc:
                infeasible.add((ipix, ipk))
                last_error = exc
                continue
            with np.errstate(divide="ignore"):
                log_maps[(ipix, ipk)] = np.log(m.values)

    def _measurements(det):
        return [
            (
                r_l,
                pixels[ipix],
                SPEED_OF_LIGHT * peaks_per_pixel[ipix][ipk].t_s,
                SPEED_OF_LIGHT * peaks_per_pixel[ipix][ipk].sigma_s,
            )
            for ipix, ipk in det
        ]

    def _continuous_score(pos, measurements):
        x, y = pos
        z = grid.z_plane
        total = 0.0
        for m_l, m_i, ct, c_sigma in measurements:
            d1 = math.sqrt((x - m_l.x) ** 2 + (y - m_l.y) ** 2 + (z - m_l.z) ** 2)
            d2 = math.sqrt((x - m_i.x) ** 2 + (y - m_i.y) ** 2 + (z - m_i.z) ** 2)
            total -= 0.5 * ((d1 + d2 - ct) / c_sigma) ** 2
        return total

    candidates = {}
    for combo in itertools.product(
        *(_pixel_assignments(len(p), k_targets) for p in peaks_per_pixel)
    ):
        detections = []
        for t in range(k_targets):
            det = tuple(
                (ipix, combo[ipix][t])
                for ipix in range(len(pixels))
                if combo[ipix][t] is not None
            )
            detections.append(det)
        key = frozenset(detections)  # quotient out target relabeling
        if key in candidates:
            continue
        if any(len(det) < 2 for det in detections):
            continue
        if any(pair in infeasible for det in detections for pair in det):
            continue
        # Score each target at the continuous optimum of its fused density
        # (seeded at the grid argmax): the sampled cell maximum wobbles by a
        # few percent with cell alignment, which would swamp the 1 percent
        # ambiguity margin.
        score = 0.0
        per_target_logs = []
        positions = []
        valid = True
        for det in detections:
            log_prod = np.sum([log_maps[pair] for pair in det], axis=0)
            if not np.isfinite(np.max(log_prod)):
                valid = False
                break
            per_target_logs.append(log_prod)
            iy0, ix0 = np.unravel_index(int(np.argmax(log_prod)), log_prod.shape)
            seed = (float(grid.x_centers()[ix0]), float(grid.y_centers()[iy0]))
            meas = _measurements(det)
            pos = _refine_position(seed, grid.z_plane, meas, grid)
            positions.append(pos)
            score += _continuous_score(pos, meas)
        if not valid:
            continue
        candidates[key] = (score, detections, per_target_logs, positions)

    if not candidates:
        if last_error is not None:
            raise InfeasibleTimeError(
                "no feasible assignment: " + str(last_error)
            ) from last_error
        raise EmptyIntersectionError("no assignment with every target seen by two pixels")

    def _solve(entry):
        _, detections, per_target_logs, positions = entry
        solved = []
        for log_prod, pos in zip(per_target_logs, positions):
            peak_log = float(np.max(log_prod))
            if math.exp(peak_log) == 0.0:
                raise EmptyIntersectionError(
                    "fused density underflowed to zero for one target"
                )
            work = np.exp(log_prod - peak_log)
            fused = ProbabilityMap(
                grid=grid, values=work / (work.sum() * grid.cell_area), normalized=True
            )
            coarse = localize(fused)
            solved.append((
                TrackEstimate(
                    position=pos, sigma_x=coarse.sigma_x, sigma_y=coarse.sigma_y,
                    peak_value=coarse.peak_value,
                ),
                fused,
            ))
        solved.sort(key=lambda pair: pair[0].position)
        tracks = [
            TrackEstimate(
                position=tr.position, sigma_x=tr.sigma_x, sigma_y=tr.sigma_y,
                peak_value=tr.peak_value, target_label=f"target-{i + 1}",
            )
            for i, (tr, _) in enumerate(solved)
        ]
        return tracks, [fused for _, fused in solved]

    def _tracks_for(entry):
        return _solve(entry)[0]

    ranked = sorted(candidates.values(), key=lambda e: e[0], reverse=True)
    # Prefer assignments whose targets resolve to distinct positions; fall
    # back to the full ranking when none do.
    def _distinct(entry):
        positions = entry[3]
        for a in range(len(positions)):
            for b in range(a + 1, len(positions)):
                dx = positions[a][0] - positions[b][0]
                dy = positions[a][1] - positions[b][1]
                if math.hypot(dx, dy) <= grid.resolution:
                    return False
        return True

    pool = [e for e in ranked if _distinct(e)] or ranked
    best = pool[0]
    if len(pool) > 1:
        second = pool[1]
        # Scores are log products; a relative gap below the margin in linear
        # space means a log difference below about the margin itself.
        if best[0] - second[0] < -math.log1p(-ambiguity_margin):
            raise AmbiguousAssociationError(
                f"top assignments score within {ambiguity_margin:.0%} of each other",
                best=_tracks_for(best),
                second=_tracks_for(second),
                best_score=best[0],
                second_score=second[0],
            )
    tracks, maps = _solve(best)
    return (tracks, maps) if return_maps else tracks

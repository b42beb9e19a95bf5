"""End-to-end experiment runners: single target, two targets, baseline sweep.

Each runner drives the full chain (simulate signal and background, apply
the calibration offset, crop to the window of interest, subtract, detect
and fit peaks, back-project and fuse) against the scene's ground truth,
which only the simulation stage is allowed to read.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .acquisition import (
    AcquisitionParams,
    TransientHistogram,
    calibration_offset_s,
    simulate_background,
    simulate_histogram,
)
from .geometry import SPEED_OF_LIGHT, HiddenObject, Point3, Scene
from .localization import (
    AmbiguousAssociationError,
    EmptyIntersectionError,
    GridSpec,
    InfeasibleTimeError,
    ProbabilityMap,
    TooManyTargetsError,
    TrackEstimate,
    associate_and_localize,
)
from .processing import (
    PeakEstimate,
    TimeWindow,
    apply_offset,
    crop,
    detect_peaks,
    fit_peaks,
    subtract_background,
)


class PipelineError(RuntimeError):
    """A per-pixel processing stage failed; the message names the pixel."""


# Desk-scale default layout: wall plane at y = 0, hidden region at y > 0,
# origin at the right-hand corner. Spots hug the corner so that every
# grid cell stays inside the unambiguous range at 40 MHz.
DEFAULT_LASER = Point3(-0.5, 0.0, 1.15)
DEFAULT_PIXELS = (
    Point3(-0.9, 0.0, 1.0),
    Point3(-0.62, 0.0, 1.08),
    Point3(-0.38, 0.0, 0.95),
    Point3(-0.1, 0.0, 1.05),
)
DEFAULT_GRID = GridSpec(x_min=-3.0, x_max=3.0, y_min=0.0, y_max=4.0, resolution=0.02, z_plane=1.0)


def corner_scene(
    object_positions,
    reflectivity: float = 3.0,
    pixels=DEFAULT_PIXELS,
    laser_spot: Point3 = DEFAULT_LASER,
    scatterers=(),
    scatter_height_z: float = 1.0,
    standoff_m: float = 2.0,
) -> Scene:
    """Convenience builder for the bundled corner layout."""
    objects = tuple(
        HiddenObject(Point3(x, y, scatter_height_z), reflectivity, f"person-{i + 1}")
        for i, (x, y) in enumerate(object_positions)
    )
    return Scene(
        laser_spot=laser_spot,
        pixels=tuple(pixels),
        objects=objects,
        background_scatterers=tuple(scatterers),
        scatter_height_z=scatter_height_z,
        standoff_m=standoff_m,
    )


def auto_time_window(
    r_l: Point3, r_i: Point3, grid: GridSpec, params: AcquisitionParams
) -> TimeWindow:
    """Window of interest for one pixel: flight times reachable from the grid."""
    xs = grid.x_centers()[np.newaxis, :]
    ys = grid.y_centers()[:, np.newaxis]
    z = grid.z_plane
    d1 = np.sqrt((xs - r_l.x) ** 2 + (ys - r_l.y) ** 2 + (z - r_l.z) ** 2)
    d2 = np.sqrt((xs - r_i.x) ** 2 + (ys - r_i.y) ** 2 + (z - r_i.z) ** 2)
    paths = d1 + d2
    margin = 6.0 * params.irf_sigma_s + 25.0 * params.bin_width_s
    start = max(0.0, float(paths.min()) / SPEED_OF_LIGHT - margin)
    end = min(params.window_s, float(paths.max()) / SPEED_OF_LIGHT + margin)
    if start >= end:
        raise ValueError("grid lies entirely beyond the unambiguous range for this pixel")
    return TimeWindow(start, end)


@dataclass
class ScenarioResult:
    """Tracks plus the per-pixel intermediates that produced them."""

    tracks: list[TrackEstimate]
    peaks_per_pixel: list[list[PeakEstimate]]
    used_pixels: list[int]
    status: str  # "ok", "ambiguous" or "no_target"
    notes: list[str] = field(default_factory=list)
    subtracted: list[TransientHistogram] = field(default_factory=list)
    fused_maps: list[ProbabilityMap] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status in ("ok", "ambiguous") and bool(self.tracks)


def _process_pixel(signal, background, r_l, r_i, offset_s, grid, params,
                   k_targets, min_snr, window=None):
    signal = apply_offset(signal, offset_s)
    background = apply_offset(background, offset_s)
    win = window if window is not None else auto_time_window(r_l, r_i, grid, params)
    signal = crop(signal, win)
    background = crop(background, win)
    cleaned = subtract_background(signal, background)
    seeds = detect_peaks(cleaned, max_peaks=k_targets, min_snr=min_snr,
                         irf_sigma_s=params.irf_sigma_s)
    if not seeds:
        return cleaned, []
    peaks = fit_peaks(cleaned, seeds, irf_sigma_guess=params.irf_sigma_s)
    return cleaned, peaks


def reconstruct_from_histograms(
    signal_hists: list[TransientHistogram],
    background_hists: list[TransientHistogram],
    laser_spot: Point3,
    pixels: list[Point3],
    grid: GridSpec,
    params: AcquisitionParams,
    offset_s: float,
    k_targets: int = 1,
    min_snr: float = 4.0,
    window: TimeWindow | None = None,
    on_ambiguous: str = "raise",
) -> ScenarioResult:
    """Run the retrieval chain on already-acquired raw histograms.

    Pixels whose histogram shows no usable return are dropped with a note;
    if fewer than two remain, or the surviving measurements cannot be
    reconciled, the result reports ``no_target`` instead of raising.
    Processing failures propagate as PipelineError naming the pixel.
    """
    if len(pixels) < 2:
        raise ValueError("localization needs at least two detector pixels")
    if len(signal_hists) != len(pixels) or len(background_hists) != len(pixels):
        raise ValueError("need one signal and one background histogram per pixel")
    if k_targets > 2:
        raise TooManyTargetsError(f"k_targets={k_targets} exceeds the two-target capacity")

    notes: list[str] = []
    peaks_per_pixel: list[list[PeakEstimate]] = []
    subtracted: list[TransientHistogram] = []
    used: list[int] = []
    for i, (sig, bg) in enumerate(zip(signal_hists, background_hists)):
        try:
            cleaned, peaks = _process_pixel(
                sig, bg, laser_spot, pixels[i], offset_s, grid, params,
                k_targets, min_snr, window=window,
            )
        except Exception as exc:
            raise PipelineError(f"pixel {i}: {exc}") from exc
        subtracted.append(cleaned)
        if peaks:
            used.append(i)
            peaks_per_pixel.append(peaks)
        else:
            notes.append(f"pixel {i}: no peak above threshold")

    result = ScenarioResult(
        tracks=[], peaks_per_pixel=peaks_per_pixel, used_pixels=used,
        status="no_target", notes=notes, subtracted=subtracted,
    )
    if len(used) < 2:
        result.notes.append("no target found: fewer than two pixels with usable returns")
        return result

    try:
        tracks, maps = associate_and_localize(
            peaks_per_pixel, laser_spot, [pixels[i] for i in used], grid,
            k_targets=k_targets, return_maps=True,
        )
        result.status = "ok"
    except AmbiguousAssociationError as exc:
        if on_ambiguous != "warn":
            raise
        warnings.warn(str(exc), stacklevel=2)
        result.status = "ambiguous"
        result.notes.append(
            "ambiguous association; best "
            + _fmt_tracks(exc.best) + " vs runner-up " + _fmt_tracks(exc.second)
        )
        tracks, maps = exc.best, []
    except (EmptyIntersectionError, InfeasibleTimeError) as exc:
        result.notes.append(f"no target found: {exc}")
        return result

    result.tracks = tracks
    result.fused_maps = maps
    return result


def run_scenario(
    scene: Scene,
    params: AcquisitionParams,
    grid: GridSpec,
    k_targets: int = 1,
    min_snr: float = 4.0,
    on_ambiguous: str = "raise",
) -> ScenarioResult:
    """Simulate the scene and run the full retrieval on the result."""
    signal, background = [], []
    for i in range(scene.num_pixels):
        try:
            signal.append(simulate_histogram(scene, i, params))
            background.append(simulate_background(scene, i, params))
        except Exception as exc:
            raise PipelineError(f"pixel {i}: {exc}") from exc
    return reconstruct_from_histograms(
        signal, background, scene.laser_spot, list(scene.pixels), grid, params,
        offset_s=calibration_offset_s(scene, params),
        k_targets=k_targets, min_snr=min_snr, on_ambiguous=on_ambiguous,
    )


def _fmt_tracks(tracks) -> str:
    return "[" + ", ".join(f"({t.position[0]:.2f}, {t.position[1]:.2f})" for t in tracks) + "]"


def run_two_person(
    scene: Scene, params: AcquisitionParams, grid: GridSpec, min_snr: float = 4.0
) -> ScenarioResult:
    """Two-target variant; an ambiguous association degrades to a warning."""
    if len(scene.objects) != 2:
        raise ValueError("two-person study needs exactly two hidden objects in the scene")
    return run_scenario(scene, params, grid, k_targets=2, min_snr=min_snr, on_ambiguous="warn")


# ---------------------------------------------------------------------------
# Detector-baseline sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    """Two-detector baseline study: D1 fixed, D2 scanned along x."""

    laser_spot: Point3
    d1_position: Point3
    d2_x_range: tuple[float, float, int]  # (x_min, x_max, steps)
    object_positions: tuple[Point3, ...]
    acquisition: AcquisitionParams
    grid: GridSpec
    trials_per_point: int = 50
    object_reflectivity: float = 3.0
    standoff_m: float = 2.0
    min_snr: float = 4.0

    def __post_init__(self):
        lo, hi, steps = self.d2_x_range
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("d2_x_range bounds must be finite")
        if int(steps) < 2:
            raise ValueError("d2_x_range needs at least 2 steps")
        if self.trials_per_point < 10:
            raise ValueError("trials_per_point must be >= 10")
        if not self.object_positions:
            raise ValueError("need at least one object position")
        object.__setattr__(self, "object_positions", tuple(self.object_positions))

    def d2_positions(self) -> list[Point3]:
        lo, hi, steps = self.d2_x_range
        return [
            Point3(float(x), self.d1_position.y, self.d1_position.z)
            for x in np.linspace(lo, hi, int(steps))
        ]


@dataclass(frozen=True)
class SweepRow:
    """Aggregates for one (baseline, object) cell of the sweep.

    error_* is the deviation of the trial-mean position from truth
    (accuracy); sigma_* is the spread of retrieved positions over trials
    (precision); pdf_sigma_* is the mean width of the fused density,
    the alternative reading of precision.
    """

    baseline_m: float
    object_index: int
    truth_x: float
    truth_y: float
    error_x: float
    error_y: float
    sigma_x: float
    sigma_y: float
    pdf_sigma_x: float
    pdf_sigma_y: float
    pdf_sigma_x_se: float
    pdf_sigma_y_se: float
    n_trials: int
    n_failed: int
    valid: bool


@dataclass(frozen=True)
class SweepResult:
    config: SweepConfig
    rows: tuple[SweepRow, ...]

    def rows_for_object(self, object_index: int) -> list[SweepRow]:
        return [r for r in self.rows if r.object_index == object_index]


def _trial_seed(master: int, step: int, obj: int, trial: int) -> int:
    return int(np.random.SeedSequence([master, step, obj, trial]).generate_state(1)[0])


def run_baseline_sweep(config: SweepConfig) -> SweepResult:
    """Monte-Carlo sweep of the D1-D2 separation, one row per (baseline, object).

    Deterministic given the config (trial seeds derive from the
    acquisition seed). Steps where more than half the trials fail to
    localize are marked invalid rather than aborting the sweep.
    """
    master = config.acquisition.rng_seed
    rows: list[SweepRow] = []
    for si, d2 in enumerate(config.d2_positions()):
        baseline = abs(d2.x - config.d1_position.x)
        for oi, opos in enumerate(config.object_positions):
            xs, ys, pdf_sx, pdf_sy = [], [], [], []
            failed = 0
            for trial in range(config.trials_per_point):
                params = replace(
                    config.acquisition, rng_seed=_trial_seed(master, si, oi, trial)
                )
                try:
                    scene = Scene(
                        laser_spot=config.laser_spot,
                        pixels=(config.d1_position, d2),
                        objects=(HiddenObject(opos, config.object_reflectivity, "target"),),
                        scatter_height_z=config.grid.z_plane,
                        standoff_m=config.standoff_m,
                    )
                    result = run_scenario(
                        scene, params, config.grid, k_targets=1,
                        min_snr=config.min_snr, on_ambiguous="warn",
                    )
                except (ValueError, RuntimeError):
                    failed += 1
                    continue
                if not result.ok:
                    failed += 1
                    continue
                track = result.tracks[0]
                xs.append(track.position[0])
                ys.append(track.position[1])
                pdf_sx.append(track.sigma_x)
                pdf_sy.append(track.sigma_y)
            n_ok = len(xs)
            if n_ok == 0:
                rows.append(SweepRow(
                    baseline_m=baseline, object_index=oi, truth_x=opos.x, truth_y=opos.y,
                    error_x=math.nan, error_y=math.nan, sigma_x=math.nan, sigma_y=math.nan,
                    pdf_sigma_x=math.nan, pdf_sigma_y=math.nan,
                    pdf_sigma_x_se=math.nan, pdf_sigma_y_se=math.nan,
                    n_trials=config.trials_per_point, n_failed=failed, valid=False,
                ))
                continue
            xs_arr, ys_arr = np.asarray(xs), np.asarray(ys)
            rows.append(SweepRow(
                baseline_m=baseline,
                object_index=oi,
                truth_x=opos.x,
                truth_y=opos.y,
                error_x=abs(float(xs_arr.mean()) - opos.x),
                error_y=abs(float(ys_arr.mean()) - opos.y),
                sigma_x=float(xs_arr.std(ddof=1)) if n_ok > 1 else 0.0,
                sigma_y=float(ys_arr.std(ddof=1)) if n_ok > 1 else 0.0,
                pdf_sigma_x=float(np.mean(pdf_sx)),
                pdf_sigma_y=float(np.mean(pdf_sy)),
                pdf_sigma_x_se=float(np.std(pdf_sx, ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else 0.0,
                pdf_sigma_y_se=float(np.std(pdf_sy, ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else 0.0,
                n_trials=config.trials_per_point,
                n_failed=failed,
                valid=failed <= config.trials_per_point // 2,
            ))
    return SweepResult(config=config, rows=tuple(rows))

"""Dispersion-threshold (I-DT) fixation identification."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .gaze_io import GazeSample, _content_lines, _decode, _parse_float, normalize_condition

FIXATION_HEADER = ["participant_id", "trial_id", "condition", "start_ms", "duration_ms",
                   "x_px", "y_px", "n_samples"]


@dataclass(frozen=True)
class Fixation:
    x_px: float
    y_px: float
    start_ms: float
    duration_ms: float
    n_samples: int


@dataclass(frozen=True)
class IdtConfig:
    dispersion_px: float = 5.0
    min_duration_ms: float = 100.0

    def __post_init__(self):
        if not self.dispersion_px > 0:
            raise ValueError(f"dispersion_px must be > 0, got {self.dispersion_px}")
        if not self.min_duration_ms > 0:
            raise ValueError(f"min_duration_ms must be > 0, got {self.min_duration_ms}")


def _as_txy(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("samples must be (t_ms, x_px, y_px) triples")
    return arr


def dispersion(window) -> float:
    """(max x - min x) + (max y - min y) over a non-empty window of samples."""
    arr = _as_txy(window)
    if len(arr) == 0:
        raise ValueError("dispersion of an empty window")
    x, y = arr[:, 1], arr[:, 2]
    return float((x.max() - x.min()) + (y.max() - y.min()))


def check_monotone(t) -> None:
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValidationError("non-finite timestamp")
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"timestamps not strictly increasing at sample {i + 1} "
                              f"({t[i]:g} then {t[i + 1]:g})")


def fixation_windows(samples, config: IdtConfig = IdtConfig()) -> list[tuple[int, int]]:
    """Inclusive (first, last) sample indices of every I-DT fixation window."""
    arr = _as_txy(samples)
    t, x, y = arr[:, 0], arr[:, 1], arr[:, 2]
    check_monotone(t)
    n = len(t)
    thr = config.dispersion_px
    # end[i]: first index j with t[j] - t[i] >= min duration
    end = np.searchsorted(t, t + config.min_duration_ms, side="left")
    windows = []
    i = 0
    while i < n:
        j = int(end[i])
        if j >= n:
            break
        xmin, xmax = x[i:j + 1].min(), x[i:j + 1].max()
        ymin, ymax = y[i:j + 1].min(), y[i:j + 1].max()
        if (xmax - xmin) + (ymax - ymin) > thr:
            i += 1
            continue
        while j + 1 < n:
            nx, ny = x[j + 1], y[j + 1]
            d = (max(xmax, nx) - min(xmin, nx)) + (max(ymax, ny) - min(ymin, ny))
            if d > thr:
                break
            xmin, xmax = min(xmin, nx), max(xmax, nx)
            ymin, ymax = min(ymin, ny), max(ymax, ny)
            j += 1
        windows.append((i, j))
        i = j + 1
    return windows


def detect_fixations(samples, config: IdtConfig = IdtConfig()) -> list[Fixation]:
    """Segment a gaze stream into fixations with the I-DT sweep.

    A window spanning at least ``min_duration_ms`` is opened at each sample;
    if its dispersion is within ``dispersion_px`` it is grown greedily one
    sample at a time and emitted, otherwise the start slides by one sample.
    """
    arr = _as_txy(samples)
    out = []
    for i, j in fixation_windows(arr, config):
        w = arr[i:j + 1]
        out.append(Fixation(
            x_px=float(w[:, 1].mean()),
            y_px=float(w[:, 2].mean()),
            start_ms=float(w[0, 0]),
            duration_ms=float(w[-1, 0] - w[0, 0]),
            n_samples=j - i + 1,
        ))
    return out


@dataclass(frozen=True)
class FixationStats:
    mean_duration_ms: float
    sd_duration_ms: float
    mean_count_per_trial: float
    n_fixations: int
    n_trials: int


def fixation_stats(trials) -> FixationStats:
    """Duration mean / population SD and mean fixation count per trial.

    ``trials`` is an iterable of fixation lists, one per trial; trials with no
    fixations still count toward the per-trial average.
    """
    per_trial = [list(fx) for fx in trials]
    durations = np.array([f.duration_ms for fx in per_trial for f in fx], dtype=float)
    if durations.size == 0:
        raise ValidationError("no fixations")
    return FixationStats(
        mean_duration_ms=float(durations.mean()),
        sd_duration_ms=float(durations.std()),
        mean_count_per_trial=durations.size / len(per_trial),
        n_fixations=int(durations.size),
        n_trials=len(per_trial),
    )


# ---------------------------------------------------------------------------
# fixation CSV


@dataclass(frozen=True)
class FixationTrial:
    participant_id: str
    trial_id: str
    condition: str
    fixations: tuple[Fixation, ...]

    def points(self) -> np.ndarray:
        return np.array([[f.x_px, f.y_px] for f in self.fixations], dtype=float).reshape(-1, 2)


def _num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def write_fixation_csv(trials, meta: dict | None = None) -> str:
    """Render fixation trials as CSV; ``meta`` goes on a leading '#' line."""
    buf = io.StringIO()
    if meta:
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIXATION_HEADER)
    for tr in trials:
        for f in tr.fixations:
            w.writerow([tr.participant_id, tr.trial_id, tr.condition, _num(f.start_ms),
                        _num(f.duration_ms), _num(f.x_px), _num(f.y_px), f.n_samples])
    return buf.getvalue()


def read_fixation_csv(stream) -> list[FixationTrial]:
    text = _decode(stream)
    lines = _content_lines(text)
    try:
        lineno, header_line = next(lines)
    except StopIteration:
        raise ParseError("missing header", 1) from None
    if [h.strip() for h in header_line.split(",")] != FIXATION_HEADER:
        raise ParseError(f"expected header {','.join(FIXATION_HEADER)!r}", lineno)
    groups: dict[tuple[str, str], tuple[str, list]] = {}
    for lineno, line in lines:
        try:
            row = next(csv.reader([line]))
        except csv.Error as exc:
            raise ParseError(str(exc), lineno) from None
        if len(row) != len(FIXATION_HEADER):
            raise ParseError(f"expected {len(FIXATION_HEADER)} fields, got {len(row)}", lineno)
        key = (row[0].strip(), row[1].strip())
        start = _parse_float(row[3], "start_ms", lineno)
        dur = _parse_float(row[4], "duration_ms", lineno)
        x = _parse_float(row[5], "x_px", lineno)
        y = _parse_float(row[6], "y_px", lineno)
        try:
            n = int(row[7])
        except ValueError:
            raise ParseError(f"n_samples is not an integer: {row[7]!r}", lineno) from None
        cond = normalize_condition(row[2])
        if key not in groups:
            groups[key] = (cond, [])
        elif groups[key][0] != cond:
            raise ValidationError(f"trial {key[0]}/{key[1]}: inconsistent condition (line {lineno})")
        groups[key][1].append(Fixation(x, y, start, dur, n))
    return [FixationTrial(pid, tid, cond, tuple(fx)) for (pid, tid), (cond, fx) in groups.items()]


# ---------------------------------------------------------------------------
# synthetic gaze


def synthesize_gaze(centroids, rng, *, rate_hz=250.0, fix_mean_ms=250.0, fix_sd_ms=50.0,
                    saccade_ms=20.0, jitter_px=1.0, min_fix_ms=120.0) -> list[GazeSample]:
    """Raw gaze samples dwelling on each centroid in turn.

    Each dwell lasts ~N(fix_mean_ms, fix_sd_ms) with uniform jitter of at most
    ``jitter_px`` per axis, and dwells are joined by linear saccades.
    """
    dt = 1000.0 / rate_hz
    out: list[GazeSample] = []
    t = 0.0
    prev = None
    for cx, cy in np.asarray(centroids, dtype=float).reshape(-1, 2):
        if prev is not None:
            n_sac = max(1, int(round(saccade_ms / dt)))
            for s in range(1, n_sac + 1):
                a = s / (n_sac + 1)
                out.append(GazeSample(t, prev[0] + a * (cx - prev[0]), prev[1] + a * (cy - prev[1])))
                t += dt
        dwell = max(min_fix_ms, rng.normal(fix_mean_ms, fix_sd_ms))
        n_fix = int(dwell // dt) + 1
        jit = rng.uniform(-jitter_px, jitter_px, size=(n_fix, 2))
        for k in range(n_fix):
            out.append(GazeSample(t, cx + jit[k, 0], cy + jit[k, 1]))
            t += dt
        prev = (cx, cy)
    return out

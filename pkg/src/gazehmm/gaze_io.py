"""On-disk formats: gaze CSV, model JSON, run manifest, and the bundled
representative models.

Coordinates everywhere are screen pixels in a single frame; the manifest
records which frame (screen size and face centre).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ParseError, ValidationError

CONDITIONS = (
    "truth_familiar",
    "truth_unfamiliar",
    "lie_familiar",
    "lie_unfamiliar",
    "unknown",
)
GAZE_HEADER = ["participant_id", "trial_id", "condition", "t_ms", "x_px", "y_px"]

# stochastic vectors printed with 4 decimals may be off by ~1e-4 per entry
SUM_TOL = 5e-4

DEFAULT_SCREEN = (1366, 768)
DEFAULT_FACE_CENTER = (683.0, 384.0)


class GazeSample(NamedTuple):
    t_ms: float
    x_px: float
    y_px: float


@dataclass(frozen=True)
class Trial:
    participant_id: str
    trial_id: str
    condition: str
    samples: tuple[GazeSample, ...]

    def as_array(self) -> np.ndarray:
        """(n, 3) array of t, x, y."""
        return np.array(self.samples, dtype=float).reshape(-1, 3)


def normalize_condition(value: str) -> str:
    value = value.strip()
    return value if value in CONDITIONS else "unknown"


def _decode(stream) -> str:
    if isinstance(stream, str):
        return stream
    if isinstance(stream, (bytes, bytearray, memoryview)):
        data = bytes(stream)
    elif hasattr(stream, "read"):
        data = stream.read()
        if isinstance(data, str):
            return data
    else:
        raise TypeError(f"cannot read gaze data from {type(stream).__name__}")
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"input is not valid UTF-8 ({exc.reason} at byte {exc.start})") from None


def _content_lines(text: str):
    """Yield (line_number, line) skipping blank lines and '#' comments."""
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        yield lineno, line


def _parse_float(token: str, name: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{name} is not numeric: {token!r}", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"{name} is not finite: {token!r}", lineno)
    return value


def parse_gaze_csv(stream) -> list[Trial]:
    """Parse gaze samples grouped into trials.

    ``stream`` may be bytes, str or a file object. Rows of one trial must be
    contiguous and strictly increasing in ``t_ms``; out-of-order samples are
    rejected, never re-sorted.
    """
    text = _decode(stream)
    lines = _content_lines(text)
    try:
        lineno, header_line = next(lines)
    except StopIteration:
        raise ParseError("missing header", 1) from None
    try:
        header = next(csv.reader([header_line]))
    except csv.Error as exc:
        raise ParseError(str(exc), lineno) from None
    if [h.strip() for h in header] != GAZE_HEADER:
        raise ParseError(f"expected header {','.join(GAZE_HEADER)!r}, got {header_line!r}", lineno)

    trials: list[Trial] = []
    seen: set[tuple[str, str]] = set()
    key = None
    condition = None
    samples: list[GazeSample] = []

    def flush():
        if key is not None:
            trials.append(Trial(key[0], key[1], condition, tuple(samples)))

    for lineno, line in lines:
        try:
            row = next(csv.reader([line]))
        except csv.Error as exc:
            raise ParseError(str(exc), lineno) from None
        if len(row) != len(GAZE_HEADER):
            raise ParseError(f"expected {len(GAZE_HEADER)} fields, got {len(row)}", lineno)
        pid, tid, cond = row[0].strip(), row[1].strip(), normalize_condition(row[2])
        t = _parse_float(row[3], "t_ms", lineno)
        x = _parse_float(row[4], "x_px", lineno)
        y = _parse_float(row[5], "y_px", lineno)
        if (pid, tid) != key:
            if (pid, tid) in seen:
                raise ParseError(f"rows of trial {pid}/{tid} are not contiguous", lineno)
            flush()
            key = (pid, tid)
            seen.add(key)
            condition = cond
            samples = []
        elif cond != condition:
            raise ValidationError(
                f"trial {pid}/{tid}: condition changes from {condition} to {cond} (line {lineno})")
        if t < 0:
            raise ValidationError(f"trial {pid}/{tid}: negative t_ms {t} (line {lineno})")
        if samples and t <= samples[-1].t_ms:
            raise ValidationError(
                f"trial {pid}/{tid}: t_ms not strictly increasing "
                f"({samples[-1].t_ms:g} then {t:g}, line {lineno})")
        samples.append(GazeSample(t, x, y))
    flush()
    return trials


def write_gaze_csv(trials, stream=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GAZE_HEADER)
    for tr in trials:
        for s in tr.samples:
            w.writerow([tr.participant_id, tr.trial_id, tr.condition,
                        repr(float(s.t_ms)), repr(float(s.x_px)), repr(float(s.y_px))])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


# ---------------------------------------------------------------------------
# model records


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelRecord:
    """A Gaussian-emission HMM as stored on disk (not renormalized).

    ``means`` is (K, dim) and ``covs`` is (K, dim, dim), both in pixels.
    """
    n_states: int
    dim: int
    prior: np.ndarray
    transition: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    label: str | None = None
    roi_names: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("prior", "transition", "means", "covs"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.roi_names is not None:
            object.__setattr__(self, "roi_names", tuple(self.roi_names))


@dataclass(frozen=True)
class Violation:
    field: str
    index: tuple
    observed: float
    bound: str

    def __str__(self):
        idx = "".join(f"[{i}]" for i in self.index)
        return f"{self.field}{idx}: observed {self.observed:.6g}, required {self.bound}"


def _structure_errors(rec: ModelRecord) -> list[str]:
    K, d = rec.n_states, rec.dim
    problems = []
    if not isinstance(K, (int, np.integer)) or K < 1:
        problems.append(f"n_states must be a positive integer, got {K!r}")
        return problems
    if not isinstance(d, (int, np.integer)) or d < 1:
        problems.append(f"dim must be a positive integer, got {d!r}")
        return problems
    expected = {"prior": (K,), "transition": (K, K), "means": (K, d), "covs": (K, d, d)}
    for name, shape in expected.items():
        got = getattr(rec, name).shape
        if got != shape:
            problems.append(f"{name} has shape {got}, expected {shape}")
    if rec.roi_names is not None and len(rec.roi_names) != K:
        problems.append(f"roi_names has {len(rec.roi_names)} entries, expected {K}")
    return problems


def validate_model(rec: ModelRecord, tol: float = SUM_TOL) -> list[Violation]:
    """Return every invariant violation of ``rec``; empty means valid.

    Raises ValidationError only when the record is structurally incomplete
    (wrong shapes), since then no per-entry check is meaningful.
    """
    problems = _structure_errors(rec)
    if problems:
        raise ValidationError("; ".join(problems))
    out: list[Violation] = []
    for name, arr in (("prior", rec.prior), ("transition", rec.transition),
                      ("means", rec.means), ("covs", rec.covs)):
        for idx in zip(*np.nonzero(~np.isfinite(arr))):
            out.append(Violation(name, tuple(int(i) for i in idx), float(arr[idx]), "finite"))
    if out:
        return out

    for k, p in enumerate(rec.prior):
        if p < 0:
            out.append(Violation("prior", (k,), float(p), ">= 0"))
    s = float(rec.prior.sum())
    if abs(s - 1.0) > tol:
        out.append(Violation("prior.sum", (), s, f"1 +/- {tol:g}"))
    for j, row in enumerate(rec.transition):
        for k, p in enumerate(row):
            if p < 0:
                out.append(Violation("transition", (j, k), float(p), ">= 0"))
        s = float(row.sum())
        if abs(s - 1.0) > tol:
            out.append(Violation("transition.row_sum", (j,), s, f"1 +/- {tol:g}"))
    for k, cov in enumerate(rec.covs):
        asym = float(np.max(np.abs(cov - cov.T)))
        if asym > 1e-9 * max(1.0, float(np.max(np.abs(cov)))):
            out.append(Violation("covs.asymmetry", (k,), asym, "symmetric"))
            continue
        min_eig = float(np.linalg.eigvalsh(cov).min())
        if min_eig <= 0:
            out.append(Violation("covs.min_eigenvalue", (k,), min_eig, "> 0"))
    return out


def _sig(x: float, digits: int = 10) -> float:
    return float(f"{x:.{digits}g}")


def _rounded(arr) -> list:
    arr = np.asarray(arr, dtype=float)
    return [_rounded(a) for a in arr] if arr.ndim > 1 else [_sig(v) for v in arr.ravel()]


def record_to_dict(rec: ModelRecord) -> dict:
    out = {
        "n_states": int(rec.n_states),
        "dim": int(rec.dim),
        "prior": _rounded(rec.prior),
        "transition": _rounded(rec.transition),
        "states": [{"mean": _rounded(m), "cov": _rounded(c)} for m, c in zip(rec.means, rec.covs)],
    }
    if rec.label is not None:
        out["label"] = rec.label
    if rec.roi_names is not None:
        out["roi_names"] = list(rec.roi_names)
    if rec.meta:
        out["meta"] = rec.meta
    return out


_REQUIRED = ("n_states", "dim", "prior", "transition", "states")
_OPTIONAL = ("label", "roi_names", "meta")


def record_from_dict(obj, validate: bool = True) -> ModelRecord:
    if not isinstance(obj, dict):
        raise ValidationError("model JSON must be an object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ValidationError(f"model JSON missing field(s): {', '.join(missing)}")
    extra = sorted(set(obj) - set(_REQUIRED) - set(_OPTIONAL))
    if extra:
        raise ValidationError(f"model JSON has unknown field(s): {', '.join(extra)}")
    states = obj["states"]
    if not isinstance(states, list) or not all(isinstance(s, dict) and {"mean", "cov"} <= set(s)
                                               for s in states):
        raise ValidationError("states must be a list of {mean, cov} objects")
    try:
        K, d = obj["n_states"], obj["dim"]
        if len(states) != K:
            raise ValidationError(f"states has {len(states)} entries but n_states is {K}")
        means = np.array([s["mean"] for s in states], dtype=float).reshape(len(states), -1)
        covs = np.array([s["cov"] for s in states], dtype=float)
        rec = ModelRecord(
            n_states=K, dim=d,
            prior=np.array(obj["prior"], dtype=float),
            transition=np.array(obj["transition"], dtype=float),
            means=means, covs=covs,
            label=obj.get("label"),
            roi_names=obj.get("roi_names"),
            meta=dict(obj.get("meta") or {}),
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"malformed model JSON: {exc}") from None
    if validate:
        violations = validate_model(rec)
        if violations:
            raise ValidationError("invalid model: " + "; ".join(map(str, violations)))
    return rec


def write_model(rec: ModelRecord) -> bytes:
    """Serialize with 10 significant digits; output is a fixed point."""
    return (json.dumps(record_to_dict(rec), indent=2) + "\n").encode("utf-8")


def read_model(stream) -> ModelRecord:
    text = _decode(stream)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return record_from_dict(obj)


def load_model_file(path) -> ModelRecord:
    return read_model(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# run manifest


@dataclass(frozen=True)
class Manifest:
    screen: tuple[int, int] = DEFAULT_SCREEN
    face_center: tuple[float, float] = DEFAULT_FACE_CENTER
    trials_csv: str | None = None


def read_manifest(stream) -> Manifest:
    try:
        obj = json.loads(_decode(stream))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(obj, dict):
        raise ValidationError("manifest must be a JSON object")
    screen = obj.get("screen") or {}
    try:
        size = (int(screen.get("width_px", DEFAULT_SCREEN[0])),
                int(screen.get("height_px", DEFAULT_SCREEN[1])))
        fc = obj.get("face_center", DEFAULT_FACE_CENTER)
        face = (float(fc[0]), float(fc[1]))
    except (TypeError, ValueError, IndexError, AttributeError) as exc:
        raise ValidationError(f"malformed manifest: {exc}") from None
    if size[0] <= 0 or size[1] <= 0:
        raise ValidationError(f"screen size must be positive, got {size}")
    return Manifest(screen=size, face_center=face, trials_csv=obj.get("trials_csv"))


# ---------------------------------------------------------------------------
# bundled representative models
#
# Priors and transitions are the published 4-decimal values, state order
# (red, green, black). Means for truth_familiar / truth_unfamiliar are the
# published ROI centres; every other emission parameter is a placeholder
# placed on the facial region the ROI describes, flagged synthetic_emission.

ROI_NAMES = ("red", "green", "black")
_ISO14 = [[196.0, 0.0], [0.0, 196.0]]

_BUNDLED = {
    "general": {
        "prior": [0.0000, 0.8475, 0.1525],
        "transition": [[0.9704, 0.0086, 0.0210],
                       [0.0449, 0.9248, 0.0303],
                       [0.0411, 0.0248, 0.9340]],
        # nose tip / philtrum, right inner canthus, above left eye
        "means": [[680.0, 455.0], [702.0, 338.0], [636.0, 330.0]],
        "synthetic_means": True,
    },
    "truth_familiar": {
        "prior": [0.8626, 0.0479, 0.0895],
        "transition": [[0.8859, 0.0402, 0.0738],
                       [0.0285, 0.9444, 0.0272],
                       [0.0903, 0.0252, 0.8845]],
        "means": [[634.9725, 351.6586], [676.1114, 493.2836], [706.2081, 332.5524]],
        "synthetic_means": False,
    },
    "truth_unfamiliar": {
        "prior": [0.0820, 0.3354, 0.5826],
        "transition": [[0.9680, 0.0215, 0.0105],
                       [0.0518, 0.9225, 0.0257],
                       [0.0420, 0.0898, 0.8682]],
        "means": [[672.2400, 430.2586], [616.2596, 321.0105], [688.8656, 337.2602]],
        "synthetic_means": False,
    },
    "lie_familiar": {
        "prior": [0.6456, 0.0000, 0.3544],
        "transition": [[0.9102, 0.0500, 0.0398],
                       [0.0119, 0.9663, 0.0218],
                       [0.0305, 0.0501, 0.9194]],
        # nose bridge, lower nose / philtrum, between the eyebrows
        "means": [[690.0, 362.0], [683.0, 440.0], [674.0, 310.0]],
        "synthetic_means": True,
    },
    "lie_unfamiliar": {
        "prior": [0.4848, 0.4027, 0.1125],
        "transition": [[0.5602, 0.3775, 0.0623],
                       [0.3153, 0.5622, 0.1225],
                       [0.2099, 0.2751, 0.5150]],
        # above the left eye, left part of the right eye, centre of the face
        "means": [[646.0, 328.0], [712.0, 344.0], [683.0, 445.0]],
        "synthetic_means": True,
    },
}


def load_bundled_models() -> dict[str, ModelRecord]:
    """The five representative models keyed by label ('general' + 4 conditions)."""
    out = {}
    for label, entry in _BUNDLED.items():
        out[label] = ModelRecord(
            n_states=3, dim=2,
            prior=entry["prior"],
            transition=entry["transition"],
            means=entry["means"],
            covs=[_ISO14] * 3,
            label=label,
            roi_names=ROI_NAMES,
            meta={
                "source": "bundled",
                "synthetic_emission": True,
                "synthetic_means": entry["synthetic_means"],
                "synthetic_covs": True,
            },
        )
    return out

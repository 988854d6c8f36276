"""Assign fixation sequences to condition models and tabulate the results."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError, ValidationError
from .hmm import _as_seq, _log, as_model, log_likelihood, sequence_loglik, viterbi

RULES = ("loglik", "agreement", "path-distance")
REFERENCE_LEN = 19
# ROI extent in standard deviations (the drawn 2-sigma contour)
ROI_SD = 2.0


@dataclass(frozen=True)
class ClassificationReport:
    rule: str
    scores: dict[str, float]
    chosen: str
    truth: str | None = None

    def to_dict(self) -> dict:
        out = {"rule": self.rule,
               "per_label_scores": {k: _json_float(v) for k, v in sorted(self.scores.items())},
               "chosen": self.chosen}
        if self.truth is not None:
            out["truth"] = self.truth
        return out


def _json_float(v):
    v = float(v)
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return float(f"{v:.10g}")


def _pick(scores: dict[str, float], larger_is_better: bool) -> str:
    best = None
    for label in sorted(scores):
        s = scores[label]
        if math.isnan(s):
            continue
        if best is None or (s > scores[best] if larger_is_better else s < scores[best]):
            best = label
    if best is None:
        raise ModelError("no candidate produced a score")
    return best


def most_probable_states(model, length: int = REFERENCE_LEN) -> np.ndarray:
    """Most probable hidden trajectory of the Markov chain alone (no emissions)."""
    model = as_model(model)
    log_A = _log(model.transition)
    delta = _log(model.prior)
    K = model.n_states
    back = np.zeros((length, K), dtype=int)
    for t in range(1, length):
        scores = delta[:, None] + log_A
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(K)]
    path = np.empty(length, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(length - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def reference_path(model, length: int = REFERENCE_LEN) -> np.ndarray:
    """Canonical Viterbi path of a model.

    The model's state means are laid along its most probable state
    trajectory, and that mean sequence is decoded.
    """
    model = as_model(model)
    means = model.means[most_probable_states(model, length)]
    return viterbi(model, means)[0]


def path_agreement(path, reference) -> float:
    """Fraction of the common prefix on which two state paths coincide."""
    path = np.asarray(path, dtype=int)
    ref = np.asarray(reference, dtype=int)
    n = min(len(path), len(ref))
    if n == 0:
        raise ValidationError("empty path")
    return float(np.mean(path[:n] == ref[:n]))


def _inside_roi(model, X, states, roi_sd):
    d = X - model.means[states]
    P = np.linalg.inv(model.covs[states])
    return np.einsum("ti,tij,tj->t", d, P, d) <= roi_sd ** 2


def viterbi_agreement(seq, model, reference, roi_sd: float | None = ROI_SD) -> float:
    """Share of the sequence whose decoded state matches ``reference``.

    With ``roi_sd`` set, a matching position also needs its fixation inside
    the reference state's ROI (Mahalanobis distance <= roi_sd); ``None``
    compares state indices only.
    """
    model = as_model(model)
    X = _as_seq(seq, model.dim)
    path, _ = viterbi(model, X)
    ref = np.asarray(reference, dtype=int)
    n = min(len(path), len(ref))
    if n == 0:
        raise ValidationError("empty reference path")
    hit = path[:n] == ref[:n]
    if roi_sd is not None:
        hit &= _inside_roi(model, X[:n], ref[:n], roi_sd)
    return float(np.mean(hit))


def polyline_distance(p, q) -> float:
    """Euclidean distance between two point paths over their common prefix."""
    p = np.asarray(p, dtype=float).reshape(-1, 2)
    q = np.asarray(q, dtype=float).reshape(-1, 2)
    n = min(len(p), len(q))
    return float(np.sqrt(np.sum((p[:n] - q[:n]) ** 2)))


def viterbi_polyline(seq, model) -> np.ndarray:
    """State means along the Viterbi path of ``seq``: the scanpath as the model sees it."""
    model = as_model(model)
    path, _ = viterbi(model, seq)
    return model.means[path]


def _models(candidates):
    if not candidates:
        raise ValidationError("no candidate models")
    return {label: as_model(m) for label, m in candidates.items()}


def _references(models, references=None):
    refs = dict(references or {})
    for label, m in models.items():
        if label not in refs:
            refs[label] = reference_path(m)
    return refs


def _loglik_report(scores):
    if all(s == -math.inf for s in scores.values()):
        raise ModelError("sequence inadmissible under all candidates")
    return ClassificationReport("loglik", scores, _pick(scores, True))


def classify_loglik(seq, candidates) -> ClassificationReport:
    models = _models(candidates)
    return _loglik_report({label: log_likelihood(m, seq) for label, m in models.items()})


def classify_agreement(seq, candidates, references=None, roi_sd=ROI_SD) -> ClassificationReport:
    models = _models(candidates)
    refs = _references(models, references)
    scores = {label: viterbi_agreement(seq, m, refs[label], roi_sd) for label, m in models.items()}
    return ClassificationReport("agreement", scores, _pick(scores, True))


def classify_path_distance(seq, candidates, against: str = "observed",
                           references=None) -> ClassificationReport:
    """Euclidean distance between each candidate's Viterbi polyline of ``seq``
    and a comparison path; smallest wins.

    ``against="observed"`` compares with the observed fixations themselves.
    ``against="reference"`` compares with the candidate's reference polyline:
    ``references[label]`` if given (pixel points), else the state means along
    the candidate's reference path.
    """
    if against not in ("observed", "reference"):
        raise ValueError(f"against must be 'observed' or 'reference', got {against!r}")
    models = _models(candidates)
    X = _as_seq(seq)
    refs = dict(references or {})
    scores = {}
    for label, m in models.items():
        if against == "observed":
            other = X
        else:
            other = refs[label] if label in refs else m.means[reference_path(m)]
        scores[label] = polyline_distance(viterbi_polyline(X, m), other)
    return ClassificationReport("path-distance", scores, _pick(scores, False))


def classify(seq, candidates, rule: str = "loglik", references=None) -> ClassificationReport:
    return classify_many([seq], candidates, rule, references=references)[0]


def classify_many(seqs, candidates, rule: str = "loglik", truths=None,
                  references=None) -> list[ClassificationReport]:
    """Classify a batch of sequences; per-candidate work is shared."""
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; expected one of {', '.join(RULES)}")
    models = _models(candidates)
    seqs = [_as_seq(s) for s in seqs]
    if rule == "loglik":
        table = {label: sequence_loglik(m, seqs) for label, m in models.items()}
        reports = [_loglik_report({label: float(table[label][n]) for label in models})
                   for n in range(len(seqs))]
    elif rule == "agreement":
        refs = _references(models, references)
        reports = [classify_agreement(X, models, refs) for X in seqs]
    else:
        reports = [classify_path_distance(X, models) for X in seqs]
    if truths is not None:
        reports = [ClassificationReport(r.rule, r.scores, r.chosen, t) for r, t in zip(reports, truths)]
    return reports


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray          # rows: truth, columns: prediction
    per_class: dict[str, float] = field(default_factory=dict)
    overall: float = 0.0

    def correct(self, label: str) -> int:
        i = self.labels.index(label)
        return int(self.counts[i, i])

    def total(self, label: str) -> int:
        return int(self.counts[self.labels.index(label)].sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth\\predicted"] + self.labels)
        for label, row in zip(self.labels, self.counts):
            w.writerow([label] + [int(v) for v in row])
        return buf.getvalue()


def confusion(predictions, truths, labels=None) -> ConfusionMatrix:
    predictions, truths = list(predictions), list(truths)
    if len(predictions) != len(truths):
        raise ValidationError(f"{len(predictions)} predictions but {len(truths)} truths")
    if labels is None:
        labels = sorted(set(truths) | set(predictions))
    else:
        labels = list(labels)
        unknown = (set(truths) | set(predictions)) - set(labels)
        if unknown:
            raise ValidationError(f"labels missing from label set: {sorted(unknown)}")
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=int)
    for p, t in zip(predictions, truths):
        counts[index[t], index[p]] += 1
    per_class = {lab: counts[i, i] / counts[i].sum()
                 for i, lab in enumerate(labels) if counts[i].sum() > 0}
    overall = float(np.trace(counts) / counts.sum()) if counts.sum() else 0.0
    return ConfusionMatrix(labels, counts, {k: float(v) for k, v in per_class.items()}, overall)


def format_accuracy(correct: int, total: int) -> str:
    """'80.95% (17/21)' style rendering."""
    return f"{100.0 * correct / total:.2f}% ({correct}/{total})"


def roi_spread(centers, face_center) -> tuple[float, float]:
    """Mean squared deviation of ROI centres from the face centre, per axis."""
    c = np.asarray(centers, dtype=float).reshape(-1, 2)
    if len(c) == 0:
        raise ValidationError("no ROI centres")
    d = c - np.asarray(face_center, dtype=float)
    sx, sy = np.mean(d ** 2, axis=0)
    return float(sx), float(sy)

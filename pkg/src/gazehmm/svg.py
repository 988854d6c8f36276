"""Scanpath and ROI plots as plain SVG text."""
from __future__ import annotations

import json
from xml.sax.saxutils import escape

import numpy as np

from .gaze_io import Manifest
from .hmm import as_model

ROI_COLORS = {"red": "#d62728", "green": "#2ca02c", "black": "#222222", "blue": "#1f77b4"}
PALETTE = ("#d62728", "#2ca02c", "#222222", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b")


def _f(v) -> str:
    return f"{float(v):.2f}".rstrip("0").rstrip(".") if np.isfinite(v) else "0"


def ellipse_axes(cov, n_sd: float = 2.0):
    """(rx, ry, angle_deg) of the n_sd contour of a 2x2 covariance."""
    w, V = np.linalg.eigh(np.asarray(cov, dtype=float))
    major = V[:, 1]
    angle = float(np.degrees(np.arctan2(major[1], major[0])))
    if np.isclose(w[0], w[1], rtol=1e-12, atol=0.0):
        angle = 0.0
    angle = (angle + 90.0) % 180.0 - 90.0
    return n_sd * float(np.sqrt(w[1])), n_sd * float(np.sqrt(w[0])), angle


def render_scanpath_svg(fixations=None, model=None, manifest: Manifest = Manifest(),
                        meta: dict | None = None, title: str | None = None) -> str:
    """Draw fixations (dots joined by a saccade polyline) and/or model ROIs.

    ``fixations`` is a sequence of Fixation objects or (x, y) points. Each
    model state becomes an ellipse at its 2-SD contour with a cross at the
    mean.
    """
    width, height = manifest.screen
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    if meta:
        out.append(f"<metadata>{escape(json.dumps(meta, sort_keys=True))}</metadata>")
    if title:
        out.append(f"<title>{escape(title)}</title>")
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    fx, fy = manifest.face_center
    out.append(f'<path class="face-center" d="M{_f(fx - 6)},{_f(fy)}h12M{_f(fx)},{_f(fy - 6)}v12" '
               f'stroke="#999999"/>')

    if model is not None:
        m = as_model(model)
        names = m.roi_names or tuple(f"state{k}" for k in range(m.n_states))
        out.append('<g class="rois" fill-opacity="0.15" stroke-width="2">')
        for k in range(m.n_states):
            color = ROI_COLORS.get(names[k], PALETTE[k % len(PALETTE)])
            rx, ry, ang = ellipse_axes(m.covs[k])
            cx, cy = m.means[k]
            out.append(f'<ellipse class="roi" data-state="{k}" data-name="{escape(names[k])}" '
                       f'cx="{_f(cx)}" cy="{_f(cy)}" rx="{_f(rx)}" ry="{_f(ry)}" '
                       f'transform="rotate({_f(ang)} {_f(cx)} {_f(cy)})" '
                       f'fill="{color}" stroke="{color}"/>')
            out.append(f'<path class="roi-center" d="M{_f(cx - 4)},{_f(cy)}h8M{_f(cx)},{_f(cy - 4)}v8" '
                       f'stroke="{color}"/>')
        out.append("</g>")

    if fixations is not None:
        pts = [(f.x_px, f.y_px) if hasattr(f, "x_px") else (f[0], f[1]) for f in fixations]
        if len(pts) > 1:
            coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
            out.append(f'<polyline class="saccades" points="{coords}" fill="none" '
                       f'stroke="#1f77b4" stroke-width="1.5"/>')
        out.append('<g class="fixations" fill="black">')
        for x, y in pts:
            out.append(f'<circle class="fixation" cx="{_f(x)}" cy="{_f(y)}" r="4"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"

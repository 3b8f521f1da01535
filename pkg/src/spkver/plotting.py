"""DET plotting: probit-warped axes rendered to standalone SVG.

The probit (standard normal quantile) uses Wichura's rational
approximation, accurate to well below 1e-8, so the plots carry no
dependency beyond the text file they are written to.
"""

from __future__ import annotations

import math
import os

from .errors import DataError

_A = (3.3871328727963666080e0, 1.3314166789178437745e2,
      1.9715909503065514427e3, 1.3731693765509461125e4,
      4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
      5.3941960214247511077e3, 2.1213794301586595867e4,
      3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0,
      5.76949722146069140550e0, 3.64784832476320460504e0,
      1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
      6.89767334985100004550e-1, 1.48103976427480074590e-1,
      1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0,
      1.78482653991729133580e0, 2.96560571828504891230e-1,
      2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
      1.48753612908506148525e-2, 7.86869131145613259100e-4,
      1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coeffs, x):
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def norm_quantile(p: float) -> float:
    """Inverse standard normal CDF (probit) for p in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probit needs p in (0,1), got {p}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        value = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        value = _poly(_E, r) / _poly(_F, r)
    return -value if q < 0 else value


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
            "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
_TICKS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8)


def _eer_point(fa, miss):
    """Crossing of the curve with the FA = miss diagonal."""
    for i in range(1, len(fa)):
        d0, d1 = fa[i - 1] - miss[i - 1], fa[i] - miss[i]
        if d1 <= 0:
            if d1 == d0:
                return fa[i], miss[i]
            alpha = d0 / (d0 - d1)
            return (fa[i - 1] + alpha * (fa[i] - fa[i - 1]),
                    miss[i - 1] + alpha * (miss[i] - miss[i - 1]))
    return fa[-1], miss[-1]


def render_det_svg(curves: list[tuple[str, list, list]],
                   p_min: float = 0.001, p_max: float = 0.99) -> str:
    """SVG text for one DET plot; curves are (label, fa, miss) triples in
    raw probabilities."""
    if not curves:
        raise DataError("no DET curves to plot")
    width, height = 560, 560
    left, right, top, bottom = 80, 30, 30, 70
    pw, ph = width - left - right, height - top - bottom
    lo, hi = norm_quantile(p_min), norm_quantile(p_max)

    def sx(p):
        p = min(max(p, p_min), p_max)
        return left + (norm_quantile(p) - lo) / (hi - lo) * pw

    def sy(p):
        p = min(max(p, p_min), p_max)
        return top + ph - (norm_quantile(p) - lo) / (hi - lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _TICKS:
        if not p_min <= t <= p_max:
            continue
        x, y = sx(t), sy(t)
        label = f"{100 * t:g}"
        parts.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" '
                     f'y2="{top + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{top + ph + 20}" font-size="11" '
                     f'text-anchor="middle">{label}</text>')
        parts.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" '
                     f'y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{label}</text>')
    parts.append(
        f'<text x="{left + pw / 2}" y="{height - 28}" font-size="13" '
        'text-anchor="middle">False alarm probability (%)</text>')
    parts.append(
        f'<text x="22" y="{top + ph / 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 22 {top + ph / 2})">Miss probability (%)</text>')
    # FA = miss diagonal
    parts.append(f'<line x1="{sx(p_min):.2f}" y1="{sy(p_min):.2f}" '
                 f'x2="{sx(p_max):.2f}" y2="{sy(p_max):.2f}" '
                 'stroke="#bbbbbb" stroke-dasharray="4 3"/>')
    for i, (label, fa, miss) in enumerate(curves):
        if len(fa) == 0:
            raise DataError(f"curve {label!r} has no points")
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(f):.2f},{sy(m):.2f}" for f, m in zip(fa, miss))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        ef, em = _eer_point(list(fa), list(miss))
        parts.append(f'<circle cx="{sx(ef):.2f}" cy="{sy(em):.2f}" r="4" '
                     f'fill="{color}"/>')
        ly = top + 16 + 16 * i
        parts.append(f'<line x1="{left + pw - 150}" y1="{ly - 4}" '
                     f'x2="{left + pw - 125}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw - 118}" y="{ly}" font-size="11">'
                     f'{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_det_csv(path: str):
    fa, miss = [], []
    with open(path) as fh:
        header = fh.readline()
        if not header.strip():
            raise DataError(f"{path!r} is empty")
        for line in fh:
            if not line.strip():
                continue
            a, b = line.split(",")[:2]
            fa.append(float(a))
            miss.append(float(b))
    if not fa:
        raise DataError(f"{path!r} contains no DET points")
    return fa, miss


def det_plot(det_csv_paths: list[str], out_image_path: str) -> None:
    """Overlay one curve per input CSV; legend labels are the file names."""
    curves = []
    for path in det_csv_paths:
        fa, miss = read_det_csv(path)
        label = os.path.splitext(os.path.basename(path))[0]
        curves.append((label, fa, miss))
    svg = render_det_svg(curves)
    with open(out_image_path, "w") as fh:
        fh.write(svg)

"""Slow, independent reference implementations used by the test suite.

Nothing in here imports the metrics or losses modules. The metric and loss
references are plain loops at float64. The group check materializes
permutation matrices from explicit index formulas and compares them with
whatever compose/apply/inverse functions it is handed.
"""

from __future__ import annotations

import functools
import itertools
import math
from typing import Callable, Sequence

import numpy as np
import torch

# --------------------------------------------------------------------------
# gradients


def finite_difference_gradient(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> list[np.ndarray]:
    """Central differences of ``loss_fn()`` with respect to each entry of ``params``.

    ``params`` are float64 tensors that ``loss_fn`` reads; they are perturbed
    in place and restored. With ``max_per_tensor`` only that many randomly
    chosen entries per tensor are probed and the rest are NaN.
    """
    rng = np.random.default_rng(seed)
    out = []
    with torch.no_grad():
        for p in params:
            if p.dtype != torch.float64:
                raise TypeError("finite differences run at float64 only")
            flat = p.view(-1)
            est = np.full(flat.numel(), np.nan)
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = np.sort(rng.choice(flat.numel(), max_per_tensor, replace=False))
            for k in idx:
                keep = float(flat[k])
                flat[k] = keep + h
                up = float(loss_fn())
                flat[k] = keep - h
                down = float(loss_fn())
                flat[k] = keep
                est[k] = (up - down) / (2 * h)
            out.append(est.reshape(tuple(p.shape)))
    return out


def gradient_relative_error(analytic: Sequence, numeric: Sequence[np.ndarray]) -> float:
    """``|a - n| / max(|a|, |n|)`` over all probed (non-NaN) entries."""
    a_all, n_all = [], []
    for a, n in zip(analytic, numeric):
        a = np.asarray(a.detach().numpy() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
        mask = ~np.isnan(n)
        a_all.append(a[mask])
        n_all.append(n[mask])
    a = np.concatenate(a_all)
    n = np.concatenate(n_all)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


# --------------------------------------------------------------------------
# metrics, one loop at a time


def _rows(x) -> list[list[float]]:
    return [[float(val) * 255.0 for val in row] for row in np.asarray(x, dtype=np.float64)]


def _ref_en(f):
    counts = {}
    n = 0
    for row in np.asarray(f, dtype=np.float64):
        for val in row:
            level = int(math.floor(float(val) * 255.0 + 0.5))
            level = min(max(level, 0), 255)
            counts[level] = counts.get(level, 0) + 1
            n += 1
    total = 0.0
    for c in counts.values():
        p = c / n
        total -= p * math.log2(p)
    return total


def _ref_mean(x):
    s = 0.0
    n = 0
    for row in x:
        for val in row:
            s += val
            n += 1
    return s / n


def _ref_sd(f):
    x = _rows(f)
    mu = _ref_mean(x)
    acc = 0.0
    n = 0
    for row in x:
        for val in row:
            acc += (val - mu) ** 2
            n += 1
    return math.sqrt(acc / n)


def _ref_sf(f):
    x = _rows(f)
    h, w = len(x), len(x[0])
    rf = 0.0
    cf = 0.0
    for r in range(h):
        for c in range(1, w):
            rf += (x[r][c] - x[r][c - 1]) ** 2
    for r in range(1, h):
        for c in range(w):
            cf += (x[r][c] - x[r - 1][c]) ** 2
    return math.sqrt(rf / (h * w) + cf / (h * w))


def _ref_ag(f):
    x = _rows(f)
    h, w = len(x), len(x[0])
    acc = 0.0
    count = 0
    for r in range(h - 1):
        for c in range(w - 1):
            gx = x[r][c + 1] - x[r][c]
            gy = x[r + 1][c] - x[r][c]
            acc += math.sqrt((gx * gx + gy * gy) / 2.0)
            count += 1
    return acc / count if count else 0.0


def _ref_corr(a, b):
    a = [float(t) for t in np.asarray(a, dtype=np.float64).ravel()]
    b = [float(t) for t in np.asarray(b, dtype=np.float64).ravel()]
    ma = sum(a) / len(a)
    mb = sum(b) / len(b)
    sab = saa = sbb = 0.0
    for x, y in zip(a, b):
        sab += (x - ma) * (y - mb)
        saa += (x - ma) ** 2
        sbb += (y - mb) ** 2
    if saa == 0.0 or sbb == 0.0:
        return 0.0
    return sab / math.sqrt(saa * sbb)


def _ref_scd(f, i, v):
    f, i, v = (np.asarray(t, dtype=np.float64) for t in (f, i, v))
    return _ref_corr(f - i, v) + _ref_corr(f - v, i)


def _ref_window(n):
    sigma = n / 5.0
    half = (n - 1) // 2
    w = [[math.exp(-((dy * dy) + (dx * dx)) / (2 * sigma * sigma)) for dx in range(-half, half + 1)]
         for dy in range(-half, half + 1)]
    peak = max(max(row) for row in w)
    tiny = np.finfo(np.float64).eps * peak
    w = [[val if val >= tiny else 0.0 for val in row] for row in w]
    total = sum(sum(row) for row in w)
    return np.array([[val / total for val in row] for row in w])


def _ref_smooth(x, w):
    """Windowed weighted sum, mirror borders (edge pixel repeated), one offset at a time."""
    k = w.shape[0] // 2
    padded = np.pad(x, k, mode="symmetric")
    h, wd = x.shape
    out = np.zeros_like(x)
    for dy in range(w.shape[0]):
        for dx in range(w.shape[1]):
            if w[dy, dx] != 0.0:
                out += w[dy, dx] * padded[dy : dy + h, dx : dx + wd]
    return out


def _ref_vif_one(ref, dist):
    num = 0.0
    den = 0.0
    for scale in range(1, 5):
        n = 2 ** (5 - scale) + 1
        w = _ref_window(n)
        if scale > 1:
            ref = _ref_smooth(ref, w)[::2, ::2]
            dist = _ref_smooth(dist, w)[::2, ::2]
        m1 = _ref_smooth(ref, w)
        m2 = _ref_smooth(dist, w)
        e11 = _ref_smooth(ref * ref, w)
        e22 = _ref_smooth(dist * dist, w)
        e12 = _ref_smooth(ref * dist, w)
        for r in range(ref.shape[0]):
            for c in range(ref.shape[1]):
                s1 = max(e11[r, c] - m1[r, c] ** 2, 0.0)
                s2 = max(e22[r, c] - m2[r, c] ** 2, 0.0)
                s12 = e12[r, c] - m1[r, c] * m2[r, c]
                if s1 < 1e-10:
                    gain, noise, s1 = 0.0, s2, 0.0
                else:
                    gain = s12 / (s1 + 1e-10)
                    noise = s2 - gain * s12
                if s2 < 1e-10:
                    gain, noise = 0.0, 0.0
                if gain < 0:
                    gain, noise = 0.0, s2
                noise = max(noise, 1e-10)
                num += math.log10(1 + gain * gain * s1 / (noise + 2.0))
                den += math.log10(1 + s1 / 2.0)
    return num / den if den > 0 else 0.0


def _ref_vif(f, i, v):
    f, i, v = (np.asarray(t, dtype=np.float64) * 255.0 for t in (f, i, v))
    return (_ref_vif_one(i, f) + _ref_vif_one(v, f)) / 2.0


_REFERENCES = {
    "en": (_ref_en, 1),
    "sd": (_ref_sd, 1),
    "sf": (_ref_sf, 1),
    "ag": (_ref_ag, 1),
    "scd": (_ref_scd, 3),
    "vif": (_ref_vif, 3),
    "truth_correlation": (_ref_corr, 2),
}


def reference_metric(name: str, images: Sequence) -> float:
    """Loop implementation of metric ``name``.

    ``images`` is ``(f,)`` for en/sd/sf/ag, ``(f, i, v)`` for scd/vif and
    ``(f, truth)`` for truth_correlation.
    """
    if name not in _REFERENCES:
        raise KeyError(f"no reference for metric {name!r}")
    fn, arity = _REFERENCES[name]
    if len(images) != arity:
        raise ValueError(f"{name} takes {arity} images, got {len(images)}")
    return float(fn(*images))


# --------------------------------------------------------------------------
# losses


def reference_sobel(x) -> np.ndarray:
    """(2, H, W) Sobel responses from a sliding window with reflected borders."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]

    def at(r, c):
        # reflect without repeating the edge pixel: index -1 -> 1, h -> h - 2
        r = -r if r < 0 else (2 * (h - 1) - r if r >= h else r)
        c = -c if c < 0 else (2 * (w - 1) - c if c >= w else c)
        return x[r, c]

    out = np.zeros((2, h, w))
    for r in range(h):
        for c in range(w):
            gx = gy = 0.0
            for a in range(3):
                for b in range(3):
                    val = at(r + a - 1, c + b - 1)
                    gx += kx[a][b] * val
                    gy += kx[b][a] * val
            out[0, r, c] = gx
            out[1, r, c] = gy
    return out


def reference_l1(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return sum(abs(float(x) - float(y)) for x, y in zip(a, b)) / a.size


def reference_composite_distance(x, xhat) -> float:
    return reference_l1(x, xhat) + reference_l1(reference_sobel(x), reference_sobel(xhat))


def reference_mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / a.size


def reference_traditional_loss(f, i, v) -> float:
    return reference_l1(f, i) + reference_l1(f, v)


# --------------------------------------------------------------------------
# transform group


def index_permutation(shift_y: int, shift_x: int, rot_quarter: int, flip_h: bool, flip_v: bool, n: int) -> np.ndarray:
    """0/1 matrix sending pixel (r, c) of an n x n image to its destination.

    Steps follow the documented order: flip_h, flip_v, quarter turns
    counterclockwise, then a cyclic shift. ``M[dest, src] = 1``.
    """
    m = np.zeros((n * n, n * n), dtype=np.int64)
    for r in range(n):
        for c in range(n):
            rr, cc = r, c
            if flip_h:
                cc = n - 1 - cc
            if flip_v:
                rr = n - 1 - rr
            for _ in range(rot_quarter % 4):
                rr, cc = n - 1 - cc, rr
            rr = (rr + shift_y) % n
            cc = (cc + shift_x) % n
            m[rr * n + cc, r * n + c] = 1
    return m


def _spec_fields(g):
    return (g.shift_y, g.shift_x, g.rot_quarter, g.flip_h, g.flip_v)


@functools.lru_cache(maxsize=4096)
def _cached_permutation(fields: tuple, n: int) -> np.ndarray:
    m = index_permutation(*fields, n)
    m.setflags(write=False)
    return m


def exhaustive_group_check(
    n: int,
    max_shift: int = 0,
    compose_fn: Callable | None = None,
    inverse_fn: Callable | None = None,
    matrix_fn: Callable | None = None,
    unitary_fn: Callable | None = None,
) -> bool:
    """Check the flip/rotation subgroup (plus shifts up to ``max_shift``) on n x n grids.

    Verifies that every element's materialized matrix equals the index
    formula, that the identity is present, that composition is closed and
    matches the matrix product, that inverses invert, and that every matrix
    is a permutation. The callables default to the transforms module and
    can be swapped for negative controls.
    """
    from . import transforms as T  # the code under test

    if n < 1 or n > 8:
        raise ValueError("exhaustive_group_check supports 1 <= n <= 8")
    compose_fn = compose_fn or T.compose
    inverse_fn = inverse_fn or T.inverse
    matrix_fn = matrix_fn or T.transform_matrix
    unitary_fn = unitary_fn or T.permutation_matrix_check

    shifts = range(-max_shift, max_shift + 1)
    elements = [
        T.TransformSpec(shift_y=sy, shift_x=sx, rot_quarter=rot, flip_h=fh, flip_v=fv)
        for fh, fv, rot, sy, sx in itertools.product((False, True), (False, True), range(4), shifts, shifts)
    ]
    oracle = {g: _cached_permutation(_spec_fields(g), n) for g in elements}
    members = {m.tobytes() for m in oracle.values()}
    eye = np.eye(n * n, dtype=np.int64)

    if eye.tobytes() not in members:
        return False
    for g, m in oracle.items():
        if not np.array_equal(np.asarray(matrix_fn(g, n)).astype(np.int64), m):
            return False
        if not (np.array_equal(m.T @ m, eye) and unitary_fn(g, n)):
            return False
        inv = _cached_permutation(_spec_fields(inverse_fn(g)), n)
        if not (np.array_equal(inv @ m, eye) and np.array_equal(m @ inv, eye)):
            return False
    full_range = max_shift == 0 or 2 * max_shift + 1 >= n
    for g1, g2 in itertools.product(elements, repeat=2):
        product = oracle[g1] @ oracle[g2]
        composed = _cached_permutation(_spec_fields(compose_fn(g1, g2)), n)
        if not np.array_equal(composed, product):
            return False
        if full_range and product.tobytes() not in members:
            return False
    return True

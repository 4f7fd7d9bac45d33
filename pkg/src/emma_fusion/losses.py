"""Loss terms for both training stages.

Everything here accepts torch tensors whose last two axes are ``(H, W)``;
numpy arrays are converted to float64 tensors and scalar results come back
as Python floats. All reductions are means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, ShapeError

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 0.1

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InputError(f"{name} must be finite and non-negative, got {value}")


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _same_shape(*xs):
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def _scalar(value, to_float):
    return float(value) if to_float else value


def sobel(x):
    """Sobel responses with reflect padding; output has a new axis of size 2 (gx, gy) before H, W."""
    t, was_numpy = _as_tensor(x)
    if t.ndim < 2:
        raise ShapeError(f"sobel needs at least 2 dims, got {tuple(t.shape)}")
    lead = t.shape[:-2]
    h, w = t.shape[-2:]
    flat = t.reshape(-1, 1, h, w)
    kx = torch.tensor(SOBEL_X, dtype=t.dtype, device=t.device)
    kernels = torch.stack([kx, kx.T]).unsqueeze(1)
    out = F.conv2d(F.pad(flat, (1, 1, 1, 1), mode="reflect"), kernels)
    out = out.reshape(*lead, 2, h, w)
    return out.numpy() if was_numpy else out


def composite_distance(x, xhat):
    """l1 of pixels plus l1 of Sobel responses."""
    a, to_float = _as_tensor(x)
    b, _ = _as_tensor(xhat)
    _same_shape(a, b)
    value = (a - b).abs().mean() + (sobel(a) - sobel(b)).abs().mean()
    return _scalar(value, to_float)


def sensing_reconstruction_loss(sensor_out, source):
    a, to_float = _as_tensor(sensor_out)
    b, _ = _as_tensor(source)
    _same_shape(a, b)
    return _scalar(((a - b) ** 2).mean(), to_float)


def traditional_fusion_loss(f, i, v):
    """l1(f, i) + l1(f, v)."""
    tf, to_float = _as_tensor(f)
    ti, _ = _as_tensor(i)
    tv, _ = _as_tensor(v)
    _same_shape(tf, ti, tv)
    return _scalar((tf - ti).abs().mean() + (tf - tv).abs().mean(), to_float)


def emma_total_loss(f, f_t, f_hat_t, i, v, sensed_i, sensed_v, weights: LossWeights):
    """Combine the three EMMA terms.

    The caller supplies ``sensed_i = A_i(f)``, ``sensed_v = A_v(f)``,
    ``f_t = T_g f`` and ``f_hat_t = F(A_i(f_t), A_v(f_t))``. Returns
    ``(total, terms)`` where ``terms`` holds ``sensing_i``, ``sensing_v`` and
    ``equivariance``.
    """
    tensors = [_as_tensor(x) for x in (f, f_t, f_hat_t, i, v, sensed_i, sensed_v)]
    to_float = tensors[0][1]
    f, f_t, f_hat_t, i, v, sensed_i, sensed_v = (t for t, _ in tensors)
    _same_shape(f, f_t, f_hat_t, i, v, sensed_i, sensed_v)
    terms = {
        "sensing_i": composite_distance(sensed_i, i),
        "sensing_v": composite_distance(sensed_v, v),
        "equivariance": composite_distance(f_t, f_hat_t),
    }
    total = terms["sensing_i"] + weights.alpha1 * terms["sensing_v"]
    if weights.alpha2:
        total = total + weights.alpha2 * terms["equivariance"]
    if to_float:
        return float(total), {k: float(t) for k, t in terms.items()}
    return total, terms

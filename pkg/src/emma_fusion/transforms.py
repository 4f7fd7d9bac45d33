"""Exact pixel-permutation transforms: cyclic shifts, quarter turns, axis flips.

A transform acts on the last two axes of an array (numpy or torch) in the
fixed order flip -> rotate -> shift. In pixel coordinates centred on the
image, flips and rotations are signed permutation matrices and shifts are
translations, which is what makes ``inverse`` and ``compose`` independent of
the image size.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError

# linear parts acting on (row, col) displacement vectors
_FLIP_H = ((1, 0), (0, -1))
_FLIP_V = ((-1, 0), (0, 1))
_ROT = ((0, -1), (1, 0))  # one counterclockwise quarter turn (np.rot90)
_EYE = ((1, 0), (0, 1))


def _matmul(a, b):
    return tuple(
        tuple(sum(a[i][k] * b[k][j] for k in range(2)) for j in range(2)) for i in range(2)
    )


def _matvec(a, v):
    return tuple(a[i][0] * v[0] + a[i][1] * v[1] for i in range(2))


@dataclass(frozen=True)
class TransformSpec:
    shift_y: int = 0
    shift_x: int = 0
    rot_quarter: int = 0
    flip_h: bool = False
    flip_v: bool = False

    def __post_init__(self):
        if self.rot_quarter not in (0, 1, 2, 3):
            raise ConfigError(f"rot_quarter must be in 0..3, got {self.rot_quarter}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TransformSpec":
        return cls(
            shift_y=int(obj["shift_y"]),
            shift_x=int(obj["shift_x"]),
            rot_quarter=int(obj["rot_quarter"]),
            flip_h=bool(obj["flip_h"]),
            flip_v=bool(obj["flip_v"]),
        )

    @property
    def linear(self):
        m = _EYE
        if self.flip_h:
            m = _matmul(_FLIP_H, m)
        if self.flip_v:
            m = _matmul(_FLIP_V, m)
        for _ in range(self.rot_quarter):
            m = _matmul(_ROT, m)
        return m

    @property
    def is_identity(self) -> bool:
        return self.linear == _EYE and self.shift_y == 0 and self.shift_x == 0


IDENTITY = TransformSpec()

# canonical (rot, flip_h, flip_v) for each of the 8 linear parts: fewest flips wins
_LINEAR_FORMS: dict = {}
for _fh, _fv, _rot in sorted(
    itertools.product((False, True), (False, True), range(4)), key=lambda t: (t[0] + t[1], t)
):
    _spec = TransformSpec(rot_quarter=_rot, flip_h=_fh, flip_v=_fv)
    _LINEAR_FORMS.setdefault(_spec.linear, (_rot, _fh, _fv))


def _from_affine(linear, shift) -> TransformSpec:
    rot, fh, fv = _LINEAR_FORMS[linear]
    return TransformSpec(shift_y=shift[0], shift_x=shift[1], rot_quarter=rot, flip_h=fh, flip_v=fv)


def compose(g1: TransformSpec, g2: TransformSpec) -> TransformSpec:
    """The transform equal to applying ``g2`` first, then ``g1``."""
    l1 = g1.linear
    moved = _matvec(l1, (g2.shift_y, g2.shift_x))
    return _from_affine(
        _matmul(l1, g2.linear), (g1.shift_y + moved[0], g1.shift_x + moved[1])
    )


def inverse(g: TransformSpec) -> TransformSpec:
    lin = g.linear
    inv = tuple(tuple(lin[j][i] for j in range(2)) for i in range(2))  # orthogonal
    back = _matvec(inv, (-g.shift_y, -g.shift_x))
    return _from_affine(inv, back)


def apply(g: TransformSpec, x):
    """Apply ``g`` to the last two axes of a numpy array or torch tensor."""
    if x.ndim < 2:
        raise ShapeError(f"need at least 2 dims, got shape {tuple(x.shape)}")
    h, w = x.shape[-2], x.shape[-1]
    if g.rot_quarter % 2 and h != w:
        raise ShapeError(f"odd quarter turn needs a square image, got {h}x{w}")
    if isinstance(x, torch.Tensor):
        if g.flip_h:
            x = torch.flip(x, dims=(-1,))
        if g.flip_v:
            x = torch.flip(x, dims=(-2,))
        if g.rot_quarter:
            x = torch.rot90(x, g.rot_quarter, dims=(-2, -1))
        if g.shift_y or g.shift_x:
            x = torch.roll(x, shifts=(g.shift_y, g.shift_x), dims=(-2, -1))
        return x
    x = np.asarray(x)
    if g.flip_h:
        x = x[..., ::-1]
    if g.flip_v:
        x = x[..., ::-1, :]
    if g.rot_quarter:
        x = np.rot90(x, g.rot_quarter, axes=(-2, -1))
    if g.shift_y or g.shift_x:
        x = np.roll(x, (g.shift_y, g.shift_x), axis=(-2, -1))
    return np.ascontiguousarray(x)


@dataclass(frozen=True)
class GroupConfig:
    """Which generators are enabled when sampling transforms.

    Shifts range over ``[-max_shift, max_shift]`` on each axis.
    """

    shifts: bool = True
    max_shift: int = 16
    rotations: bool = True
    flips: bool = True
    nontrivial: bool = True

    @classmethod
    def for_patch(cls, patch_size: int, **kw) -> "GroupConfig":
        return cls(max_shift=max(patch_size // 4, 1), **kw)


@functools.lru_cache(maxsize=32)
def _enumerate(config: GroupConfig) -> tuple[TransformSpec, ...]:
    if config.max_shift < 0:
        raise ConfigError("max_shift must be non-negative")
    shift_range = range(-config.max_shift, config.max_shift + 1) if config.shifts else [0]
    rots = range(4) if config.rotations else [0]
    flips = [False, True] if config.flips else [False]
    seen = set()
    out = []
    for fh, fv, rot, sy, sx in itertools.product(flips, flips, rots, shift_range, shift_range):
        g = TransformSpec(shift_y=sy, shift_x=sx, rot_quarter=rot, flip_h=fh, flip_v=fv)
        key = (g.linear, sy, sx)
        if key in seen or (config.nontrivial and g.is_identity):
            continue
        seen.add(key)
        out.append(g)
    if not out:
        raise ConfigError("group config enables no transforms")
    return tuple(out)


def group_elements(config: GroupConfig) -> list[TransformSpec]:
    """Distinct elements of the finite set selected by ``config``, in a fixed order."""
    return list(_enumerate(config))


def sample(rng: np.random.Generator, config: GroupConfig) -> TransformSpec:
    """Draw uniformly from ``group_elements(config)``."""
    elements = _enumerate(config)
    return elements[int(rng.integers(len(elements)))]


def transform_matrix(g: TransformSpec, n: int) -> np.ndarray:
    """Materialize ``g`` on an ``n x n`` grid as an ``n^2 x n^2`` 0/1 matrix."""
    basis = np.eye(n * n).reshape(n * n, n, n)
    return np.stack([apply(g, e).reshape(-1) for e in basis], axis=1)


def is_permutation_matrix(t: np.ndarray) -> bool:
    """True iff ``t`` is square, 0/1 valued, and satisfies ``t.T @ t == I``."""
    t = np.asarray(t)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        return False
    if not np.all((t == 0) | (t == 1)):
        return False
    return bool(np.array_equal(t.T @ t, np.eye(t.shape[0])))


def permutation_matrix_check(g: TransformSpec, n: int) -> bool:
    if n > 8:
        raise ShapeError("permutation_matrix_check is limited to n <= 8")
    return is_permutation_matrix(transform_matrix(g, n))

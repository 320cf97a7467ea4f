"""Boxes, the Neumann cosine basis and mollified white noise.

Grids are cell-centered: along each axis the points are
``x_j = y - L/2 + (j + 1/2) h`` for ``j = 0..m-1`` with ``m = L/h``.  On such
a grid the Neumann cosines are exactly the DCT-II basis, so synthesis and
analysis of basis expansions are orthonormal DCTs up to a factor ``h^(d/2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft

_INT_TOL = 1e-9


@dataclass(frozen=True)
class LatticeBox:
    """Centered cube ``y + [-L/2, L/2]^d`` sampled at spacing ``h``."""

    center: tuple[float, ...]
    side: float
    spacing: float
    dim: int

    @property
    def m(self) -> int:
        return int(round(self.side / self.spacing))

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.m,) * self.dim

    @property
    def n_points(self) -> int:
        return self.m**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float) - self.side / 2

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float) + self.side / 2

    def axis(self, i: int) -> np.ndarray:
        """Grid coordinates along axis ``i``."""
        return self.center[i] - self.side / 2 + (np.arange(self.m) + 0.5) * self.spacing

    def points(self) -> np.ndarray:
        """All grid points as an ``(m**d, d)`` array in C order."""
        mesh = np.meshgrid(*[self.axis(i) for i in range(self.dim)], indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def index_to_point(self, index) -> np.ndarray:
        index = np.asarray(index)
        return self.lower + (index + 0.5) * self.spacing

    def point_to_index(self, x) -> np.ndarray:
        """Nearest grid index (clipped into the box)."""
        x = np.asarray(x, dtype=float)
        j = np.floor((x - self.lower) / self.spacing).astype(int)
        return np.clip(j, 0, self.m - 1)

    def contains(self, x) -> np.ndarray | bool:
        """Membership in the closed cube."""
        x = np.asarray(x, dtype=float)
        inside = np.all((x >= self.lower - 1e-12) & (x <= self.upper + 1e-12), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def contains_box(self, other: "LatticeBox") -> bool:
        return bool(
            np.all(other.lower >= self.lower - 1e-12) and np.all(other.upper <= self.upper + 1e-12)
        )

    def offset_of(self, sub: "LatticeBox") -> tuple[int, ...]:
        """Index offset of ``sub`` inside this box; raises if not aligned."""
        if sub.dim != self.dim or not math.isclose(sub.spacing, self.spacing):
            raise ValueError("sub-box must share dimension and spacing")
        if not self.contains_box(sub):
            raise ValueError("sub-box is not contained in the box")
        shift = (sub.lower - self.lower) / self.spacing
        offset = np.round(shift)
        if np.max(np.abs(shift - offset)) > 1e-6:
            raise ValueError(f"grids are misaligned: fractional offset {shift - offset}")
        return tuple(int(o) for o in offset)


def make_box(y, L: float, h: float, d: int) -> LatticeBox:
    if d not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {d}")
    if L <= 0 or h <= 0:
        raise ValueError("side and spacing must be positive")
    ratio = L / h
    if abs(ratio - round(ratio)) > _INT_TOL * max(1.0, ratio) or round(ratio) < 2:
        raise ValueError(f"L/h = {ratio:g} must be an integer >= 2")
    y = np.broadcast_to(np.asarray(y, dtype=float), (d,))
    return LatticeBox(tuple(float(v) for v in y), float(L), float(h), d)


@dataclass(frozen=True)
class GridField:
    """Values sampled on a box; vector fields carry a leading component axis."""

    box: LatticeBox
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        shape = self.values.shape
        if shape[-self.box.dim :] != self.box.shape:
            raise ValueError(f"values of shape {shape} do not match grid {self.box.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"field {self.label!r} has non-finite values")

    def _check(self, other: "GridField"):
        if other.box != self.box:
            raise ValueError("fields live on different boxes")

    def __add__(self, other):
        if isinstance(other, GridField):
            self._check(other)
            return GridField(self.box, self.values + other.values, self.label)
        return GridField(self.box, self.values + other, self.label)

    def __sub__(self, other):
        if isinstance(other, GridField):
            self._check(other)
            return GridField(self.box, self.values - other.values, self.label)
        return GridField(self.box, self.values - other, self.label)

    def __mul__(self, c):
        return GridField(self.box, self.values * c, self.label)

    __rmul__ = __mul__

    def inner(self, other: "GridField") -> float:
        """Discrete L2 inner product ``h^d sum f g``."""
        self._check(other)
        return float(self.box.cell_volume * np.sum(self.values * other.values))

    def norm(self) -> float:
        return math.sqrt(self.inner(self))

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))


def tau(r) -> np.ndarray:
    """Smooth even cutoff: 1 on ``|r| <= 1/2``, 0 on ``|r| >= 1``."""
    r = np.abs(np.asarray(r, dtype=float))
    out = np.zeros_like(r)
    out[r <= 0.5] = 1.0
    mid = (r > 0.5) & (r < 1.0)
    s = 2.0 * r[mid] - 1.0
    out[mid] = np.exp(1.0 - 1.0 / (1.0 - s**2))
    return out


def neumann_basis_eval(k, box: LatticeBox, x) -> np.ndarray | float:
    """Orthonormal Neumann cosine ``n_k`` of the box, evaluated at ``x``."""
    k = np.asarray(k, dtype=int)
    x = np.asarray(x, dtype=float)
    if k.shape != (box.dim,) or np.any(k < 0):
        raise ValueError("k must be a nonnegative multi-index of length d")
    if not np.all(box.contains(x)):
        raise ValueError("evaluation point outside the box")
    L = box.side
    s = x - box.lower
    val = np.ones(x.shape[:-1])
    for i in range(box.dim):
        if k[i] == 0:
            val = val * L**-0.5
        else:
            val = val * math.sqrt(2.0 / L) * np.cos(math.pi * k[i] * s[..., i] / L)
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True)
class NoiseField:
    """Neumann-basis coefficients of a mollified white noise.

    ``modes`` lists the multi-indices with ``tau(eps k / L) > 0``; ``coeffs``
    holds the corresponding i.i.d. standard Gaussians.  The realized noise is
    ``sum_k coeffs_k * tau(eps k / L) * n_k``.
    """

    box: LatticeBox
    epsilon: float
    seed: int
    modes: np.ndarray = field(repr=False)
    coeffs: np.ndarray = field(repr=False)

    @property
    def k_max(self) -> int:
        return int(self.modes.max()) if len(self.modes) else 0

    @property
    def weights(self) -> np.ndarray:
        return tau(self.epsilon / self.box.side * np.linalg.norm(self.modes, axis=1))

    def weighted(self) -> np.ndarray:
        return self.coeffs * self.weights

    def with_coeffs(self, coeffs) -> "NoiseField":
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != self.coeffs.shape:
            raise ValueError("coefficient table shape mismatch")
        return NoiseField(self.box, self.epsilon, self.seed, self.modes, coeffs)

    def __add__(self, other: "NoiseField") -> "NoiseField":
        if other.box != self.box or other.epsilon != self.epsilon:
            raise ValueError("noise fields differ in box or epsilon")
        return self.with_coeffs(self.coeffs + other.coeffs)


def support_modes(box: LatticeBox, eps: float) -> np.ndarray:
    k_max = int(math.ceil(box.side / eps))
    grids = np.meshgrid(*[np.arange(k_max + 1)] * box.dim, indexing="ij")
    modes = np.stack([g.ravel() for g in grids], axis=-1)
    keep = tau(eps / box.side * np.linalg.norm(modes, axis=1)) > 0
    return modes[keep]


def sample_noise(box: LatticeBox, eps: float, seed: int) -> NoiseField:
    if not 0 < eps <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {eps}")
    modes = support_modes(box, eps)
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(len(modes))
    return NoiseField(box, float(eps), int(seed), modes, coeffs)


def _fold(k: np.ndarray, m: int):
    """Map cosine index ``k`` to its alias ``k' < m`` on an m-point cell-centered grid.

    Returns ``(k', sign)`` with ``cos(pi k (j+1/2)/m) = sign * cos(pi k' (j+1/2)/m)``;
    ``sign = 0`` for the identically vanishing indices ``k = m mod 2m``.
    """
    q, r = np.divmod(k, 2 * m)
    sign = np.where(q % 2 == 0, 1.0, -1.0)
    hi = r > m
    kp = np.where(hi, 2 * m - r, r)
    sign = np.where(hi, -sign, sign)
    sign = np.where(r == m, 0.0, sign)
    return np.where(r == m, 0, kp), sign


def mode_table(box: LatticeBox, modes: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Scatter basis coefficients onto the ``m^d`` grid-representable DCT table."""
    m = box.m
    table = np.zeros(box.shape)
    idx = []
    factor = np.asarray(values, dtype=float).copy()
    for i in range(box.dim):
        kp, sign = _fold(modes[:, i], m)
        # n_0 carries L^-1/2 where the folded non-zero modes carry (2/L)^1/2
        factor *= sign * np.where((kp == 0) & (modes[:, i] != 0), math.sqrt(2.0), 1.0)
        idx.append(kp)
    np.add.at(table, tuple(idx), factor)
    return table


def synthesize(box: LatticeBox, table: np.ndarray) -> np.ndarray:
    """Grid values of ``sum_k table[k] n_k``."""
    return fft.idctn(table, type=2, norm="ortho") * box.spacing ** (-box.dim / 2)


def analyze(box: LatticeBox, values: np.ndarray) -> np.ndarray:
    """Discrete Neumann coefficients ``<f, n_k>_h`` of grid values."""
    return fft.dctn(values, type=2, norm="ortho") * box.spacing ** (box.dim / 2)


def realize_noise(nf: NoiseField) -> GridField:
    table = mode_table(nf.box, nf.modes, nf.weighted())
    return GridField(nf.box, synthesize(nf.box, table), "xi")


def restrict_field(f: GridField, sub: LatticeBox) -> GridField:
    off = f.box.offset_of(sub)
    sl = tuple(slice(o, o + sub.m) for o in off)
    return GridField(sub, f.values[(...,) + sl].copy(), f.label)


def restrict_noise(nf: NoiseField, sub: LatticeBox) -> GridField:
    """The realization of ``nf`` read off on an aligned sub-box."""
    return restrict_field(realize_noise(nf), sub)


def renorm_constant(eps: float, d: int) -> float:
    """``log(1/eps) / (2 pi)`` in d = 2; no counterterm in lattice d = 3."""
    if not 0 < eps <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {eps}")
    if d == 3:
        return 0.0
    return math.log(1.0 / eps) / (2.0 * math.pi)


def wavenumbers(box: LatticeBox) -> list[np.ndarray]:
    """Per-axis Neumann wavenumbers ``pi k / L`` broadcast to the grid shape."""
    out = []
    for i in range(box.dim):
        shape = [1] * box.dim
        shape[i] = box.m
        out.append((math.pi * np.arange(box.m) / box.side).reshape(shape))
    return out


def neumann_laplacian_symbol(box: LatticeBox) -> np.ndarray:
    """Eigenvalues ``-pi^2 |k/L|^2`` of the Neumann Laplacian on the mode table."""
    return -sum(w**2 for w in wavenumbers(box))


def resolvent_apply(box: LatticeBox, values: np.ndarray, eta: float) -> np.ndarray:
    """``(eta - Laplacian/2)^-1`` in the Neumann cosine basis."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    coef = analyze(box, values)
    return synthesize(box, coef / (eta - 0.5 * neumann_laplacian_symbol(box)))


def spectral_laplacian(box: LatticeBox, values: np.ndarray) -> np.ndarray:
    return synthesize(box, analyze(box, values) * neumann_laplacian_symbol(box))


def spectral_gradient(box: LatticeBox, values: np.ndarray) -> np.ndarray:
    """Gradient of the cosine interpolant, returned with a leading axis of length d.

    Along axis ``i`` the derivative of ``cos(w s)`` is ``-w sin(w s)``, whose grid
    values are a DST-II synthesis with the index shifted by one.
    """
    coef = analyze(box, values) * box.spacing ** (-box.dim / 2)
    grads = []
    for i, w in enumerate(wavenumbers(box)):
        c = -w * coef
        # sin(pi k (j+1/2)/m) for k = 1..m  <->  DST-II index k-1; k = m term is zero
        c = np.moveaxis(c, i, 0)
        shifted = np.zeros_like(c)
        shifted[:-1] = c[1:]
        shifted = np.moveaxis(shifted, 0, i)
        g = fft.idst(shifted, type=2, norm="ortho", axis=i)
        for j in range(box.dim):
            if j != i:
                g = fft.idct(g, type=2, norm="ortho", axis=j)
        grads.append(g)
    return np.stack(grads)


def compute_Z(nf: NoiseField, eta: float = 1.0) -> GridField:
    """Solve ``(eta - Laplacian/2) Z = xi_eps`` mode by mode."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    w2 = (math.pi / nf.box.side) ** 2 * np.sum(nf.modes.astype(float) ** 2, axis=1)
    table = mode_table(nf.box, nf.modes, nf.weighted() / (eta + 0.5 * w2))
    return GridField(nf.box, synthesize(nf.box, table), "Z")

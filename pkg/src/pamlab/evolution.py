"""Evolution of the localized PAM, series expansion and peak-set extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .noise_field import GridField, LatticeBox, NoiseField, make_box, realize_noise, renorm_constant
from .spectrum import (
    HamiltonianOperator,
    Spectrum,
    _aligned_box,
    dense_eigenpairs,
    restricted_operator,
    top_eigenpairs,
)


class TruncationError(RuntimeError):
    """Discarded spectral modes may carry more than the requested fraction of the solution."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class InitialData:
    """``kind`` is ``"flat"``, ``"delta"`` (at ``site``) or ``"custom"`` (``field``)."""

    kind: str = "flat"
    site: tuple | None = None
    field: GridField | None = None

    @classmethod
    def flat(cls):
        return cls("flat")

    @classmethod
    def delta(cls, z):
        return cls("delta", site=tuple(float(v) for v in np.atleast_1d(z)))

    @classmethod
    def custom(cls, f: GridField):
        return cls("custom", field=f)

    def on(self, box: LatticeBox) -> GridField:
        if self.kind == "flat":
            return GridField(box, np.ones(box.shape), "phi")
        if self.kind == "delta":
            vals = np.zeros(box.shape)
            vals[tuple(box.point_to_index(self.site))] = box.spacing ** (-box.dim)
            return GridField(box, vals, "phi")
        if self.kind == "custom":
            if self.field.box != box:
                raise ValueError("custom initial data lives on a different box")
            return self.field
        raise ValueError(f"unknown initial data kind {self.kind!r}")


def evolve_spectral(spec: Spectrum, phi: InitialData, t: float, rtol: float = 1e-8) -> GridField:
    """``sum_n exp(t lambda_n) <v_n, phi> v_n`` over the retained eigenpairs.

    Raises :class:`TruncationError` when ``exp(t lambda_K) * ||phi - P phi||``
    exceeds ``rtol * ||u||``, ``P`` being the projection on the retained span.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    box = spec.box
    f = phi.on(box).values.ravel()
    V = spec.eigenvectors
    coef = box.cell_volume * (V @ f)
    u = (np.exp(t * spec.eigenvalues) * coef) @ V
    if spec.K < box.n_points:
        rest = max(box.cell_volume * float(f @ f) - float(coef @ coef), 0.0)
        bound = math.exp(t * spec.eigenvalues[-1]) * math.sqrt(rest)
        unorm = math.sqrt(box.cell_volume * float(u @ u))
        if bound > rtol * unorm:
            raise TruncationError(
                f"discarded-mode bound {bound:.3g} exceeds {rtol:g} * |u| = {rtol * unorm:.3g}; "
                f"increase K beyond {spec.K}"
            )
    return GridField(box, u.reshape(box.shape), "u")


def conjugate_gradient(apply, b, x0=None, tol=1e-10, maxiter=None):
    """Plain CG for SPD ``apply``; returns ``(x, iterations)`` or raises with the residual trace."""
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply(x)
    p = r.copy()
    rs = float(np.vdot(r, r))
    bnorm = math.sqrt(float(np.vdot(b, b))) or 1.0
    maxiter = maxiter or 10 * b.size
    trace = []
    for it in range(maxiter):
        res = math.sqrt(rs) / bnorm
        trace.append(res)
        if res <= tol:
            return x, it
        Ap = apply(p)
        alpha = rs / float(np.vdot(p, Ap))
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(np.vdot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise ConvergenceError(f"CG did not reach {tol:g} in {maxiter} iterations (last {trace[-1]:.3g})", trace)


def evolve_crank_nicolson(
    H: HamiltonianOperator, phi: InitialData, t: float, dt: float, cg_tol: float = 1e-10
) -> GridField:
    """``(I - dt/2 H) u_{n+1} = (I + dt/2 H) u_n`` for ``ceil(t/dt)`` steps of size ``t/steps``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    steps = max(1, math.ceil(t / dt - 1e-12))
    k = t / steps
    u = phi.on(H.box).values.astype(float).copy()
    vmax = float(H.potential.values.max())
    if 0.5 * k * vmax >= 1.0:
        raise ValueError(f"I - dt/2 H is not positive definite for dt={k:g} (max potential {vmax:g})")

    def lhs(v):
        return v - 0.5 * k * H.apply(v)

    for _ in range(steps):
        rhs = u + 0.5 * k * H.apply(u)
        u, _ = conjugate_gradient(lhs, rhs, x0=u, tol=cg_tol)
    return GridField(H.box, u, "u")


def localized_solution(H: HamiltonianOperator, phi: InitialData, t: float, rtol: float = 1e-8, dense_limit=2500):
    """Spectral solution on one box, growing K until the truncation bound holds."""
    if H.n <= dense_limit:
        return evolve_spectral(dense_eigenpairs(H), phi, t, rtol), None
    K = 16
    while True:
        spec = top_eigenpairs(H, K, method="lanczos")
        try:
            return evolve_spectral(spec, phi, t, rtol), spec
        except TruncationError:
            if 2 * K > H.n:
                return evolve_spectral(dense_eigenpairs(H), phi, t, rtol), None
            K *= 2


def _sample(f: GridField, probes) -> np.ndarray:
    idx = f.box.point_to_index(np.asarray(probes, dtype=float))
    return f.values[tuple(idx.T)]


@dataclass
class SeriesSolution:
    center: tuple
    L_t: int
    terms: np.ndarray  # (K+1, n_probes)
    box_sides: list
    clamped: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def K(self) -> int:
        return len(self.terms) - 1

    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.terms, axis=0)

    def total(self) -> np.ndarray:
        return self.terms.sum(axis=0)

    def decay_ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.terms[1:] / self.terms[:-1]


def series_expansion(master: NoiseField, y, t: float, K: int, probes, b: float = 1.5) -> SeriesSolution:
    """Annular terms from nested Dirichlet boxes ``Q^y_{L_t^(k+1)}``, ``L_t = floor(t^b)``.

    Term 0 is the solution on ``Q^y_{L_t}``; term ``k >= 1`` is the increment
    between the boxes of side ``L_t^(k+1)`` and ``L_t^k``, clamped at 0 (the
    clamped amount is reported in ``clamped``).
    """
    if b <= 1:
        raise ValueError("the box exponent b must exceed 1")
    if K < 0:
        raise ValueError("K must be nonnegative")
    L_t = max(1, math.floor(t**b))
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    h = master.box.spacing
    first = make_box(y, L_t, h, master.box.dim) if (L_t / h).is_integer() else None
    if first is None:
        raise ValueError(f"L_t = {L_t} is not a multiple of h = {h}")
    if not np.all(first.contains(probes)):
        raise ValueError("probes must lie in Q^y_{L_t}")
    xi = realize_noise(master)
    H = HamiltonianOperator(master.box, xi - renorm_constant(master.epsilon, master.box.dim))
    values, sides = [], []
    for k in range(K + 1):
        side = L_t ** (k + 1)
        sub = _aligned_box(master.box, y, side)
        if not master.box.contains_box(sub) or not math.isclose(sub.side, side):
            raise ValueError(f"master box too small for side {side}")
        u, _ = localized_solution(restricted_operator(H, sub), InitialData.flat(), t)
        values.append(_sample(u, probes))
        sides.append(side)
    values = np.array(values)
    terms = np.empty_like(values)
    terms[0] = values[0]
    raw = np.diff(values, axis=0)
    terms[1:] = np.maximum(raw, 0.0)
    clamped = np.maximum(-raw, 0.0)
    return SeriesSolution(tuple(np.atleast_1d(y)), L_t, terms, sides, clamped)


def _log_field(u: GridField) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.where(u.values > 0, u.values, 0.0))


def _field_points(u: GridField):
    pts = u.box.points()
    return pts, np.linalg.norm(pts, axis=1)


def spatial_threshold_log(alpha, t, r, d):
    return alpha * t * np.log(r) ** (2.0 / (4.0 - d))


def peak_set_spatial(u: GridField, t: float, alpha: float, d: int | None = None, log_values=None) -> np.ndarray:
    """Grid points with ``u(t, x) >= exp(alpha t (log|x|)^(2/(4-d)))`` and ``|x| > e``."""
    if alpha <= 0 or t <= 0:
        raise ValueError("alpha and t must be positive")
    d = d or u.box.dim
    pts, r = _field_points(u)
    logu = (_log_field(u) if log_values is None else np.asarray(log_values)).ravel()
    ok = r > math.e
    keep = ok & (logu >= spatial_threshold_log(alpha, t, np.where(ok, r, math.e), d))
    return pts[keep]


def peak_set_spatiotemporal(snapshots, beta: float, v: float, d: int) -> np.ndarray:
    """Chart points ``(exp(t/v), x)`` with ``u(t, x) >= exp(beta t^((6-d)/(4-d)))``.

    ``snapshots`` is a sequence of ``(t, GridField)`` sorted by time.
    """
    if beta <= 0 or v <= 0:
        raise ValueError("beta and v must be positive")
    times = [s[0] for s in snapshots]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("snapshots must be sorted in time")
    rows = []
    for t, u in snapshots:
        level = beta * t ** ((6.0 - d) / (4.0 - d))
        pts = u.box.points()
        sel = _log_field(u).ravel() >= level
        s = math.exp(t / v)
        rows.append(np.column_stack([np.full(sel.sum(), s), pts[sel]]))
    if not rows:
        return np.zeros((0, d + 1))
    return np.vstack(rows)


def chart_time(t, v):
    return np.exp(np.asarray(t) / v)


def asymptotics_statistic(u: GridField, t: float, d: int, shells, c_d: float, log_values=None):
    """Per-shell maxima of ``log_+ u / (log|x|)^(2/(4-d))`` and their ratio to ``(d/c_d)^(2/(4-d)) t``.

    Returns a dict with ``shell``, ``stat``, ``stat_over_t``, ``ratio`` arrays
    (NaN for shells not covered by the field).
    """
    from .macro_fractal import shell_index

    pts, r = _field_points(u)
    logu = (_log_field(u) if log_values is None else np.asarray(log_values)).ravel()
    logp = np.maximum(logu, 0.0)
    ok = r > 1.0
    q = np.full(len(r), np.nan)
    q[ok] = logp[ok] / np.log(r[ok]) ** (2.0 / (4.0 - d))
    sh = shell_index(pts)
    shells = list(shells)
    stat = np.array([np.nanmax(q[sh == n]) if np.any((sh == n) & ok) else np.nan for n in shells])
    pred = (d / c_d) ** (2.0 / (4.0 - d)) * t
    return {
        "shell": np.array(shells),
        "stat": stat,
        "stat_over_t": stat / t,
        "ratio": stat / pred,
        "predicted": pred,
    }


def local_asymptotics_check(master: NoiseField, y, t_grid, b: float = 1.0, radius: float = 1.0):
    """Rows ``(t, L_t, lambda_1, ratio, skipped)`` with ratio ``sup_{B(y,1)} log u / (t lambda_1)``."""
    xi = realize_noise(master)
    H = HamiltonianOperator(master.box, xi - renorm_constant(master.epsilon, master.box.dim))
    h = master.box.spacing
    rows = []
    for t in t_grid:
        side = max(2 * h, h * round(t**b / h))
        sub = _aligned_box(master.box, y, side)
        Hs = restricted_operator(H, sub)
        lam = float(top_eigenpairs(Hs, 1).eigenvalues[0])
        if lam <= 0:
            rows.append((t, sub.side, lam, float("nan"), True))
            continue
        u, _ = localized_solution(Hs, InitialData.flat(), t)
        pts = sub.points()
        dist = np.linalg.norm(pts - np.asarray(y, dtype=float), axis=1)
        near = dist <= max(radius, dist.min())
        top = float(np.max(u.values.ravel()[near]))
        rows.append((t, sub.side, lam, math.log(top) / (t * lam), False))
    return rows


def tile_seed(seed: int, index) -> int:
    """Noise seed of the tile with integer multi-index ``index``."""
    # zigzag keeps the entropy words nonnegative
    words = [int(seed)] + [2 * int(k) if k >= 0 else -2 * int(k) - 1 for k in index]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


def tile_indices(d: int, L: float, radius: float, inner: float = 0.0) -> np.ndarray:
    """Multi-indices k of the tiles [kL, (k+1)L)^d meeting [-radius, radius)^d
    but not contained in [-inner, inner)^d."""
    lo, hi = math.floor(-radius / L), math.ceil(radius / L) - 1
    ax = np.arange(lo, hi + 1)
    K = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    inside = np.all((K * L >= -inner) & ((K + 1) * L <= inner), axis=1)
    return K[~inside]


def tiled_log_field(d: int, t: float, L: float, h: float, eps: float, seed: int,
                    radius: float, inner: float = 0.0, batch: int = 512):
    """``log u(t, x)`` with flat data, assembled from independent Dirichlet tiles.

    Each tile of side L carries its own noise realization (seed from
    :func:`tile_seed`) and is solved exactly by a dense eigendecomposition.
    All tiles share one shape, so the coefficient-to-potential map and the
    Laplacian are built once and the solves are batched.  Returns
    ``(points, log_u)``.
    """
    from .noise_field import realize_noise, sample_noise
    from .spectrum import assemble_from_potential

    ref = make_box(np.full(d, L / 2), L, h, d)
    proto = sample_noise(ref, eps, 0)
    n_modes = len(proto.coeffs)
    M = np.empty((ref.n_points, n_modes))
    for i in range(n_modes):
        e = np.zeros(n_modes)
        e[i] = 1.0
        M[:, i] = realize_noise(proto.with_coeffs(e)).values.ravel()
    A = assemble_from_potential(ref, np.zeros(ref.shape)).to_dense()
    c = renorm_constant(eps, d)
    local = ref.points()
    K = tile_indices(d, L, radius, inner)
    pts, logs = [], []
    for start in range(0, len(K), batch):
        ks = K[start:start + batch]
        C = np.stack([np.random.default_rng(tile_seed(seed, k)).standard_normal(n_modes) for k in ks])
        V = C @ M.T - c
        H = np.broadcast_to(A, (len(ks),) + A.shape).copy()
        idx = np.arange(ref.n_points)
        H[:, idx, idx] += V
        lam, Q = np.linalg.eigh(H)
        top = lam[:, -1:]
        w = np.exp(t * (lam - top)) * Q.sum(axis=1)
        u = np.einsum("bij,bj->bi", Q, w)
        logs.append(np.log(np.maximum(u, 1e-300)) + t * top)
        pts.append((local[None, :, :] + (ks * L)[:, None, :]).reshape(-1, d))
    return np.vstack(pts), np.concatenate(logs).ravel()


def peak_points(points: np.ndarray, log_u: np.ndarray, t: float, alpha: float, d: int) -> np.ndarray:
    """Points of a scattered field in the spatial peak set at level alpha."""
    if alpha <= 0 or t <= 0:
        raise ValueError("alpha and t must be positive")
    r = np.linalg.norm(points, axis=1)
    ok = r > math.e
    keep = ok & (log_u >= spatial_threshold_log(alpha, t, np.where(ok, r, math.e), d))
    return points[keep]


def peak_dimension_trend(d: int, t: float, alphas, shells, seeds, L: float = 4.0, h: float = 0.5,
                         eps: float = 0.5, rhos=None):
    """Estimated macroscopic dimension of the spatial peak set per level and seed.

    Returns rows ``(seed, alpha, n_points, estimate)`` and the per-level mean
    over seeds that produced an estimate."""
    from .macro_fractal import PointCloud, dim_estimate

    shells = list(shells)
    rhos = np.round(np.arange(0.05, d + 0.0001, 0.05), 10) if rhos is None else np.asarray(rhos)
    radius = math.exp(max(shells))
    inner = math.exp(min(shells) - 1)
    rows = []
    for s in seeds:
        P, logu = tiled_log_field(d, t, L, h, eps, s, radius, inner)
        for a in alphas:
            E = PointCloud(peak_points(P, logu, t, a, d))
            est = dim_estimate(E, rhos, shells).estimate if len(E) else None
            rows.append((s, a, len(E), est))
    means = []
    for a in alphas:
        vals = [r[3] for r in rows if r[1] == a and r[3] is not None]
        means.append(float(np.mean(vals)) if vals else float("nan"))
    return rows, np.array(means)

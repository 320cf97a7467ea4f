"""Modified Feynman-Kac representation at fixed mollification.

With ``U = Z + Y``, Girsanov's theorem turns the killed Brownian expectation for
the potential ``xi_eps - c_eps`` into an expectation over the diffusion
``dX = grad U(X) dt + dB`` with exponent integrand
``xi_eps - c_eps + U''/2 + |grad U|^2/2``.  The two resolvent equations
``(eta_Z - Delta/2) Z = xi_eps`` and
``(eta - Delta/2) Y = |grad Z|^2/2 + grad Y . grad Z + |grad Y|^2/2``
reduce that integrand to ``eta_Z Z + eta Y - c_eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .noise_field import (
    GridField,
    LatticeBox,
    NoiseField,
    compute_Z,
    make_box,
    renorm_constant,
    resolvent_apply,
    spectral_gradient,
)

BLOCK = 4096


class ResolventError(RuntimeError):
    def __init__(self, message, ratios=None):
        super().__init__(message)
        self.ratios = ratios


def _nonlinearity(gZ, gY):
    return 0.5 * np.sum(gZ**2, axis=0) + np.sum(gY * gZ, axis=0) + 0.5 * np.sum(gY**2, axis=0)


def resolvent_residual(box: LatticeBox, Z, Y, eta, grad_Z=None) -> float:
    """Sup-norm of ``(eta - Delta/2) Y - N(Y)`` with spectral derivatives."""
    from .noise_field import spectral_laplacian

    gZ = spectral_gradient(box, Z) if grad_Z is None else grad_Z
    gY = spectral_gradient(box, Y)
    lhs = eta * Y - 0.5 * spectral_laplacian(box, Y)
    return float(np.max(np.abs(lhs - _nonlinearity(gZ, gY))))


def solve_resolvent_Y(
    Z: GridField,
    eta0: float = 1.0,
    tol: float = 1e-10,
    grad_Z=None,
    damping: float = 1.0,
    max_iter: int = 500,
    eta_cap: float = 1e6,
    contraction_limit: float = 0.9,
):
    """Picard iteration for the resolvent equation with adaptive ``eta``.

    Whenever the ratio of successive differences exceeds ``contraction_limit``
    the iteration restarts with ``eta`` doubled.  ``grad_Z`` overrides the
    spectral gradient of Z.  Returns ``(Y, eta, info)``; ``info`` records the
    contraction-ratio trace and final residual.
    """
    if eta0 <= 0:
        raise ValueError("eta0 must be positive")
    box = Z.box
    gZ = spectral_gradient(box, Z.values) if grad_Z is None else np.asarray(grad_Z)
    source = 0.5 * np.sum(gZ**2, axis=0)
    eta = float(eta0)
    trace = []
    while eta <= eta_cap:
        Y = np.zeros(box.shape)
        prev_diff = None
        ratios = []
        ok = False
        for it in range(max_iter):
            gY = spectral_gradient(box, Y)
            new = resolvent_apply(box, source + np.sum(gY * gZ, axis=0) + 0.5 * np.sum(gY**2, axis=0), eta)
            new = (1 - damping) * Y + damping * new
            diff = float(np.max(np.abs(new - Y)))
            Y = new
            if prev_diff is not None and prev_diff > 0:
                ratios.append(diff / prev_diff)
                if it >= 3 and ratios[-1] > contraction_limit:
                    break
            if not np.isfinite(diff):
                break
            prev_diff = diff
            # the residual is roughly eta * diff, so small steps alone do not suffice
            if diff <= tol and (diff == 0.0 or resolvent_residual(box, Z.values, Y, eta, gZ) <= tol):
                ok = True
                break
        trace.append((eta, ratios))
        if ok:
            res = resolvent_residual(box, Z.values, Y, eta, gZ)
            info = {"eta": eta, "iterations": it + 1, "residual": res, "trace": trace}
            return GridField(box, Y, "Y"), eta, info
        eta *= 2.0
    raise ResolventError(f"no contraction up to eta cap {eta_cap:g}", ratios=trace)


def refine_box(box: LatticeBox, factor: int) -> LatticeBox:
    return make_box(box.center, box.side, box.spacing / factor, box.dim)


def _interp_setup(box: LatticeBox, X):
    s = (X - box.lower) / box.spacing - 0.5
    s = np.clip(s, 0.0, box.m - 1.0)
    i0 = np.minimum(np.floor(s).astype(int), box.m - 2)
    return i0, s - i0


def interpolate(box: LatticeBox, arrays, X):
    """Multilinear interpolation of grid arrays at points X (clamped to the grid hull)."""
    X = np.atleast_2d(X)
    i0, w = _interp_setup(box, X)
    d = box.dim
    out = [np.zeros(len(X)) for _ in arrays]
    for corner in range(2**d):
        bits = [(corner >> a) & 1 for a in range(d)]
        idx = tuple(i0[:, a] + bits[a] for a in range(d))
        wt = np.ones(len(X))
        for a in range(d):
            wt *= w[:, a] if bits[a] else 1.0 - w[:, a]
        for o, arr in zip(out, arrays):
            o += wt * arr[idx]
    return out


@dataclass(frozen=True)
class DriftPackage:
    """Fields entering the modified representation, all on ``grid`` (possibly refined).

    ``U = Z + Y`` drives the diffusion; the exponent integrand is
    ``eta_Z Z + eta Y - c``.
    """

    box: LatticeBox
    grid: LatticeBox
    Z: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)
    eta: float
    eta_Z: float = 1.0
    c: float = 0.0
    drift: np.ndarray = field(default=None, repr=False)
    residual: float = 0.0

    def __post_init__(self):
        if self.drift is None:
            object.__setattr__(self, "drift", spectral_gradient(self.grid, self.Z + self.Y))

    @property
    def U(self) -> np.ndarray:
        return self.Z + self.Y

    @property
    def rate(self) -> np.ndarray:
        return self.eta_Z * self.Z + self.eta * self.Y - self.c

    @property
    def U_sup(self) -> float:
        return float(np.max(np.abs(self.U)))

    @property
    def drift_sup(self) -> float:
        return float(np.max(np.linalg.norm(self.drift, axis=0)))

    def evaluate(self, X):
        """``(U, rate, drift)`` at points X; zero drift outside the box."""
        vals = interpolate(self.grid, [self.U, self.rate] + [g for g in self.drift], X)
        U, rate = vals[0], vals[1]
        b = np.stack(vals[2:], axis=1)
        inside = self.box.contains(X)
        b[~np.atleast_1d(inside)] = 0.0
        return U, rate, b

    @classmethod
    def from_noise(cls, nf: NoiseField, eta0: float = 1.0, eta_Z: float = 1.0, refine: int = 2, tol: float = 1e-10):
        """Z and Y for the noise ``nf``, solved on a grid refined ``refine`` times."""
        fine = refine_box(nf.box, refine) if refine > 1 else nf.box
        nf_fine = NoiseField(fine, nf.epsilon, nf.seed, nf.modes, nf.coeffs)
        Z = compute_Z(nf_fine, eta_Z)
        Y, eta, info = solve_resolvent_Y(Z, eta0, tol)
        c = renorm_constant(nf.epsilon, nf.box.dim)
        return cls(nf.box, fine, Z.values, Y.values, eta, eta_Z, c, residual=info["residual"])

    @classmethod
    def from_potential(cls, box: LatticeBox, U, rate: float = 0.0):
        """Synthetic package: drift ``grad U`` (spectral) and a constant exponent rate."""
        U = np.asarray(U, dtype=float)
        return cls(box, box, U, np.zeros_like(U), eta=0.0, eta_Z=0.0, c=-float(rate))


@dataclass
class PathEnsemble:
    """Streamed per-path statistics of one simulation."""

    x0: np.ndarray
    t: float
    dt: float
    seed: int
    final: np.ndarray = field(repr=False)  # (n, d) positions at t (frozen at exit)
    alive: np.ndarray = field(repr=False)  # survived inside the box
    integral: np.ndarray = field(repr=False)  # trapezoidal int of the exponent rate
    U0: float = 0.0
    U_final: np.ndarray = field(default=None, repr=False)
    max_dev: np.ndarray = field(default=None, repr=False)  # running max of |X - x0|

    @property
    def n(self) -> int:
        return len(self.alive)

    @property
    def exit_fraction(self) -> float:
        return 1.0 - float(self.alive.mean())


def dt_bound(dp: DriftPackage) -> float:
    """Largest admissible step: ``dt * sup|drift| <= h``."""
    s = dp.drift_sup
    return math.inf if s == 0 else dp.box.spacing / s


def _bridge_survival(prev, new, lower, upper, dt):
    """Probability that a Brownian bridge between prev and new stays inside the box."""
    p = np.ones(len(prev))
    for a in range(prev.shape[1]):
        for edge, sgn in ((lower[a], 1.0), (upper[a], -1.0)):
            d0 = sgn * (prev[:, a] - edge)
            d1 = sgn * (new[:, a] - edge)
            p *= 1.0 - np.exp(-2.0 * np.maximum(d0, 0) * np.maximum(d1, 0) / dt)
    return p


def simulate_paths(
    dp: DriftPackage,
    x0,
    t: float,
    dt: float,
    n: int,
    seed: int,
    kill: bool = True,
    bridge: bool = True,
    norm: str = "euclid",
) -> PathEnsemble:
    """Euler-Maruyama ensemble of ``dX = grad U dt + dB`` started at x0.

    Paths are processed in blocks of ``BLOCK``; block ``b`` draws from
    ``default_rng([seed, b])`` so statistics do not depend on processing order.
    With ``kill`` paths freeze at the first exit from the box; ``bridge``
    additionally kills with the Brownian-bridge crossing probability between steps.
    """
    x0 = np.asarray(x0, dtype=float)
    d = dp.box.dim
    if kill and not dp.box.contains(x0):
        raise ValueError("starting point outside the box")
    bound = dt_bound(dp)
    if dt > bound:
        raise ValueError(f"dt={dt:g} exceeds the stability bound h/sup|drift| = {bound:.4g}")
    steps = max(1, math.ceil(t / dt - 1e-12))
    k = t / steps
    lower, upper = dp.box.lower, dp.box.upper
    U0 = float(dp.evaluate(x0[None])[0][0])
    finals, alives, ints, Ufs, devs = [], [], [], [], []
    for b, start in enumerate(range(0, n, BLOCK)):
        m = min(BLOCK, n - start)
        rng = np.random.default_rng([seed, b])
        X = np.tile(x0, (m, 1))
        alive = np.ones(m, dtype=bool)
        acc = np.zeros(m)
        maxdev = np.zeros(m)
        _, rate, drift = dp.evaluate(X)
        for _ in range(steps):
            noise = rng.standard_normal((m, d))
            unif = rng.random(m) if (kill and bridge) else None
            idx = np.nonzero(alive)[0]
            Xa = X[idx]
            Xn = Xa + drift[idx] * k + math.sqrt(k) * noise[idx]
            if kill:
                out = np.any((Xn < lower) | (Xn > upper), axis=1)
                if bridge:
                    out |= unif[idx] > _bridge_survival(Xa, Xn, lower, upper, k)
                if out.any():
                    alive[idx[out]] = False
                keep = ~out
                idx, Xn = idx[keep], Xn[keep]
                rate_old = rate[idx]
            else:
                rate_old = rate[idx]
            _, rn, dn = dp.evaluate(Xn)
            acc[idx] += 0.5 * k * (rate_old + rn)
            X[idx] = Xn
            rate[idx] = rn
            drift[idx] = dn
            dev = Xn - x0
            dev = np.max(np.abs(dev), axis=1) if norm == "sup" else np.linalg.norm(dev, axis=1)
            maxdev[idx] = np.maximum(maxdev[idx], dev)
        finals.append(X)
        alives.append(alive)
        ints.append(acc)
        Ufs.append(dp.evaluate(X)[0])
        devs.append(maxdev)
    return PathEnsemble(
        x0,
        t,
        k,
        seed,
        np.vstack(finals),
        np.concatenate(alives),
        np.concatenate(ints),
        U0,
        np.concatenate(Ufs),
        np.concatenate(devs),
    )


def _phi_values(phi, X, box):
    from .evolution import InitialData

    if phi is None or (isinstance(phi, InitialData) and phi.kind == "flat"):
        return np.ones(len(X))
    if isinstance(phi, InitialData) and phi.kind == "custom":
        f = phi.field
        return interpolate(f.box, [f.values], X)[0]
    if callable(phi):
        return np.asarray(phi(X), dtype=float)
    raise ValueError("point-mass initial data has no pathwise evaluation")


def fk_weights(dp: DriftPackage, phi, paths: PathEnsemble) -> np.ndarray:
    expo = paths.integral + paths.U0 - paths.U_final
    w = np.exp(np.where(paths.alive, expo, -np.inf))
    return w * _phi_values(phi, paths.final, dp.box)


def fk_estimate(dp: DriftPackage, phi, x, t: float, paths: PathEnsemble):
    """Monte Carlo estimate of ``u(t, x)``: ``(mean, stderr, degenerate)``."""
    if not np.allclose(paths.x0, x) or not math.isclose(paths.t, t):
        raise ValueError("path ensemble was generated for a different (x, t)")
    if not paths.alive.any():
        return 0.0, 0.0, True
    w = fk_weights(dp, phi, paths)
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(len(w))), False


@dataclass
class KernelReport:
    edges: list
    density: np.ndarray
    counts: np.ndarray
    centers: np.ndarray  # (n_bins, d) bin centers
    r2: np.ndarray
    upper_slack: np.ndarray  # log G + r^2/(4t) + (d/2) log t
    lower_slack: np.ndarray  # log G + (d/2) log t
    U_sup: float
    underfilled: np.ndarray
    t: float

    def fit_lower(self, min_count=100):
        """Smallest ``(A, B)`` with ``lower_slack >= -A - B r^2/t`` on well-filled bins.

        ``A`` is fixed from bins with ``r^2 <= t``; ``B`` is then the smallest
        slope making the bound hold everywhere.
        """
        sel = self.counts.ravel() >= min_count
        ls, rr = self.lower_slack.ravel()[sel], self.r2.ravel()[sel] / self.t
        near = rr <= 1.0
        A = float(max(0.0, -ls[near].min())) if near.any() else 0.0
        far = rr > 0
        B = float(max(0.0, np.max((-ls[far] - A) / rr[far]))) if far.any() else 0.0
        return A, B

    def max_upper(self, min_count=100) -> float:
        sel = self.counts.ravel() >= min_count
        return float(self.upper_slack.ravel()[sel].max())


def kernel_histogram(dp: DriftPackage, x0, t: float, dt: float, n: int, bins, seed: int = 0, span=None) -> KernelReport:
    """Histogram density of X_t without killing or exponent weight."""
    d = dp.box.dim
    paths = simulate_paths(dp, x0, t, dt, n, seed, kill=False)
    x0 = np.asarray(x0, dtype=float)
    span = span if span is not None else 4.0 * math.sqrt(t)
    if np.isscalar(bins):
        edges = [np.linspace(x0[a] - span, x0[a] + span, int(bins) + 1) for a in range(d)]
    else:
        edges = [np.asarray(e) for e in bins]
    counts, edges = np.histogramdd(paths.final, bins=edges)
    vol = np.prod(np.meshgrid(*[np.diff(e) for e in edges], indexing="ij"), axis=0)
    dens = counts / (n * vol)
    centers = np.stack(
        np.meshgrid(*[0.5 * (e[1:] + e[:-1]) for e in edges], indexing="ij"), axis=-1
    ).reshape(-1, d)
    r2 = np.sum((centers - x0) ** 2, axis=1).reshape(counts.shape)
    with np.errstate(divide="ignore"):
        logd = np.log(dens)
    lower = logd + 0.5 * d * math.log(t)
    upper = lower + r2 / (4 * t)
    return KernelReport(edges, dens, counts, centers, r2, upper, lower, dp.U_sup, counts < 100, t)


def gaussian_kernel(x0, y, t):
    d = len(x0)
    r2 = np.sum((np.asarray(y) - np.asarray(x0)) ** 2, axis=-1)
    return (2 * math.pi * t) ** (-d / 2) * np.exp(-r2 / (2 * t))


def wilson_interval(k: int, n: int, z: float = 1.96):
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z**2 / n
    mid = (p + z**2 / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def escape_probability(dp: DriftPackage, x0, K, T: float, dt: float, n: int, seed: int = 0, norm: str = "euclid"):
    """Empirical ``P(sup_{t<=T} |X_t - x0| >= K)`` on a grid of K.

    Returns a list of rows ``(K, p_hat, lo, hi)`` (Wilson 95% interval) and
    the least-squares slope of ``log p_hat`` against ``K^2`` over rows with
    ``p_hat > 0`` (``None`` if fewer than two).
    """
    paths = simulate_paths(dp, x0, T, dt, n, seed, kill=False, norm=norm)
    Ks = np.atleast_1d(np.asarray(K, dtype=float))
    rows = []
    for k in Ks:
        hits = int(np.sum(paths.max_dev >= k)) if k > 0 else n
        lo, hi = wilson_interval(hits, n)
        rows.append((float(k), hits / n, lo, hi))
    p = np.array([r[1] for r in rows])
    sel = (p > 0) & (Ks > 0)
    slope = float(np.polyfit(Ks[sel] ** 2, np.log(p[sel]), 1)[0]) if sel.sum() >= 2 else None
    return rows, slope


def brownian_escape_bound(K, T, d):
    """Reflection-principle bound ``2d P(|N(0,T)| >= K/sqrt(d))``."""
    from scipy.special import erfc

    a = np.asarray(K, dtype=float) / math.sqrt(d)
    return 2 * d * erfc(a / math.sqrt(2 * T))


def continuum_reference(nf: NoiseField, t: float, factors=(3, 9)) -> np.ndarray:
    """Flat-data solution on the coarse grid of ``nf``, extrapolated in h.

    The same noise modes are synthesized on two grids refined by odd factors
    r1 < r2 (so coarse cell centers are fine cell centers).  Both solutions are
    computed by a Krylov exponential and combined assuming an O(h) error: the
    zero ghost values sit half a cell outside the box, so the lattice problem
    lives on a box of side L + h and the boundary error dominates the O(h^2)
    interior error.
    """
    from scipy.sparse.linalg import expm_multiply

    from .spectrum import assemble

    r1, r2 = factors
    if r1 % 2 == 0 or r2 % 2 == 0:
        raise ValueError("refinement factors must be odd")
    out = []
    for r in (r1, r2):
        fine = refine_box(nf.box, r)
        H = assemble(NoiseField(fine, nf.epsilon, nf.seed, nf.modes, nf.coeffs))
        u = expm_multiply(t * H.to_sparse(), np.ones(fine.n_points)).reshape(fine.shape)
        c = (r - 1) // 2
        out.append(u[(slice(c, None, r),) * nf.box.dim])
    return (r2 * out[1] - r1 * out[0]) / (r2 - r1)


def fk_compare(nf: NoiseField, t: float, probes, n_paths: int, dt: float, reference: np.ndarray,
               refine: int = 4, seed: int = 0):
    """FK estimates at grid ``probes`` (index tuples) against ``reference`` values
    on the same grid.  Rows: (probe, x, estimate, stderr, reference, z)."""
    dp = DriftPackage.from_noise(nf, refine=refine)
    rows = []
    for i, j in enumerate(probes):
        j = tuple(int(a) for a in j)
        x = nf.box.index_to_point(np.array(j))
        paths = simulate_paths(dp, x, t, dt, n_paths, seed * 1000 + i)
        m, se, _ = fk_estimate(dp, None, x, t, paths)
        ref = float(reference[j])
        z = (m - ref) / se if se > 0 else math.inf
        rows.append((j, x, m, se, ref, z))
    return rows

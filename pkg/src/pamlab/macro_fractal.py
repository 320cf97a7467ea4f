"""Macroscopic (Barlow–Taylor) dimension toolkit and the variational constants.

Shells are V_n = [-e^n, e^n)^d, S_0 = V_0 and S_{n+1} = V_{n+1} \\ V_n.  The
covering functional

    nu_rho^n(E) = inf sum_i (s(B_i) / e^n)^rho,   B_i = prod [x_k, x_k + r), r >= 1, B_i in S_n

is approximated from above.  S_n (n >= 1) is the union of 2d slabs
{x in V_n : +-x_k >= e^{n-1}}, and a box lies in S_n iff it lies in one of
them.  Each point is assigned to one slab and, per slab, the cheapest cover
made of aligned dyadic boxes is found exactly by a bottom-up tree recursion.
The result is a genuine cover, hence an upper bound of the infimum.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize, special


# ---------------------------------------------------------------- point clouds

@dataclass(frozen=True)
class PointCloud:
    """Finite point set in R^d.  With ``snap`` set, points are floored to that
    resolution and deduplicated."""

    points: np.ndarray
    snap: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p.reshape(0, 0) if p.size == 0 else p[None, :]
        if p.ndim != 2:
            raise ValueError("points must be an (N, d) array")
        if p.size and not np.all(np.isfinite(p)):
            raise ValueError("points must be finite")
        if self.snap is not None:
            if self.snap <= 0:
                raise ValueError("snap must be positive")
            p = np.floor(p / self.snap) * self.snap
        if len(p):
            p = np.unique(p, axis=0)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, d: int) -> "PointCloud":
        return cls(np.zeros((0, d)))

    def union(self, other: "PointCloud") -> "PointCloud":
        if len(self) and len(other) and self.dim != other.dim:
            raise ValueError("dimension mismatch")
        return PointCloud(np.vstack([self.points, other.points]), snap=self.snap)

    def in_shell(self, n: int) -> np.ndarray:
        if not len(self):
            return self.points
        return self.points[shell_index(self.points) == n]


# ---------------------------------------------------------------------- shells

def _in_cube(x: np.ndarray, n: int) -> np.ndarray:
    r = math.exp(n)
    return np.all((x >= -r) & (x < r), axis=-1)


def shell_index(x) -> np.ndarray:
    """Index n of the shell S_n containing each point (last axis = coordinates)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    with np.errstate(divide="ignore"):
        pos = np.where(x >= 1.0, np.floor(np.log(np.maximum(x, 1.0))) + 1, 0)
        neg = np.where(x < -1.0, np.ceil(np.log(np.maximum(-x, 1.0))), 0)
    n = np.max(np.maximum(pos, neg), axis=-1).astype(int)
    # log rounding at the exact boundaries
    for _ in range(2):
        r = np.exp(n.astype(float))[:, None]
        out = ~np.all((x >= -r) & (x < r), axis=-1)
        n = n + out
        rl = np.exp(np.maximum(n - 1, 0).astype(float))[:, None]
        inner = (n > 0) & np.all((x >= -rl) & (x < rl), axis=-1)
        n = n - inner
    return n


@dataclass(frozen=True)
class Shell:
    n: int
    d: int

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("shell index must be nonnegative")

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return _in_cube(x, 0)
        return _in_cube(x, self.n) & ~_in_cube(x, self.n - 1)

    def slabs(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Boxes (lower, upper) whose union is the shell; every box inside the
        shell fits inside one of them."""
        out, d = self.n, self.d
        R = math.exp(out)
        if out == 0:
            return [(np.full(d, -1.0), np.full(d, 1.0))]
        r = math.exp(out - 1)
        res = []
        for k in range(d):
            for sgn in (1, -1):
                lo, hi = np.full(d, -R), np.full(d, R)
                if sgn > 0:
                    lo[k] = r
                else:
                    hi[k] = -r
                res.append((lo, hi))
        return res


def shell(n: int, d: int) -> Shell:
    return Shell(n, d)


def _slab_assignment(pts: np.ndarray, n: int) -> np.ndarray:
    """Slab number 2k (+) or 2k+1 (-) for the coordinate of largest modulus."""
    if n == 0:
        return np.zeros(len(pts), dtype=int)
    k = np.argmax(np.abs(pts), axis=1)
    neg = pts[np.arange(len(pts)), k] < 0
    return 2 * k + neg


# --------------------------------------------------------------- covering cost

def _dyadic_cost(rel: np.ndarray, width: np.ndarray, n: int, rhos: np.ndarray) -> np.ndarray:
    """Cheapest aligned-dyadic cover of points with coordinates ``rel`` inside
    the box [0, width).  Vectorized over rhos."""
    scale = math.exp(n)
    top = np.ceil(width).astype(np.int64)
    cells = np.minimum(np.floor(rel).astype(np.int64), top - 1)
    dims = tuple(int(t) for t in top)
    code = np.unique(np.ravel_multi_index(cells.T, dims))
    cells = np.stack(np.unravel_index(code, dims), axis=1)
    cost = np.tile(np.exp(-n * rhos), (len(cells), 1))
    lim = min(scale, float(np.min(width)))
    J = int(math.floor(math.log2(lim))) if lim >= 1 else 0
    for j in range(1, J + 1):
        parent = cells >> 1
        pdims = tuple(int(-(-t // 2 ** j)) for t in top)
        pcode = np.ravel_multi_index(parent.T, pdims)
        # children arrive sorted by their own code, not by parent code
        order = np.argsort(pcode, kind="stable")
        pcode = pcode[order]
        starts = np.flatnonzero(np.r_[True, pcode[1:] != pcode[:-1]])
        summed = np.add.reduceat(cost[order], starts, axis=0)
        cells = parent[order][starts]
        side = 2.0 ** j
        valid = np.all((cells + 1) * side <= width + 1e-12, axis=1)
        box = (side / scale) ** rhos
        summed[valid] = np.minimum(summed[valid], box[None, :])
        cost = summed
    return cost.sum(axis=0)


def cover_functional(E, rho, n: int) -> np.ndarray:
    """Upper bound for nu_rho^n(E).  ``rho`` may be a scalar or an array; the
    return value has the same shape."""
    rhos = np.atleast_1d(np.asarray(rho, dtype=float))
    if np.any(rhos <= 0):
        raise ValueError("rho must be positive")
    pts = E.points if isinstance(E, PointCloud) else np.asarray(E, dtype=float)
    total = np.zeros(len(rhos))
    if len(pts):
        d = pts.shape[1]
        pts = pts[shell_index(pts) == n]
        if len(pts):
            slabs = Shell(n, d).slabs()
            which = _slab_assignment(pts, n)
            for s, (lo, hi) in enumerate(slabs):
                sub = pts[which == s]
                if not len(sub):
                    continue
                width = hi - lo
                # two anchorings of the dyadic grid, keep the cheaper cover
                a = _dyadic_cost(sub - lo, width, n, rhos)
                b = _dyadic_cost(np.nextafter(hi - sub, -np.inf), width, n, rhos)
                total += np.minimum(a, b)
    return total if np.ndim(rho) else float(total[0])


def unit_cover_bound(E, rho: float, n: int) -> float:
    """Trivial cover by unit cubes: (#occupied unit cells) e^{-n rho}."""
    pts = E.points if isinstance(E, PointCloud) else np.asarray(E, dtype=float)
    pts = pts[shell_index(pts) == n] if len(pts) else pts
    if not len(pts):
        return 0.0
    d = pts.shape[1]
    which = _slab_assignment(pts, n)
    cnt = 0
    for s, (lo, hi) in enumerate(Shell(n, d).slabs()):
        sub = pts[which == s]
        if len(sub):
            cells = np.minimum(np.floor(sub - lo), np.ceil(hi - lo) - 1)
            cnt += len(np.unique(cells, axis=0))
    return cnt * math.exp(-n * rho)


def exact_cover_functional(E, rho: float, n: int, max_points: int = 12) -> float:
    """Exact nu_rho^n for a tiny set: optimal partition into groups, each group
    covered by its smallest admissible box (side max(1, extent))."""
    pts = E.points if isinstance(E, PointCloud) else np.asarray(E, dtype=float)
    pts = pts[shell_index(pts) == n] if len(pts) else pts
    m = len(pts)
    if m == 0:
        return 0.0
    if m > max_points:
        raise ValueError(f"exact search limited to {max_points} points, got {m}")
    d = pts.shape[1]
    slabs = Shell(n, d).slabs()
    scale = math.exp(n)
    full = (1 << m) - 1
    cost = np.full(full + 1, np.inf)
    for mask in range(1, full + 1):
        idx = [i for i in range(m) if mask >> i & 1]
        g = pts[idx]
        lo, hi = g.min(axis=0), g.max(axis=0)
        r = max(1.0, float(np.max(hi - lo)))
        for slo, shi in slabs:
            if np.all(lo >= slo) and np.all(hi < shi) and np.all(shi - slo >= r):
                cost[mask] = (r / scale) ** rho
                break
    best = np.full(full + 1, np.inf)
    best[0] = 0.0
    for mask in range(1, full + 1):
        low = mask & -mask
        rest = mask ^ low
        sub = rest
        b = np.inf
        while True:
            grp = sub | low
            c = cost[grp] + best[mask ^ grp]
            if c < b:
                b = c
            if sub == 0:
                break
            sub = (sub - 1) & rest
        best[mask] = b
    return float(best[full])


# --------------------------------------------------------- dimension estimate

@dataclass
class CoverReport:
    rhos: np.ndarray
    shells: np.ndarray
    nu: np.ndarray                  # (n_shells, n_rho)
    slopes: np.ndarray              # per rho
    estimate: Optional[float]
    flags: Dict[str, object] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "rho", "nu_hat"])
        for i, n in enumerate(self.shells):
            for j, r in enumerate(self.rhos):
                w.writerow([int(n), repr(float(r)), repr(float(self.nu[i, j]))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "estimate": self.estimate,
            "shells": [int(n) for n in self.shells],
            "rhos": [float(r) for r in self.rhos],
            "slopes": [float(s) for s in self.slopes],
            "flags": self.flags,
        }, indent=2, sort_keys=True)


def _kink(rhos: np.ndarray, slopes: np.ndarray, lo: float, hi: float) -> Optional[float]:
    """Onset of decay of log nu vs n.  Below the dimension the slope is flat
    (about 0); above it the slope falls linearly in rho, possibly with a
    second, steeper branch further out.  The points with slope in [-hi, -lo]
    right after the onset are fitted by a line and continued back to 0."""
    below = np.flatnonzero(slopes < -lo)
    if not len(below):
        return None
    first = int(below[0])
    sel = [first]
    for i in range(first + 1, len(rhos)):
        if slopes[i] < -hi:
            break
        sel.append(i)
    if len(sel) < 2:
        if first == 0:
            return float(rhos[0])
        sel = [first - 1, first]
    b, a = np.polyfit(rhos[sel], slopes[sel], 1)
    if b >= 0:
        return float(rhos[first])
    return max(0.0, float(-a / b))


def dim_estimate(E: PointCloud, rhos: Sequence[float], shells: Sequence[int],
                 min_shells: int = 5, lo: float = 0.05, hi: float = 0.5) -> CoverReport:
    rhos = np.asarray(rhos, dtype=float)
    shells = np.asarray(list(shells), dtype=int)
    nu = np.vstack([cover_functional(E, rhos, int(n)) for n in shells])
    usable = np.all(nu > 0, axis=1)
    flags: Dict[str, object] = {"method": "dyadic tree cover (upper bound)",
                                "usable_shells": int(usable.sum()), "window": [lo, hi]}
    slopes = np.full(len(rhos), np.nan)
    if usable.sum() >= 2:
        x = shells[usable].astype(float)
        slopes = np.polyfit(x, np.log(nu[usable]), 1)[0]
    est = None
    if usable.sum() >= min_shells:
        est = _kink(rhos, slopes, lo, hi)
        if est is None:
            flags["note"] = "no decaying branch on the rho grid"
    else:
        flags["withheld"] = f"only {int(usable.sum())} usable shells"
    return CoverReport(rhos, shells, nu, slopes, est, flags)


# -------------------------------------------------------------------- fixtures

def skeleton_axis(theta: float, n: int) -> np.ndarray:
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    count = math.ceil(math.exp(n * (1 - theta)))
    return math.exp(n) + np.arange(count) * math.exp(n * theta)


def skeleton(theta: float, d: int, ns: Sequence[int]) -> PointCloud:
    blocks = []
    for n in ns:
        a = skeleton_axis(theta, n)
        g = np.stack(np.meshgrid(*([a] * d), indexing="ij"), axis=-1).reshape(-1, d)
        blocks.append(g)
    return PointCloud(np.vstack(blocks) if blocks else np.zeros((0, d)), label=f"skeleton{theta}")


def lattice_shells(d: int, ns: Sequence[int]) -> PointCloud:
    """All integer points of the listed shells."""
    blocks = []
    for n in ns:
        R = math.exp(n)
        ax = np.arange(math.ceil(-R), math.ceil(R))
        g = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d).astype(float)
        blocks.append(g[shell_index(g) == n])
    return PointCloud(np.vstack(blocks), label="lattice")


def axis_line(d: int, ns: Sequence[int]) -> PointCloud:
    blocks = []
    for n in ns:
        R = math.exp(n)
        ax = np.arange(math.ceil(-R), math.ceil(R)).astype(float)
        g = np.zeros((len(ax), d))
        g[:, 0] = ax
        blocks.append(g[shell_index(g) == n])
    return PointCloud(np.vstack(blocks), label="line")


def block_lemma_fixture(q: float, k: int, d: int, ns: Sequence[int]) -> PointCloud:
    """Lattice points of (0, e^{n/q}]^k x (e^n, e^{n+1}]^{d-k}, unioned over n.

    The thin coordinates are capped at e^{n/q} inside the n-th shell; the
    thick ones run over that shell."""
    if q <= 1:
        raise ValueError("q must exceed 1")
    if not 1 <= k <= d - 1:
        raise ValueError("k must lie in 1..d-1")
    blocks = []
    for n in ns:
        thin = np.arange(1, math.floor(math.exp(n / q)) + 1)
        thick = np.arange(math.floor(math.exp(n)) + 1, math.floor(math.exp(n + 1)) + 1)
        axes = [thin] * k + [thick] * (d - k)
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        blocks.append(g.astype(float))
    return PointCloud(np.vstack(blocks), label=f"block q={q} k={k}")


def thick_set_check(E: PointCloud, theta: float, k: int, n_max: int) -> bool:
    """True iff E meets B(x, e^{n theta}) for every skeleton anchor x, k <= n <= n_max.

    The boxes of one level tile [e^n, e^n + count e^{n theta})^d, so a point
    hits at most one box and the check is a bincount."""
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    pts = E.points
    for n in range(k, n_max + 1):
        count = math.ceil(math.exp(n * (1 - theta)))
        if not len(pts):
            return False
        d = pts.shape[1]
        side = math.exp(n * theta)
        # anchors sit on box edges; a relative slack keeps them in their own box
        idx = np.floor((pts - math.exp(n)) / side + 1e-9).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < count), axis=1)
        idx = idx[ok]
        if not len(idx):
            return False
        hit = np.unique(np.ravel_multi_index(idx.T, (count,) * d))
        if len(hit) < count ** d:
            return False
    return True


def density_measure(E: PointCloud, gamma: float, n: int) -> int:
    """mu_n(E): lattice points (s, j) of E with e^n < s <= e^{n+1} and
    0 <= j_i < e^{n(1-gamma)}."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    p = E.points
    if not len(p):
        return 0
    integral = np.all(p == np.round(p), axis=1)
    s, j = p[:, 0], p[:, 1:]
    top = math.exp(n * (1 - gamma))
    ok = integral & (s > math.exp(n)) & (s <= math.exp(n + 1)) & np.all((j >= 0) & (j < top), axis=1)
    return int(ok.sum())


def density_constant(E: PointCloud, gammas: Sequence[float], ns: Sequence[int]):
    """Fitted C for nu_{d+1-d gamma}(E) >= C e^{-n d(1-gamma) - n} mu_n(E).

    The counted points sit in shell n+1 of R^{d+1}, which is where the cover is
    evaluated.  Returns (C, rows) with rows (gamma, n, nu, mu, ratio)."""
    d = E.dim - 1
    rows = []
    for g in gammas:
        rho = d + 1 - d * g
        for n in ns:
            mu = density_measure(E, g, n)
            if mu == 0:
                continue
            nu = cover_functional(E, rho, n + 1)
            ref = math.exp(-n * d * (1 - g) - n) * mu
            rows.append((g, n, nu, mu, nu / ref))
    C = min(r[-1] for r in rows) if rows else float("nan")
    return C, rows


# --------------------------------------------------------- variational constant

class KappaError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / special.gamma(d / 2)


def gn_quotient(f, df, d: int, R: float = np.inf) -> float:
    """||f||_4 / (||grad f||^{d/4} ||f||^{1-d/4}) for a radial profile f(r)."""
    w = _sphere_area(d)
    m4 = w * integrate.quad(lambda r: f(r) ** 4 * r ** (d - 1), 0, R, epsabs=0, epsrel=1e-13, limit=200)[0]
    g2 = w * integrate.quad(lambda r: df(r) ** 2 * r ** (d - 1), 0, R, epsabs=0, epsrel=1e-13, limit=200)[0]
    m2 = w * integrate.quad(lambda r: f(r) ** 2 * r ** (d - 1), 0, R, epsabs=0, epsrel=1e-13, limit=200)[0]
    return m4 ** 0.25 / (g2 ** (d / 8) * m2 ** ((1 - d / 4) / 2))


def gaussian_quotient(d: int, a: float = 1.0, amp: float = 1.0) -> float:
    return gn_quotient(lambda r: amp * np.exp(-a * r * r),
                       lambda r: -2 * a * r * amp * np.exp(-a * r * r), d)


def kappa_d(d: int, N: int = 800, R: float = 20.0, gtol: float = 1e-12,
            maxiter: int = 20000) -> float:
    """Optimal Gagliardo–Nirenberg constant, maximized over radial profiles on
    [0, R] with f(R) = 0 and N midpoint cells.

    The quotient is invariant under dilations, so a bare ascent drifts to the
    grid scale where the discrete quotient overshoots.  A penalty
    (log ||grad f||^2 - log ||f||^2)^2 pins the scale; it vanishes on the
    dilation orbit of any maximizer and so does not move the supremum."""
    if d not in (2, 3):
        raise ValueError("d must be 2 or 3")
    dr = R / N
    r = (np.arange(N) + 0.5) * dr
    rf = np.arange(1, N + 1) * dr                    # faces between cells
    w = _sphere_area(d) * dr
    wc, wf = w * r ** (d - 1), w * rf ** (d - 1)
    a, b = d / 2, 2 - d / 2

    def neg_log_J(f):
        g = np.diff(np.append(f, 0.0)) / dr
        m4 = np.sum(wc * f ** 4)
        m2 = np.sum(wc * f ** 2)
        g2 = np.sum(wf * g ** 2)
        gap = math.log(g2) - math.log(m2)
        val = -(math.log(m4) - a * math.log(g2) - b * math.log(m2)) + gap ** 2
        dg = np.zeros(N)
        t = 2 * wf * g / dr
        dg -= t
        dg[1:] += t[:-1]
        dm = 2 * wc * f
        grad = -(4 * wc * f ** 3 / m4 - a * dg / g2 - b * dm / m2) + 2 * gap * (dg / g2 - dm / m2)
        return val, grad

    def log_J(f):
        g = np.diff(np.append(f, 0.0)) / dr
        return (math.log(np.sum(wc * f ** 4)) - a * math.log(np.sum(wf * g ** 2))
                - b * math.log(np.sum(wc * f ** 2)))

    trace: List[float] = []
    f0 = np.exp(-r ** 2 / 2)
    res = optimize.minimize(neg_log_J, f0, jac=True, method="L-BFGS-B",
                            callback=lambda x: trace.append(log_J(x)),
                            options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-15, "maxcor": 30})
    if not np.isfinite(res.fun) or (not res.success and res.nit >= maxiter):
        raise KappaError(f"kappa maximization failed: {res.message}", trace)
    return float(math.exp(log_J(res.x) / 4))


def c_d(kappa: float, d: int) -> float:
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return 8.0 / (d ** (d / 2) * (4 - d) ** (2 - d / 2) * kappa ** 4)


def spatial_dimension(alpha: float, d: int, c: float) -> float:
    return max(d - alpha ** ((4 - d) / 2) * c, 0.0)


def spacetime_dimension(beta: float, v: float, d: int, c: float) -> float:
    return max(d + 1 - beta ** ((4 - d) / 2) * v * c, float(d))


def alpha_threshold(d: int, c: float) -> float:
    """Level alpha at which the predicted spatial dimension reaches 0."""
    return (d / c) ** (2 / (4 - d))


def predicted_dims(levels: Sequence[float], d: int, c: float, v: Optional[float] = None) -> np.ndarray:
    """Spatial dimensions for alpha levels, or space-time ones for beta levels
    when the speed ``v`` is given."""
    if v is None:
        return np.array([spatial_dimension(a, d, c) for a in levels])
    return np.array([spacetime_dimension(b, v, d, c) for b in levels])

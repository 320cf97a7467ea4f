"""Renormalized Anderson Hamiltonian on a box and its leading eigenpairs."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .noise_field import (
    GridField,
    LatticeBox,
    NoiseField,
    make_box,
    realize_noise,
    renorm_constant,
    restrict_field,
    sample_noise,
)

DENSE_LIMIT = 400


class EigensolverError(RuntimeError):
    """Raised when the iterative eigensolver fails to converge."""

    def __init__(self, message, residuals=None, eigenvalues=None):
        super().__init__(message)
        self.residuals = residuals
        self.eigenvalues = eigenvalues


@dataclass(frozen=True)
class HamiltonianOperator:
    """``v -> (1/2) Delta_h v + potential * v`` with zero Dirichlet data outside the box."""

    box: LatticeBox
    potential: GridField
    laplacian_weight: float = 0.5

    @property
    def n(self) -> int:
        return self.box.n_points

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Action on grid-shaped (or flat) arrays; leading batch axes allowed."""
        flat = v.shape[-1] == self.n and v.shape[-self.box.dim :] != self.box.shape
        u = v.reshape(v.shape[:-1] + self.box.shape) if flat else v
        d = self.box.dim
        c = self.laplacian_weight / self.box.spacing**2
        out = (self.potential.values - 2 * d * c) * u
        for ax in range(u.ndim - d, u.ndim):
            lo = [slice(None)] * u.ndim
            hi = [slice(None)] * u.ndim
            lo[ax] = slice(0, -1)
            hi[ax] = slice(1, None)
            out[tuple(lo)] += c * u[tuple(hi)]
            out[tuple(hi)] += c * u[tuple(lo)]
        return out.reshape(v.shape) if flat else out

    def __call__(self, v):
        return self.apply(v)

    def shifted(self, c: float) -> "HamiltonianOperator":
        return HamiltonianOperator(self.box, self.potential + c, self.laplacian_weight)

    def to_sparse(self) -> sp.csr_matrix:
        m, d = self.box.m, self.box.dim
        c = self.laplacian_weight / self.box.spacing**2
        one = sp.diags([np.ones(m - 1), np.ones(m - 1)], [-1, 1], format="csr")
        eye = sp.identity(m, format="csr")
        lap = sp.csr_matrix((self.n, self.n))
        for i in range(d):
            term = sp.identity(1, format="csr")
            for j in range(d):
                term = sp.kron(term, one if i == j else eye, format="csr")
            lap = lap + term
        diag = self.potential.values.ravel() - 2 * d * c
        return (c * lap + sp.diags(diag)).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()


def assemble(nf: NoiseField) -> HamiltonianOperator:
    xi = realize_noise(nf)
    pot = xi - renorm_constant(nf.epsilon, nf.box.dim)
    return HamiltonianOperator(nf.box, GridField(nf.box, pot.values, "potential"))


def assemble_from_potential(box: LatticeBox, values) -> HamiltonianOperator:
    return HamiltonianOperator(box, GridField(box, np.asarray(values, dtype=float), "potential"))


def restricted_operator(H: HamiltonianOperator, sub: LatticeBox) -> HamiltonianOperator:
    """Dirichlet problem on ``sub`` with the same potential realization."""
    return HamiltonianOperator(sub, restrict_field(H.potential, sub), H.laplacian_weight)


def dirichlet_ground_value(box: LatticeBox) -> float:
    """Top eigenvalue of the discrete (1/2) Delta_h with Dirichlet data."""
    h, L = box.spacing, box.side
    return -(box.dim / h**2) * (1.0 - math.cos(math.pi * h / (L + h)))


@dataclass(frozen=True)
class Spectrum:
    """Leading eigenpairs, eigenvalues descending, eigenvectors orthonormal in ``<.,.>_h``."""

    box: LatticeBox
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)  # (K, n) grid values
    residuals: np.ndarray

    @property
    def K(self) -> int:
        return len(self.eigenvalues)

    def vector(self, i: int) -> GridField:
        return GridField(self.box, self.eigenvectors[i].reshape(self.box.shape), f"v{i + 1}")

    def gram(self) -> np.ndarray:
        V = self.eigenvectors
        return self.box.cell_volume * V @ V.T

    def to_json(self) -> str:
        b = self.box
        return json.dumps(
            {
                "box": {"center": list(b.center), "L": b.side, "h": b.spacing, "d": b.dim},
                "K": self.K,
                "eigenvalues": self.eigenvalues.tolist(),
                "residuals": self.residuals.tolist(),
            }
        )


def _normalize_signs(X: np.ndarray) -> np.ndarray:
    s = np.sign(X.sum(axis=0))
    s[s == 0] = 1.0
    return X * s


def _finish(H: HamiltonianOperator, theta, X) -> Spectrum:
    order = np.argsort(theta)[::-1]
    theta = np.asarray(theta)[order]
    X = _normalize_signs(X[:, order])
    R = H.apply(X.T) - theta[:, None] * X.T
    res = np.linalg.norm(R, axis=1)
    vecs = X.T / math.sqrt(H.box.cell_volume)
    return Spectrum(H.box, theta, vecs, res)


def dense_eigenpairs(H: HamiltonianOperator, K: int | None = None) -> Spectrum:
    """LAPACK reference solve; ``K=None`` returns the full spectrum."""
    A = H.to_dense()
    n = A.shape[0]
    K = n if K is None else min(K, n)
    w, X = scipy.linalg.eigh(A, subset_by_index=[n - K, n - 1])
    return _finish(H, w, X)


def lanczos(matvec, n: int, K: int, tol: float, rng, basis_size=None, max_restarts=500):
    """Thick-restart Lanczos with full reorthogonalization for the K largest eigenpairs.

    Returns ``(theta, X, residual_estimates)`` with orthonormal columns ``X``.
    """
    p = basis_size or max(2 * K + 20, 40)
    p = min(p, n)
    keep = min(max(K + (p - K) // 2, K), p - 1)
    V = np.zeros((n, p + 1))
    T = np.zeros((p, p))
    v = rng.standard_normal(n)
    V[:, 0] = v / np.linalg.norm(v)
    j0 = 0
    history = []
    for restart in range(max_restarts):
        for j in range(j0, p):
            w = matvec(V[:, j])
            coef = V[:, : j + 1].T @ w
            w -= V[:, : j + 1] @ coef
            corr = V[:, : j + 1].T @ w
            w -= V[:, : j + 1] @ corr
            coef += corr
            T[: j + 1, j] = coef
            T[j, : j + 1] = coef
            beta = np.linalg.norm(w)
            if beta < 1e-14 * max(1.0, abs(coef[-1])):
                # invariant subspace; restart the remainder from a fresh random direction
                w = rng.standard_normal(n)
                w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
                w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
                V[:, j + 1] = w / np.linalg.norm(w)
                if j + 1 < p:
                    T[j + 1, : j + 1] = 0.0
                    T[: j + 1, j + 1] = 0.0
                beta = 0.0
            else:
                V[:, j + 1] = w / beta
        theta, Y = np.linalg.eigh(T)
        theta, Y = theta[::-1], Y[:, ::-1]
        res = np.abs(beta * Y[-1, :])
        history.append(res[:K].max())
        scale = max(1.0, abs(theta[0]))
        if np.all(res[:K] <= tol * scale) or p == n:
            X = V[:, :p] @ Y[:, :K]
            return theta[:K], X, res[:K]
        # thick restart: keep the leading Ritz vectors plus the residual direction
        Vk = V[:, :p] @ Y[:, :keep]
        V[:, :keep] = Vk
        V[:, keep] = V[:, p]
        T[:] = 0.0
        T[np.arange(keep), np.arange(keep)] = theta[:keep]
        s = beta * Y[-1, :keep]
        T[keep, :keep] = s
        T[:keep, keep] = s
        # next sweep recomputes column ``keep`` from scratch via full orthogonalization
        j0 = keep
    X = V[:, :p] @ Y[:, :K]
    raise EigensolverError(
        f"Lanczos did not converge in {max_restarts} restarts", residuals=res[:K], eigenvalues=theta[:K]
    )


def top_eigenpairs(
    H: HamiltonianOperator,
    K: int = 1,
    tol: float = 1e-8,
    seed: int = 0,
    method: str = "auto",
    basis_size: int | None = None,
    max_restarts: int = 500,
) -> Spectrum:
    """K largest eigenpairs of H.

    ``tol`` is relative: residuals are driven below ``tol * max(1, |lambda_1|)``.
    ``method`` is ``"lanczos"``, ``"dense"`` or ``"auto"`` (dense below
    ``DENSE_LIMIT`` unknowns).
    """
    n = H.n
    if K < 1 or K > n:
        raise ValueError(f"K must lie in [1, {n}]")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "lanczos"
    if method == "dense":
        return dense_eigenpairs(H, K)
    rng = np.random.default_rng(seed)
    theta, X, _ = lanczos(
        lambda x: H.apply(x), n, K, tol, rng, basis_size=basis_size, max_restarts=max_restarts
    )
    return _finish(H, theta, X)


def lambda1(H: HamiltonianOperator, tol: float = 1e-8, seed: int = 0) -> float:
    return float(top_eigenpairs(H, 1, tol=tol, seed=seed).eigenvalues[0])


def monotonicity_check(nf_big: NoiseField, sub: LatticeBox, tol: float = 1e-8) -> bool:
    """``lambda_1(sub) <= lambda_1(big)`` for one shared noise realization."""
    H = assemble(nf_big)
    Hs = restricted_operator(H, sub)
    return lambda1(Hs) <= lambda1(H) + tol


@dataclass
class StudyTable:
    """Rows of a Monte Carlo study plus metadata written as CSV header comments."""

    columns: list[str]
    rows: list[tuple]
    meta: dict = field(default_factory=dict)

    def column(self, name):
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        lines = [f"# {k}={v}" for k, v in self.meta.items()]
        lines.append(",".join(self.columns))
        lines += [",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in r) for r in self.rows]
        return "\n".join(lines) + "\n"


def _pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 1.0


def independence_study(L, separation, n_pairs, seeds, h=0.25, eps=None, d=2):
    """Correlation of ``lambda_1`` on two boxes carved from one master realization.

    The boxes sit at ``-/+ separation/2`` along the first axis.  Returns
    ``(corr, values, flags)``; ``flags`` notes small samples.
    """
    eps = h if eps is None else eps
    seeds = list(seeds)[:n_pairs]
    flags = []
    if len(seeds) < 30:
        flags.append("n_pairs<30")
    span = separation + L
    master_side = h * math.ceil(span / h)
    if round(master_side / h) % 2 != round(L / h) % 2:
        master_side += h
    y1 = np.zeros(d)
    y2 = np.zeros(d)
    y1[0] = -separation / 2
    y2[0] = separation / 2
    a, b = [], []
    for s in seeds:
        master = make_box(np.zeros(d), master_side, h, d)
        H = assemble(sample_noise(master, eps, s))
        b1 = _aligned_box(master, y1, L)
        b2 = _aligned_box(master, y2, L)
        a.append(lambda1(restricted_operator(H, b1)))
        b.append(lambda1(restricted_operator(H, b2)))
    return _pearson(a, b), np.array([a, b]), flags


def _aligned_box(master: LatticeBox, y, L) -> LatticeBox:
    """Sub-box of side L whose grid is aligned with ``master``, centered as close to y as possible."""
    h = master.spacing
    lower = np.asarray(y, dtype=float) - L / 2
    j = np.round((lower - master.lower) / h)
    j = np.clip(j, 0, master.m - round(L / h))
    center = master.lower + j * h + L / 2
    return make_box(center, L, h, master.dim)


def eigenvalue_tail_mc(L, h, eps, s_grid, n_samples, seeds, d=2, sample_values=None):
    """Empirical survival function of ``lambda_1`` and the fitted tail slope.

    The slope is the least-squares slope of ``log P(lambda_1 >= s)`` against
    ``s^(2 - d/2)`` over grid points whose exceedance count lies in
    ``[10, n_samples/10]``.  ``sample_values`` short-circuits the eigensolves.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    if sample_values is None:
        box = make_box(np.zeros(d), L, h, d)
        seeds = list(seeds)[:n_samples]
        sample_values = [lambda1(assemble(sample_noise(box, eps, s))) for s in seeds]
    lam = np.sort(np.asarray(sample_values, dtype=float))
    n = len(lam)
    s_grid = np.asarray(s_grid, dtype=float)
    counts = n - np.searchsorted(lam, s_grid, side="left")
    surv = counts / n
    table = StudyTable(
        ["s", "survival", "count"],
        [(float(s), float(p), int(c)) for s, p, c in zip(s_grid, surv, counts)],
        {"L": L, "h": h, "eps": eps, "n": n, "window": "10<=count<=n/10"},
    )
    window = (counts >= 10) & (counts <= n / 10)
    slope = None
    if window.sum() >= 2:
        x = s_grid[window] ** (2 - d / 2)
        slope = float(np.polyfit(x, np.log(surv[window]), 1)[0])
    table.meta["slope"] = slope
    return table, slope, lam


def growth_study(L_grid, h, eps, n_samples, d=2, seed_base=0, potential_scale=1.0):
    """Ensemble mean of ``lambda_1`` versus L and its fit against ``(log L)^(2/(2-d/2))``.

    Returns ``(table, fit)`` where ``fit`` holds slope, intercept and R^2.
    ``potential_scale=0`` gives the deterministic zero-potential case.
    """
    L_grid = list(L_grid)
    if len(L_grid) < 4 or any(b <= a for a, b in zip(L_grid, L_grid[1:])):
        raise ValueError("L_grid must be increasing with at least 4 entries")
    rows = []
    for L in L_grid:
        box = make_box(np.zeros(d), L, h, d)
        vals = []
        for s in range(n_samples):
            H = assemble(sample_noise(box, eps, seed_base + s))
            if potential_scale != 1.0:
                H = HamiltonianOperator(box, H.potential * potential_scale)
            vals.append(lambda1(H))
        vals = np.array(vals)
        se = vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
        rows.append((L, float(vals.mean()), float(se)))
    table = StudyTable(["L", "mean_lambda1", "stderr"], rows, {"h": h, "eps": eps, "n": n_samples, "seed_base": seed_base})
    x = np.log(table.column("L")) ** (2.0 / (2.0 - d / 2.0))
    y = table.column("mean_lambda1")
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    fit = {"slope": float(slope), "intercept": float(intercept), "r2": r2}
    table.meta.update(fit)
    return table, fit

"""Experiment orchestration: configuration, seeding, persistence and the CLI.

A run is a pure function of its resolved configuration.  Each run writes
``<out>/<experiment>-<hash>/`` holding the resolved config, one CSV per result
table and ``record.json`` with invariant outcomes.  A run that raises leaves a
``FAILED`` marker next to whatever it had persisted.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io as pio
from . import macro_fractal as mf
from .evolution import InitialData, evolve_crank_nicolson, localized_solution
from .feynman_kac import continuum_reference, fk_compare
from .noise_field import make_box, sample_noise
from .spectrum import (
    assemble,
    assemble_from_potential,
    dense_eigenpairs,
    dirichlet_ground_value,
    eigenvalue_tail_mc,
    growth_study,
    lambda1,
    top_eigenpairs,
)

log = logging.getLogger("pamlab")

EXPERIMENTS = ("spectrum", "tails", "growth", "evolve-compare", "fk-compare", "fractal-dim", "constants")
OUT_ENV = "PAMLAB_OUT"


class ConfigError(ValueError):
    pass


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in s.replace(" ", "").split(",") if x)


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Callable, object]]] = {
    "run": {
        "experiment": (str, None),
        "seed": (int, 0),
        "out": (str, "runs"),
        "n_seeds": (int, 3),
        "save_fields": (_bool, False),
    },
    "geometry": {
        "d": (int, 2),
        "L": (float, 8.0),
        "h": (float, 0.25),
        "eps": (float, 0.25),
        "L_grid": (_floats, (8.0, 16.0, 32.0, 64.0)),
        "shells": (_ints, (3, 4, 5, 6, 7, 8, 9, 10, 11, 12)),
    },
    "physics": {
        "t": (float, 1.0),
        "alpha": (_floats, (0.05, 0.1, 0.15, 0.2)),
        "beta": (_floats, (0.05, 0.1)),
        "v": (float, 1.0),
        "K": (int, 5),
        "dt": (float, 1e-3),
        "n_paths": (int, 10000),
        "n_samples": (int, 200),
        "kappa_N": (int, 800),
    },
}

# desk-scale defaults that differ per experiment
EXPERIMENT_DEFAULTS = {
    "fk-compare": {"L": 4.0, "h": 0.125, "eps": 0.125, "t": 0.5, "n_seeds": 1},
    "evolve-compare": {"L": 16.0, "h": 0.25, "eps": 0.25, "t": 1.0},
    "tails": {"L": 4.0, "h": 0.5, "eps": 0.5},
    "growth": {"h": 0.5, "eps": 0.5, "n_samples": 5},
}


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    seed: int = 0
    out: str = "runs"
    n_seeds: int = 3
    save_fields: bool = False
    d: int = 2
    L: float = 8.0
    h: float = 0.25
    eps: float = 0.25
    L_grid: Tuple[float, ...] = (8.0, 16.0, 32.0, 64.0)
    shells: Tuple[int, ...] = tuple(range(3, 13))
    t: float = 1.0
    alpha: Tuple[float, ...] = (0.05, 0.1, 0.15, 0.2)
    beta: Tuple[float, ...] = (0.05, 0.1)
    v: float = 1.0
    K: int = 5
    dt: float = 1e-3
    n_paths: int = 10000
    n_samples: int = 200
    kappa_N: int = 800

    def validate(self) -> "RunConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.d not in (2, 3):
            raise ConfigError("d must be 2 or 3")
        for name in ("L", "h", "eps", "t", "v", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        ratio = self.L / self.h
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 2:
            raise ConfigError("L/h must be an integer >= 2")
        for name in ("n_seeds", "K", "n_paths", "n_samples", "kappa_N"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if any(a <= 0 for a in self.alpha + self.beta):
            raise ConfigError("alpha and beta levels must be positive")
        if any(n < 0 for n in self.shells):
            raise ConfigError("shell indices must be nonnegative")
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec, keys in SCHEMA.items():
            cp[sec] = {}
            for k in keys:
                v = getattr(self, k)
                cp[sec][k] = ",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    """Parse INI text against the schema.  Unknown sections or keys are errors."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                values[key] = SCHEMA[sec][key][0](raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {sec}.{key}: {e}") from None
    over = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "experiment" in over and values.get("experiment", over["experiment"]) != over["experiment"]:
        raise ConfigError(f"config names experiment {values['experiment']!r}, not {over['experiment']!r}")
    values.update(over)
    exp = values.get("experiment")
    if exp is None:
        raise ConfigError("run.experiment is required")
    merged = dict(EXPERIMENT_DEFAULTS.get(exp, {}))
    merged.update(values)
    return RunConfig(**merged).validate()


# ------------------------------------------------------------------- seeding

def seed_derive(base: int, labels: Sequence) -> int:
    """64-bit seed from a base and a label path via a BLAKE2b chain."""
    s = int(base) % 2**64
    for lab in labels:
        h = hashlib.blake2b(s.to_bytes(8, "little") + repr(lab).encode(), digest_size=8)
        s = int.from_bytes(h.digest(), "little")
    return s


class SeedBook:
    """Per-run registry: rejects repeated label paths and colliding seeds."""

    def __init__(self, base: int):
        self.base = base
        self._by_path: Dict[tuple, int] = {}
        self._seen: Dict[int, tuple] = {}

    def derive(self, *labels) -> int:
        path = tuple(labels)
        if path in self._by_path:
            raise ValueError(f"label path {path} already used in this run")
        s = seed_derive(self.base, path)
        if s in self._seen:
            raise ValueError(f"seed collision between {path} and {self._seen[s]}")
        self._by_path[path] = s
        self._seen[s] = path
        return s


# -------------------------------------------------------------------- records

@dataclass
class Table:
    columns: List[str]
    rows: List[tuple]
    meta: Dict[str, object] = field(default_factory=dict)

    def to_csv(self) -> str:
        return pio.table_csv(self.columns, self.rows, self.meta)


@dataclass
class RunRecord:
    config: RunConfig
    config_hash: str
    code_version: str
    wall_time: float = 0.0
    tables: Dict[str, Table] = field(default_factory=dict)
    invariants: List[Tuple[str, bool, object]] = field(default_factory=list)
    artifacts: Dict[str, bytes] = field(default_factory=dict)
    failed: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.failed is None and all(ok for _, ok, _ in self.invariants)

    def check(self, name: str, ok: bool, value) -> None:
        self.invariants.append((name, bool(ok), value))

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "experiment": self.config.experiment,
            "wall_time": self.wall_time,
            "tables": sorted(self.tables),
            "invariants": [{"name": n, "passed": ok, "value": _jsonable(v)} for n, ok, v in self.invariants],
            "passed": self.passed,
            "failed": self.failed,
        }


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "0"


def _prov(cfg: RunConfig, seed) -> tuple:
    return (seed, cfg.L, cfg.h, cfg.eps, cfg.t)


PROV = ["seed", "L", "h", "eps", "t"]


# ----------------------------------------------------------------- experiments

def _pool_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _exp_spectrum(cfg: RunConfig, rec: RunRecord, seeds: SeedBook, threads: int):
    box = make_box(np.zeros(cfg.d), cfg.L, cfg.h, cfg.d)
    K = min(cfg.K, box.n_points)
    labels = [seeds.derive("spectrum", i) for i in range(cfg.n_seeds)]

    def one(s):
        H = assemble(sample_noise(box, cfg.eps, s))
        return H, top_eigenpairs(H, K, method="lanczos" if box.n_points > 8 else "dense")

    rows, worst, oracle = [], 0.0, 0.0
    for s, (H, spec) in zip(labels, _pool_map(one, labels, threads)):
        scale = max(1.0, abs(float(spec.eigenvalues[0])))
        worst = max(worst, float(np.max(spec.residuals)) / scale)
        if box.n_points <= 400:
            ref = dense_eigenpairs(H, K).eigenvalues
            oracle = max(oracle, float(np.max(np.abs(ref - spec.eigenvalues))))
        for i, (lam, r) in enumerate(zip(spec.eigenvalues, spec.residuals)):
            rows.append(_prov(cfg, s) + (i + 1, float(lam), float(r)))
        if cfg.save_fields:
            rec.artifacts[f"spectrum_{s}.json"] = spec.to_json().encode()
    rec.tables["eigenvalues"] = Table(PROV + ["index", "eigenvalue", "residual"], rows)
    rec.check("relative residual <= 1e-6", worst <= 1e-6, worst)
    if box.n_points <= 400:
        rec.check("iterative vs dense <= 1e-8", oracle <= 1e-8, oracle)
    zero = assemble_from_potential(box, np.zeros(box.shape))
    gap = abs(lambda1(zero, tol=1e-12) - dirichlet_ground_value(box))
    rec.check("zero-potential lambda_1 vs analytic <= 1e-10", gap <= 1e-10, gap)


def _exp_tails(cfg: RunConfig, rec: RunRecord, seeds: SeedBook, threads: int):
    box = make_box(np.zeros(cfg.d), cfg.L, cfg.h, cfg.d)
    ss = [seeds.derive("tails", i) for i in range(cfg.n_samples)]
    lam = _pool_map(lambda s: lambda1(assemble(sample_noise(box, cfg.eps, s))), ss, threads)
    grid = np.linspace(np.quantile(lam, 0.5), np.max(lam), 40)
    table, slope, _ = eigenvalue_tail_mc(cfg.L, cfg.h, cfg.eps, grid, len(lam), None, d=cfg.d, sample_values=lam)
    rec.tables["tail"] = Table(PROV + table.columns, [_prov(cfg, cfg.seed) + tuple(r) for r in table.rows], table.meta)
    rec.tables["samples"] = Table(PROV + ["lambda1"], [_prov(cfg, s) + (float(v),) for s, v in zip(ss, lam)])
    cd = mf.c_d(mf.kappa_d(cfg.d), cfg.d)
    rec.check("tail slope negative", slope is not None and slope < 0, slope)
    ok = slope is not None and cd / 2 <= abs(slope) <= 2 * cd
    rec.check("|tail slope| within factor 2 of c_d", ok, {"slope": slope, "c_d": cd})


def _exp_growth(cfg: RunConfig, rec: RunRecord, seeds: SeedBook, threads: int):
    base = seeds.derive("growth")
    table, fit = growth_study(cfg.L_grid, cfg.h, cfg.eps, cfg.n_samples, d=cfg.d, seed_base=base % 2**32)
    rec.tables["growth"] = Table(["seed_base", "h", "eps", "t"] + table.columns,
                                 [(base % 2**32, cfg.h, cfg.eps, cfg.t) + tuple(r) for r in table.rows], table.meta)
    rec.check("growth fit R^2 >= 0.9", fit["r2"] >= 0.9, fit["r2"])


def evolve_compare_one(box, eps, seed, t, dt):
    H = assemble(sample_noise(box, eps, seed))
    flat = InitialData.flat()
    u_s, _ = localized_solution(H, flat, t, dense_limit=box.n_points)
    u_c = evolve_crank_nicolson(H, flat, t, dt)
    err = float(np.max(np.abs(u_s.values - u_c.values)) / np.max(np.abs(u_s.values)))
    return err, u_s, u_c


def _exp_evolve(cfg: RunConfig, rec: RunRecord, seeds: SeedBook, threads: int):
    box = make_box(np.zeros(cfg.d), cfg.L, cfg.h, cfg.d)
    ss = [seeds.derive("evolve", i) for i in range(cfg.n_seeds)]
    res = _pool_map(lambda s: evolve_compare_one(box, cfg.eps, s, cfg.t, cfg.dt), ss, threads)
    rows = [_prov(cfg, s) + (cfg.dt, e) for s, (e, _, _) in zip(ss, res)]
    rec.tables["evolve_compare"] = Table(PROV + ["dt", "rel_sup_error"], rows)
    worst = max(e for e, _, _ in res)
    rec.check("spectral vs Crank-Nicolson rel sup error <= 1e-3", worst <= 1e-3, worst)
    if cfg.save_fields:
        for s, (_, u, _) in zip(ss, res):
            rec.artifacts[f"u_{s}.bin"] = pio.grid_to_bytes(u, cfg.eps, s)


def default_probes(box) -> List[tuple]:
    m = box.m
    c = m // 2
    return [(c, c), (m // 4, m // 4), (3 * m // 4, m // 4), (m // 4, 3 * m // 4), (m // 8, m // 2)][: 5]


def _exp_fk(cfg: RunConfig, rec: RunRecord, seeds: SeedBook, threads: int):
    if cfg.d != 2:
        raise ConfigError("fk-compare is set up for d = 2")
    box = make_box(np.zeros(2), cfg.L, cfg.h, 2)
    probes = default_probes(box)
    lat_rows, cont_rows = [], []
    for i in range(cfg.n_seeds):
        s = seeds.derive("fk", i) % 2**32
        nf = sample_noise(box, cfg.eps, s)
        u, _ = localized_solution(assemble(nf), InitialData.flat(), cfg.t)
        cont = continuum_reference(nf, cfg.t)
        # one path ensemble per probe, reused against both references
        rows = fk_compare(nf, cfg.t, probes, cfg.n_paths, cfg.dt, u.values, seed=s)
        for (j, x, m, se, ref, z) in rows:
            lat_rows.append(_prov(cfg, s) + (j[0], j[1], float(x[0]), float(x[1]), m, se, ref, z))
            cref = float(cont[j])
            cont_rows.append(_prov(cfg, s) + (j[0], j[1], m, se, cref, (m - cref) / se))
    cols = PROV + ["i", "j", "x0", "x1", "fk_mean", "fk_stderr", "reference", "z"]
    rec.tables["fk_vs_lattice"] = Table(cols, lat_rows)
    rec.tables["fk_vs_continuum"] = Table(PROV + ["i", "j", "fk_mean", "fk_stderr", "reference", "z"], cont_rows)
    zl = max(abs(r[-1]) for r in lat_rows)
    zc = max(abs(r[-1]) for r in cont_rows)
    rec.check("|FK - lattice spectral| <= 3 stderr", zl <= 3, zl)
    rec.check("|FK - extrapolated continuum| <= 3 stderr", zc <= 3, zc)


def calibration_fixtures(shells: Sequence[int]):
    """(name, cloud, shells, expected, tolerance, kind) for the estimator.

    Dense fixtures are capped in shell index so the explicit point clouds stay
    below a few million points."""
    sh = [n for n in shells if n >= 2]
    out = []
    dense = [n for n in range(2, 7)]
    out.append(("lattice", mf.lattice_shells(2, dense), dense, 2.0, 0.1, "within"))
    out.append(("axis line", mf.axis_line(2, sh), sh, 1.0, 0.1, "within"))
    for th, cap in ((0.25, 9), (0.5, 12), (0.75, 12)):
        ns = [n for n in sh if n <= cap]
        out.append((f"skeleton {th}", mf.skeleton(th, 2, [n - 1 for n in ns]), ns, 2 * (1 - th), 0.1, "within"))
    ns = [n for n in sh if n <= 9]
    out.append(("block q=2 k=1", mf.block_lemma_fixture(2.0, 1, 2, [n - 1 for n in ns]), ns, 1.0, 0.15, "below"))
    return out


def _exp_fractal(cfg: RunConfig, rec: RunRecord, seeds: SeedBook, threads: int):
    rhos = np.round(np.arange(0.05, cfg.d + 1.0001, 0.05), 10)
    rows = []
    fixtures = calibration_fixtures(cfg.shells)

    def one(fx):
        name, E, ns, _, _, _ = fx
        return mf.dim_estimate(E, rhos, ns)

    for fx, rep in zip(fixtures, _pool_map(one, fixtures, threads)):
        name, E, ns, expect, tol, kind = fx
        est = rep.estimate
        ok = est is not None and (abs(est - expect) <= tol if kind == "within" else est <= expect + tol)
        rows.append((cfg.seed, name, len(E), ns[0], ns[-1], expect, tol, kind, est))
        rec.check(f"dimension of {name}", ok, est)
        rec.artifacts[f"cover_{name.replace(' ', '_')}.json"] = rep.to_json().encode()
    rec.tables["dimension_calibration"] = Table(
        ["seed", "fixture", "points", "n0", "n1", "expected", "tolerance", "kind", "estimate"], rows)


def _exp_constants(cfg: RunConfig, rec: RunRecord, seeds: SeedBook, threads: int):
    d = cfg.d
    k1 = mf.kappa_d(d, N=cfg.kappa_N)
    k2 = mf.kappa_d(d, N=2 * cfg.kappa_N)
    c = mf.c_d(k2, d)
    rec.tables["constants"] = Table(["d", "N", "kappa", "c_d"],
                                    [(d, cfg.kappa_N, k1, mf.c_d(k1, d)), (d, 2 * cfg.kappa_N, k2, c)])
    rows = [(d, a, mf.spatial_dimension(a, d, c)) for a in cfg.alpha]
    rec.tables["spatial_dimension"] = Table(["d", "alpha", "predicted"], rows)
    rows = [(d, b, cfg.v, mf.spacetime_dimension(b, cfg.v, d, c)) for b in cfg.beta]
    rec.tables["spacetime_dimension"] = Table(["d", "beta", "v", "predicted"], rows)
    a0 = mf.alpha_threshold(d, c)
    root = abs(d - a0 ** ((4 - d) / 2) * c)
    rec.check("kappa stable under grid doubling (1e-3)", abs(k1 - k2) <= 1e-3, abs(k1 - k2))
    rec.check("spatial dimension root at threshold (1e-12)", root <= 1e-12 and mf.spatial_dimension(a0, d, c) == 0.0, root)


DISPATCH = {
    "spectrum": _exp_spectrum,
    "tails": _exp_tails,
    "growth": _exp_growth,
    "evolve-compare": _exp_evolve,
    "fk-compare": _exp_fk,
    "fractal-dim": _exp_fractal,
    "constants": _exp_constants,
}


def run(cfg: RunConfig, threads: int = 1) -> RunRecord:
    """Run one experiment.  A module failure is caught and its traceback kept
    in ``rec.failed`` so partial tables can still be persisted."""
    cfg.validate()
    rec = RunRecord(cfg, cfg.digest, _version())
    t0 = time.perf_counter()
    try:
        DISPATCH[cfg.experiment](cfg, rec, SeedBook(cfg.seed), threads)
    except Exception:
        rec.failed = traceback.format_exc()
    rec.wall_time = time.perf_counter() - t0
    return rec


def persist(rec: RunRecord, root) -> Path:
    folder = Path(root) / f"{rec.config.experiment}-{rec.config_hash[:12]}"
    folder.mkdir(parents=True, exist_ok=True)
    (folder / "config.ini").write_text(rec.config.to_ini())
    for name, tab in rec.tables.items():
        (folder / f"{name}.csv").write_text(tab.to_csv())
    for name, blob in rec.artifacts.items():
        (folder / name).write_bytes(blob)
    (folder / "record.json").write_text(json.dumps(rec.summary(), indent=2, sort_keys=True))
    marker = folder / "FAILED"
    if rec.failed:
        marker.write_text(rec.failed)
    elif marker.exists():
        marker.unlink()
    return folder


# ------------------------------------------------------------------------ CLI

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pamlab", description="Parabolic Anderson model experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="INI file with [run], [geometry], [physics]")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, help=f"output root (beats ${OUT_ENV} and the config)")
        s.add_argument("--threads", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        text = args.config.read_text() if args.config else ""
        cfg = parse_config(text, {"experiment": args.experiment, "seed": args.seed})
        root = args.out or os.environ.get(OUT_ENV) or cfg.out
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    rec = run(cfg, threads=args.threads)
    folder = persist(rec, root)
    for name, ok, value in rec.invariants:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {_jsonable(value)}")
    print(f"run folder: {folder}")
    if rec.failed:
        print(rec.failed, file=sys.stderr)
        return 1
    return 0 if rec.passed else 2


if __name__ == "__main__":
    sys.exit(main())

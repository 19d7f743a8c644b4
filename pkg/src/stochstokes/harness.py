"""Monte Carlo error estimation, rate fits and pathwise statistics.

Every sample index ``s`` owns one fine Brownian increment table; every
resolution in a study (time steps, meshes, schemes) and its reference
consume aggregations of that same table.  Samples are processed in fixed
chunks (optionally on a thread pool) and reduced in ascending sample order,
so reports are a pure function of the configuration and the seed.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .fem import taylor_hood
from .mesh import build_torus_mesh
from .noise import NoiseModel, aggregate, make_driver
from .schemes import FORCINGS, VELOCITY_FIELDS, FemIntegrator, SchemeConfig, SpectralIntegrator, named_field
from .spectral import SpectralGrid, mode_table, spectral_grid

__all__ = [
    "ConfigError",
    "ExperimentFailure",
    "ExperimentConfig",
    "RunSpec",
    "ResolutionReport",
    "ErrorReport",
    "RateFit",
    "fit_rate",
    "power_mean",
    "jackknife_power_mean",
    "estimate_errors",
    "converge_time",
    "converge_space",
    "compare_noise",
    "pathwise_stats",
    "CSV_HEADER",
]

CSV_HEADER = [
    "scheme", "noise", "n", "M", "k", "h", "q", "err_vel_maxL2", "se",
    "err_weakH1", "err_P", "err_R", "pathwise_p95", "samples", "flagged",
]  # fmt: skip


class ConfigError(ValueError):
    pass


class ExperimentFailure(RuntimeError):
    pass


DEFAULT_BANDS = {
    "time_slope": (0.35, 0.60),
    "moment_slope": (0.30, 0.65),
    "pressure_slope": (0.35, 0.60),
    "space_slope_min": (0.75,),
    "r2_min": (0.95,),
    "ratio_standard_min": (1.5,),
    "ratio_modified": (0.5, 1.2),
    "stability_variation": (0.10,),
    "pathwise_factor": (2.0,),
    "max_flagged": (0.05,),
}

_SECTIONS = {
    "model": {"nu", "T", "L", "u0", "forcing"},
    "noise": {"family", "sigma0", "sigma1", "c"},
    "discretization": {"scheme", "M_list", "n_list", "M_ref", "N_modes", "reference", "backend"},
    "experiment": {"samples", "q_list", "gamma1", "checkpoints", "seed", "chunk", "workers", "check_every_step"}
    | set(DEFAULT_BANDS),
}


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class ExperimentConfig:
    nu: float = 1.0
    T: float = 0.5
    L: float = 1.0
    u0: str = "taylor-green"
    forcing: str = "zero"
    family: str = "affine"
    sigma0: float = 0.5
    sigma1: float = 0.5
    c: float = 0.0
    scheme: str = "standard"
    M_list: tuple = (16, 32, 64, 128)
    n_list: tuple = ()
    M_ref: int = 4096
    N_modes: int = 32
    reference: str = "auto"  # fine | same-k | auto
    backend: str = "circulant"
    samples: int = 200
    q_list: tuple = (2.0, 4.0, 8.0)
    gamma1: float = 0.25
    checkpoints: tuple = ()
    seed: int = 0
    chunk: int = 50
    workers: int = 1
    check_every_step: bool = True
    bands: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.noise_model()
            self.scheme_config("standard", max(self.M_list) if self.M_list else 1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.scheme not in ("standard", "modified", "both"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.u0 not in VELOCITY_FIELDS:
            raise ConfigError(f"unknown initial field {self.u0!r}; expected one of {sorted(VELOCITY_FIELDS)}")
        if self.forcing not in FORCINGS:
            raise ConfigError(f"unknown forcing {self.forcing!r}; expected one of {sorted(FORCINGS)}")
        if not self.M_list:
            raise ConfigError("M_list is empty")
        if self.M_ref < 1 or self.M_ref & (self.M_ref - 1):
            raise ConfigError(f"M_ref must be a power of 2, got {self.M_ref}")
        for M in self.M_list:
            if M < 1 or M & (M - 1) or self.M_ref % M:
                raise ConfigError(f"every M must be a power of 2 dividing M_ref={self.M_ref}, got {M}")
        if any(n < 2 for n in self.n_list):
            raise ConfigError("mesh sizes must be >= 2")
        if self.N_modes < 4 or self.N_modes % 2:
            raise ConfigError("N_modes must be even and >= 4")
        if any(q < 2 for q in self.q_list) or not self.q_list:
            raise ConfigError("moment orders must be >= 2")
        min_samples = 1 if self.noise_model().is_zero else 2
        if self.samples < min_samples:
            raise ConfigError(f"need at least {min_samples} samples")
        if not self.gamma1 > 0:
            raise ConfigError("gamma1 must be positive")
        if self.reference not in ("auto", "fine", "same-k"):
            raise ConfigError(f"unknown reference mode {self.reference!r}")
        if self.backend not in ("direct", "circulant"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        unknown = set(self.bands) - set(DEFAULT_BANDS)
        if unknown:
            raise ConfigError(f"unknown tolerance keys {sorted(unknown)}")

    # -- derived -------------------------------------------------------------
    def band(self, name: str) -> tuple:
        return tuple(self.bands.get(name, DEFAULT_BANDS[name]))

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.family, self.sigma0, self.sigma1, self.c, self.L)

    def scheme_config(self, scheme: str, M: int) -> SchemeConfig:
        f = named_field(self.forcing, self.L, FORCINGS)
        forcing = None if f is None else (lambda t, x, y, _f=f: _f(x, y))
        return SchemeConfig(self.nu, self.T, M, scheme, self.noise_model(), forcing, self.u0, self.L)

    def schemes(self) -> tuple[str, ...]:
        return ("standard", "modified") if self.scheme == "both" else (self.scheme,)

    def replace(self, **kw) -> "ExperimentConfig":
        d = asdict(self)
        d.update(kw)
        return ExperimentConfig(**d)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        kw: dict = {}
        bands: dict = {}
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                try:
                    if key in DEFAULT_BANDS:
                        bands[key] = _floats(value)
                    elif key in ("M_list", "n_list", "checkpoints"):
                        kw[key] = _ints(value)
                    elif key == "q_list":
                        kw[key] = _floats(value)
                    elif key in ("M_ref", "N_modes", "samples", "seed", "chunk", "workers"):
                        kw[key] = int(value)
                    elif key == "check_every_step":
                        kw[key] = parser.getboolean(section, key)
                    elif key in ("nu", "T", "L", "sigma0", "sigma1", "c", "gamma1"):
                        kw[key] = float(value)
                    else:
                        kw[key] = value.strip()
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
        kw["bands"] = bands
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


# -- statistics ------------------------------------------------------------------


def power_mean(x: np.ndarray, q: float) -> float:
    """``(mean x^q)^(1/q)`` computed relative to ``max x``.

    Scaling by the maximum keeps large ``q`` from overflowing and returns the
    common value exactly when all samples coincide.
    """
    x = np.asarray(x, dtype=float)
    top = float(x.max()) if x.size else 0.0
    if top == 0.0:
        return 0.0
    return top * float(np.mean((x / top) ** q)) ** (1.0 / q)


def jackknife_power_mean(x: np.ndarray, q: float) -> tuple[float, float]:
    """Power mean and its leave-one-out jackknife standard error."""
    x = np.asarray(x, dtype=float)
    S = x.size
    est = power_mean(x, q)
    if S < 2 or est == 0.0:
        return est, 0.0
    top = float(x.max())
    y = (x / top) ** q
    loo = top * ((y.sum() - y) / (S - 1)) ** (1.0 / q)
    se = math.sqrt((S - 1) / S * float(np.sum((loo - loo.mean()) ** 2)))
    return est, se


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    points: int

    def to_dict(self) -> dict:
        return asdict(self)


def fit_rate(points) -> RateFit:
    """Least-squares fit of ``log error = slope log resolution + intercept``."""
    pts = [(float(a), float(b)) for a, b in points]
    if len(pts) < 3:
        raise ValueError(f"a rate fit needs at least 3 points, got {len(pts)}")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if (x <= 0).any() or (y <= 0).any() or not np.isfinite(y).all():
        raise ValueError("resolutions and errors must be positive and finite")
    lx, ly = np.log(x), np.log(y)
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2, len(pts))


def pathwise_stats(max_errors: dict, gamma1: float, quantiles=(0.05, 0.5, 0.95), factor: float = 2.0) -> dict:
    """Empirical quantiles of ``K_s = max_err_s / k^gamma1`` per step size.

    ``max_errors`` maps a step size ``k`` to the per-sample max errors.  The
    95th percentile is called stable when its largest and smallest values
    over the ladder differ by at most ``factor``.
    """
    if not gamma1 > 0:
        raise ValueError("gamma1 must be positive")
    if len(max_errors) < 2:
        raise ValueError("need per-sample errors from at least two resolutions")
    table = {}
    for k in sorted(max_errors):
        K = np.asarray(max_errors[k], dtype=float) / k**gamma1
        table[k] = {f"q{int(round(100 * q))}": float(np.quantile(K, q)) for q in quantiles}
        table[k]["K"] = K
    p95 = [table[k]["q95"] for k in table]
    ratio = max(p95) / min(p95) if min(p95) > 0 else math.inf
    return {"table": table, "p95_ratio": ratio, "stable": ratio <= factor, "gamma1": gamma1}


# -- FE vs spectral error functionals ----------------------------------------------


class Comparator:
    """Quadrature L2 distances between spectral fields and FE functions.

    Spectral coefficients come restricted to a fixed set of Fourier modes
    (the support of the data, which the affine dynamics never leave), in the
    ``(..., 1, nm)`` layout of :class:`~stochstokes.spectral.ModeSet`.  Expanding
    ``||a - b||^2`` over the degree-6 quadrature gives exactly the quadrature
    of the squared difference of both fields evaluated at the same nodes.
    """

    def __init__(self, mesh, grid: SpectralGrid, iy: np.ndarray, ix: np.ndarray):
        th = taylor_hood(mesh)
        qt = th.quad
        self.th = th
        self.iy, self.ix = iy, ix
        E = mode_table(grid, qt.points, iy, ix)
        WE = qt.weights[:, None] * E
        self.gram = E.T @ WE
        kx, ky = grid.kx[iy, ix], grid.ky[iy, ix]
        self.kx, self.ky = kx, ky
        self.gram_grad = -(np.outer(kx, kx) + np.outer(ky, ky)) * self.gram
        self.load_v = (qt.p2.T @ WE)  # (n2, nm)
        self.load_p = (qt.p1.T @ WE)
        self.load_dx = qt.p2_dx.T @ WE
        self.load_dy = qt.p2_dy.T @ WE
        self.n2 = th.n2

    def _quad(self, c: np.ndarray, G: np.ndarray) -> np.ndarray:
        # c: (S, nm)
        return np.real(np.einsum("sm,mk,sk->s", c, G, c))

    def velocity_sq(self, uhat: np.ndarray, u: np.ndarray) -> np.ndarray:
        """``uhat`` (S, 2, 1, nm) spectral, ``u`` (nvel, S) FE."""
        n2 = self.n2
        total = np.einsum("is,is->s", u, self.th.mass_vel @ u)
        for comp in range(2):
            c = uhat[:, comp, 0, :]
            uc = u[comp * n2 : (comp + 1) * n2]
            total = total + self._quad(c, self.gram) - 2 * np.real(np.einsum("sm,ms->s", c, self.load_v.T @ uc))
        return np.maximum(total, 0.0)

    def gradient_sq(self, uhat: np.ndarray, u: np.ndarray) -> np.ndarray:
        n2 = self.n2
        total = np.einsum("is,is->s", u, self.th.stiff_vel @ u)
        for comp in range(2):
            c = uhat[:, comp, 0, :]
            uc = u[comp * n2 : (comp + 1) * n2]
            cross = np.einsum("sm,ms->s", 1j * self.kx * c, self.load_dx.T @ uc) + np.einsum(
                "sm,ms->s", 1j * self.ky * c, self.load_dy.T @ uc
            )
            total = total + self._quad(c, self.gram_grad) - 2 * np.real(cross)
        return np.maximum(total, 0.0)

    def scalar_sq(self, phat: np.ndarray, p: np.ndarray) -> np.ndarray:
        """``phat`` (S, 1, nm), ``p`` (n1, S)."""
        c = phat[:, 0, :]
        total = np.einsum("is,is->s", p, self.th.mass_p1 @ p)
        total = total + self._quad(c, self.gram) - 2 * np.real(np.einsum("sm,ms->s", c, self.load_p.T @ p))
        return np.maximum(total, 0.0)


def _spectral_support(integ: SpectralIntegrator, T: float, rtol: float = 1e-13):
    a = np.abs(integ.initial())
    a = a.sum(axis=0) + np.abs(integ.noise.b0).sum(axis=0)
    for t in (0.0, 0.5 * T, T):
        f = integ.forcing_hat(t)
        if f is not None:
            a = a + np.abs(f).sum(axis=0)
    top = a.max()
    if top == 0:
        # keep one mode pair so the functionals stay well defined
        a = np.zeros_like(a)
        a[0, 1] = a[0, -1] = 1.0
        top = 1.0
    mask = a > rtol * top
    iy, ix = np.nonzero(mask)
    return iy, ix, mask


# -- simulation engine -------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """One resolution of a study.  ``n = None`` means the spectral scheme."""

    scheme: str
    M: int
    n: int | None = None
    ref_M: int | None = None  # step count of the spectral reference


@dataclass
class ResolutionReport:
    scheme: str
    noise: str
    n: int | None
    M: int
    k: float
    h: float | None
    max_err: np.ndarray  # per used sample
    weak_h1: np.ndarray
    err_P: np.ndarray
    err_R: np.ndarray
    stability: np.ndarray
    p_energy: np.ndarray
    r_energy: np.ndarray
    samples: int
    flagged: int
    max_divergence: float
    q_list: tuple
    gamma1: float

    @cached_property
    def moments(self) -> dict:
        out = {}
        for q in self.q_list:
            e, se = jackknife_power_mean(self.max_err, q)
            out[q] = {
                "err_vel_maxL2": e,
                "se": se,
                "err_weakH1": power_mean(self.weak_h1, q),
                "err_P": power_mean(self.err_P, q),
                "err_R": power_mean(self.err_R, q),
            }
        return out

    @property
    def pathwise_p95(self) -> float:
        K = self.max_err / self.k**self.gamma1
        return float(np.quantile(K, 0.95)) if K.size else math.nan

    def rows(self) -> list[list]:
        rows = []
        for q in self.q_list:
            m = self.moments[q]
            rows.append(
                [
                    self.scheme, self.noise, "" if self.n is None else self.n, self.M, repr(self.k),
                    "" if self.h is None else repr(self.h), repr(q), repr(m["err_vel_maxL2"]), repr(m["se"]),
                    repr(m["err_weakH1"]), repr(m["err_P"]), repr(m["err_R"]), repr(self.pathwise_p95),
                    self.samples - self.flagged, self.flagged,
                ]  # fmt: skip
            )
        return rows


@dataclass
class ErrorReport:
    config: ExperimentConfig
    resolutions: list
    checksums: list  # fine-increment checksum per sample index
    fits: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def find(self, scheme: str | None = None, n=None, M=None) -> ResolutionReport:
        for r in self.resolutions:
            if (scheme is None or r.scheme == scheme) and (n is None or r.n == n) and (M is None or r.M == M):
                return r
        raise KeyError((scheme, n, M))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.resolutions:
            w.writerows(r.rows())
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "fits": {k: v.to_dict() if isinstance(v, RateFit) else v for k, v in self.fits.items()},
            "extra": _jsonable(self.extra),
            "flagged": sum(r.flagged for r in self.resolutions),
            "samples": self.config.samples,
            "rows": [dict(zip(CSV_HEADER, row)) for r in self.resolutions for row in r.rows()],
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


class _Engine:
    """Lockstep simulation of several resolutions on shared sample paths."""

    def __init__(self, cfg: ExperimentConfig, runs: list[RunSpec]):
        self.cfg = cfg
        self.runs = runs
        self.grid = spectral_grid(cfg.L, cfg.N_modes)
        ref_steps = sorted({r.ref_M for r in runs})
        self.M_fine = max(ref_steps + [r.M for r in runs])
        for r in runs:
            if r.ref_M % r.M:
                raise ConfigError(f"reference with {r.ref_M} steps cannot be sampled at {r.M} steps")
        # references always run the standard spectral scheme (velocity, P and R
        # do not depend on the scheme choice in the spectral setting)
        probe = SpectralIntegrator(self.grid, cfg.scheme_config("standard", self.M_fine))
        self.iy, self.ix, self.support = _spectral_support(probe, cfg.T)
        modes = self.support
        self.refs = {M: SpectralIntegrator(self.grid, cfg.scheme_config("standard", M), modes) for M in ref_steps}
        self.integrators = []
        for r in runs:
            sc = cfg.scheme_config(r.scheme, r.M)
            if r.n is None:
                self.integrators.append(SpectralIntegrator(self.grid, sc, modes))
            else:
                mesh = build_torus_mesh(cfg.L, r.n)
                self.integrators.append(FemIntegrator(mesh, sc, cfg.backend))
        self.comparators = {}
        for r, integ in zip(runs, self.integrators):
            if r.n is not None and r.n not in self.comparators:
                self.comparators[r.n] = Comparator(integ.mesh, self.grid, self.iy, self.ix)

    # per-chunk simulation; returns per-run dict of per-sample arrays
    def simulate(self, samples: list[int]) -> tuple[list[dict], list[str]]:
        cfg = self.cfg
        S = len(samples)
        drivers = [make_driver(cfg.seed, cfg.T, self.M_fine, s) for s in samples]
        fine = np.stack([d.fine for d in drivers])
        checks = [d.checksum() for d in drivers]
        level_total = int(round(math.log2(self.M_fine)))
        total = aggregate(fine, level_total)

        def incs(M):
            lev = int(round(math.log2(self.M_fine // M)))
            inc = aggregate(fine, lev)
            # coupled-path discipline: the coarse table is a tree-sum of the fine one
            if not np.array_equal(aggregate(inc, int(round(math.log2(M)))), total):
                raise AssertionError("coarse increments do not aggregate to the fine path")
            return inc

        ref_inc = {M: incs(M) for M in self.refs}
        run_inc = [incs(r.M) for r in self.runs]
        ref_state = {M: integ.initial(S) for M, integ in self.refs.items()}
        ref_P = {M: 0.0 for M in self.refs}
        ref_R = {M: 0.0 for M in self.refs}
        state = [integ.initial(S) for integ in self.integrators]
        acc = []
        for r, integ, u in zip(self.runs, self.integrators, state):
            a = {
                "max_err": np.zeros(S),
                "U": np.zeros_like(u),
                "Uref": np.zeros((S, 2, 1, self.iy.size), dtype=complex),
                "P": 0.0,
                "R": 0.0,
                "l2max": integ.l2_sq(u),
                "h1sum": np.zeros(S),
                "p_energy": np.zeros(S),
                "r_energy": np.zeros(S),
                "div": np.zeros(S),
            }
            acc.append(a)
        for j in range(self.M_fine):
            for M, integ in self.refs.items():
                ratio = self.M_fine // M
                if (j + 1) % ratio:
                    continue
                n = (j + 1) // ratio - 1
                out = integ.step(ref_state[M], n, ref_inc[M][:, n])
                ref_state[M] = out.u
                ref_P[M] = ref_P[M] + integ.k * out.p
                ref_R[M] = ref_R[M] + integ.k * out.r
            for i, (r, integ) in enumerate(zip(self.runs, self.integrators)):
                ratio = self.M_fine // r.M
                if (j + 1) % ratio:
                    continue
                n = (j + 1) // ratio - 1
                out = integ.step(state[i], n, run_inc[i][:, n])
                state[i] = u = out.u
                a = acc[i]
                uref = ref_state[r.ref_M]
                k = integ.k
                if r.n is None:
                    err = np.sqrt(integ.l2_sq(uref - u))
                else:
                    err = np.sqrt(self.comparators[r.n].velocity_sq(uref, u))
                    if cfg.check_every_step:
                        a["div"] = np.maximum(a["div"], integ.divergence(u))
                a["max_err"] = np.fmax(a["max_err"], np.where(np.isfinite(err), err, np.inf))
                a["U"] = a["U"] + u
                a["Uref"] = a["Uref"] + uref
                a["P"] = a["P"] + k * out.p
                a["R"] = a["R"] + k * out.r
                a["l2max"] = np.maximum(a["l2max"], integ.l2_sq(u))
                a["h1sum"] = a["h1sum"] + integ.h1_sq(u)
                a["p_energy"] = a["p_energy"] + k * integ.grad_p_sq(out.p)
                a["r_energy"] = a["r_energy"] + k * integ.grad_p_sq(out.r)
        results = []
        for r, integ, a in zip(self.runs, self.integrators, acc):
            nu, k = cfg.nu, integ.k
            uref_sum = a["Uref"]
            Pref, Rref = ref_P[r.ref_M], ref_R[r.ref_M]
            if r.n is None:
                weak = nu * k * np.sqrt(integ.h1_sq(uref_sum - a["U"]))
                eP = np.sqrt(self.grid.L**2 * (np.abs(Pref - a["P"]) ** 2).sum(axis=(-2, -1)))
                eR = np.sqrt(self.grid.L**2 * (np.abs(Rref - a["R"]) ** 2).sum(axis=(-2, -1)))
            else:
                cmp_ = self.comparators[r.n]
                weak = nu * k * np.sqrt(cmp_.gradient_sq(uref_sum, a["U"]))
                eP = np.sqrt(cmp_.scalar_sq(Pref, a["P"]))
                eR = np.sqrt(cmp_.scalar_sq(Rref, a["R"]))
            stab = a["l2max"] + nu * k * a["h1sum"]
            bad = ~np.isfinite(a["max_err"]) | ~np.isfinite(stab) | (stab > 1e16)
            results.append(
                {
                    "max_err": a["max_err"],
                    "weak_h1": weak,
                    "err_P": eP,
                    "err_R": eR,
                    "stability": stab,
                    "p_energy": a["p_energy"],
                    "r_energy": a["r_energy"],
                    "div": a["div"],
                    "bad": bad,
                }
            )
        return results, checks


def estimate_errors(cfg: ExperimentConfig, runs: list[RunSpec] | None = None) -> ErrorReport:
    """Monte Carlo error functionals for each resolution in ``runs``.

    Without ``runs`` the ladder comes from the configuration: the FE scheme on
    every ``(n, M)`` pair when ``n_list`` is set, the spectral scheme on every
    ``M`` otherwise.
    """
    if runs is None:
        runs = default_runs(cfg)
    engine = _Engine(cfg, runs)
    S = cfg.samples
    chunks = [list(range(s, min(s + cfg.chunk, S))) for s in range(0, S, max(cfg.chunk, 1))]
    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(engine.simulate, chunks))
    else:
        parts = [engine.simulate(c) for c in chunks]
    checks = [c for _, cs in parts for c in cs]
    reports = []
    noise = cfg.family
    for i, (r, integ) in enumerate(zip(runs, engine.integrators)):
        cat = {key: np.concatenate([p[0][i][key] for p in parts]) for key in parts[0][0][i]}
        bad = cat.pop("bad")
        good = ~bad
        h = None if r.n is None else cfg.L * math.sqrt(2.0) / r.n
        reports.append(
            ResolutionReport(
                r.scheme, noise, r.n, r.M, integ.k, h,
                cat["max_err"][good], cat["weak_h1"][good], cat["err_P"][good], cat["err_R"][good],
                cat["stability"][good], cat["p_energy"][good], cat["r_energy"][good],
                S, int(bad.sum()), float(cat["div"].max(initial=0.0)), tuple(cfg.q_list), cfg.gamma1,
            )  # fmt: skip
        )
    rep = ErrorReport(cfg, reports, checks)
    limit = cfg.band("max_flagged")[0]
    worst = max((r.flagged / S for r in reports), default=0.0)
    if worst > limit:
        raise ExperimentFailure(f"{worst:.1%} of samples flagged unstable (limit {limit:.0%})")
    return rep


def _ref_M(cfg: ExperimentConfig, M: int, default: str) -> int:
    mode = default if cfg.reference == "auto" else cfg.reference
    return M if mode == "same-k" else cfg.M_ref


def default_runs(cfg: ExperimentConfig) -> list[RunSpec]:
    runs = []
    for scheme in cfg.schemes():
        if cfg.n_list:
            for n in cfg.n_list:
                for M in cfg.M_list:
                    runs.append(RunSpec(scheme, M, n, _ref_M(cfg, M, "same-k")))
        else:
            for M in cfg.M_list:
                runs.append(RunSpec(scheme, M, None, _ref_M(cfg, M, "fine")))
    return runs


def _fit_or_none(points):
    try:
        return fit_rate(points)
    except ValueError as exc:
        return {"error": str(exc), "points": [list(p) for p in points]}


def converge_time(cfg: ExperimentConfig) -> ErrorReport:
    """Temporal rates of the spectral (semi-discrete) scheme against a fine reference."""
    scheme = cfg.schemes()[0]
    runs = [RunSpec(scheme, M, None, _ref_M(cfg, M, "fine")) for M in sorted(cfg.M_list)]
    rep = estimate_errors(cfg, runs)
    for q in cfg.q_list:
        pts = [(r.k, r.moments[q]) for r in rep.resolutions]
        for key, name in (("err_vel_maxL2", "velocity"), ("err_weakH1", "weakH1"), ("err_P", "P"), ("err_R", "R")):
            rep.fits[f"{name}_q{q:g}"] = _fit_or_none([(k, m[key]) for k, m in pts])
    rep.extra["stability"] = {r.M: float(np.mean(r.stability)) for r in rep.resolutions}
    rep.extra["pathwise"] = _pathwise_summary(rep, cfg)
    return rep


def _pathwise_summary(rep: ErrorReport, cfg: ExperimentConfig) -> dict:
    errs = {r.k: r.max_err for r in rep.resolutions if r.max_err.size}
    if len(errs) < 2:
        return {}
    st = pathwise_stats(errs, cfg.gamma1, factor=cfg.band("pathwise_factor")[0])
    return {
        "p95_ratio": st["p95_ratio"],
        "stable": st["stable"],
        "table": {k: {q: v for q, v in row.items() if q != "K"} for k, row in st["table"].items()},
    }


def converge_space(cfg: ExperimentConfig) -> ErrorReport:
    """Spatial rates of the FE scheme(s) at fixed ``k`` against the spectral scheme at the same ``k``."""
    if not cfg.n_list:
        raise ConfigError("converge-space needs n_list")
    M = cfg.M_list[0]
    runs = [RunSpec(s, M, n, _ref_M(cfg, M, "same-k")) for s in cfg.schemes() for n in sorted(cfg.n_list)]
    rep = estimate_errors(cfg, runs)
    for s in cfg.schemes():
        res = [r for r in rep.resolutions if r.scheme == s]
        for q in cfg.q_list:
            for key, name in (("err_vel_maxL2", "velocity"), ("err_weakH1", "weakH1"), ("err_P", "P"), ("err_R", "R")):
                rep.fits[f"{s}_{name}_q{q:g}"] = _fit_or_none([(r.h, r.moments[q][key]) for r in res])
    return rep


def compare_noise(cfg: ExperimentConfig) -> ErrorReport:
    """Pressure-error growth under k-refinement, standard vs modified FE scheme.

    Both schemes run on the first mesh of ``n_list`` over the ``M_list``
    ladder on identical paths; each is compared with the spectral scheme at
    the same ``k``.  ``extra['ratios']`` holds ``err(k_min)/err(k_max)``.
    """
    if not cfg.n_list:
        raise ConfigError("compare-noise needs n_list")
    n = cfg.n_list[0]
    Ms = sorted(cfg.M_list)
    runs = [RunSpec(s, M, n, _ref_M(cfg, M, "same-k")) for s in ("standard", "modified") for M in Ms]
    rep = estimate_errors(cfg, runs)
    q = cfg.q_list[0]
    ratios = {}
    for s in ("standard", "modified"):
        lo, hi = rep.find(s, n, Ms[0]), rep.find(s, n, Ms[-1])
        ratios[s] = {
            key: (hi.moments[q][key] / lo.moments[q][key] if lo.moments[q][key] > 0 else math.nan)
            for key in ("err_P", "err_R", "err_vel_maxL2")
        }
        ratios[s]["p_energy"] = float(np.mean(hi.p_energy) / np.mean(lo.p_energy))
        ratios[s]["r_energy"] = float(np.mean(hi.r_energy) / np.mean(lo.r_energy))
    rep.extra["ratios"] = ratios
    rep.extra["r_energy"] = {
        s: {M: float(np.mean(rep.find(s, n, M).r_energy)) for M in Ms} for s in ("standard", "modified")
    }
    rep.extra["p_energy"] = {
        s: {M: float(np.mean(rep.find(s, n, M).p_energy)) for M in Ms} for s in ("standard", "modified")
    }
    return rep


def _variation(values) -> float:
    v = np.asarray(list(values), dtype=float)
    return float((v.max() - v.min()) / v.min())


def evaluate_bands(rep: ErrorReport, command: str) -> list[tuple[str, bool, str]]:
    """Check a study against its configured acceptance bands."""
    cfg = rep.config
    checks = []
    if command == "converge-time":
        q0 = cfg.q_list[0]
        lo, hi = cfg.band("pressure_slope" if cfg.family == "leray-projected" else "time_slope")
        r2min = cfg.band("r2_min")[0]
        key = "P" if cfg.family == "leray-projected" else "velocity"
        fit = rep.fits.get(f"{key}_q{q0:g}")
        ok = isinstance(fit, RateFit) and lo <= fit.slope <= hi and fit.r2 >= r2min
        checks.append((f"{key} slope q={q0:g}", ok, _fmt_fit(fit)))
        mlo, mhi = cfg.band("moment_slope")
        for q in cfg.q_list[1:]:
            fit = rep.fits.get(f"velocity_q{q:g}")
            ok = isinstance(fit, RateFit) and mlo <= fit.slope <= mhi
            checks.append((f"velocity slope q={q:g}", ok, _fmt_fit(fit)))
        var = _variation(rep.extra["stability"].values())
        checks.append(("stability variation", var <= cfg.band("stability_variation")[0], f"{var:.3f}"))
        pw = rep.extra.get("pathwise") or {}
        if pw:
            checks.append(("pathwise p95 stability", bool(pw["stable"]), f"ratio={pw['p95_ratio']:.3f}"))
    elif command == "converge-space":
        smin = cfg.band("space_slope_min")[0]
        q0 = cfg.q_list[0]
        for s in cfg.schemes():
            for name in ("velocity", "P", "R"):
                fit = rep.fits.get(f"{s}_{name}_q{q0:g}")
                ok = isinstance(fit, RateFit) and fit.slope >= smin
                checks.append((f"{s} {name} slope", ok, _fmt_fit(fit)))
    elif command == "compare-noise":
        r = rep.extra["ratios"]
        smin = cfg.band("ratio_standard_min")[0]
        lo, hi = cfg.band("ratio_modified")
        checks.append(("standard pressure ratio", r["standard"]["err_P"] >= smin, f"{r['standard']['err_P']:.3f}"))
        checks.append(("modified pressure ratio", lo <= r["modified"]["err_P"] <= hi, f"{r['modified']['err_P']:.3f}"))
        var = _variation(rep.extra["r_energy"]["modified"].values())
        checks.append(("modified r-energy variation", var <= cfg.band("stability_variation")[0], f"{var:.3f}"))
    return checks


def _fmt_fit(fit) -> str:
    if isinstance(fit, RateFit):
        return f"slope={fit.slope:.3f} R2={fit.r2:.3f}"
    return str(fit)


def summary_json(rep: ErrorReport) -> str:
    return json.dumps(rep.summary(), indent=2, sort_keys=True)

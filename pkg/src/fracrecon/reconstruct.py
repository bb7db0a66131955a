"""Probe families, extrapolation of scaled pairings, and tensor recovery.

For a probe concentrating at x0 in direction alpha the scaled pairings

    dtn:  N^{-2s+n/2} <Lambda phi_N, phi_N>  ->  (c1 + c2) q^s
    ntd:  N^{+2s+n/2} <f_N, NtD f_N>         ->  c_hat^{-2} (c1 + c2) q^{-s}

with q = c(x0)^{1/s} alpha.gamma(x0) alpha.  Limits are estimated by a
least-squares fit over a frequency schedule; polarization over the
directions e_j and (e_j + e_l)/sqrt(2) gives gamma(x0).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import extsolver
from .ansatz import ProbeSpec, admissible_frequencies, dirichlet_data, make_cutoff, neumann_data
from .extsolver import ConductivityField, ResolutionSpec, WeightedGrid, build_domain, dtn_pairing, ntd_pairing
from .specfun import PaperConstants, _order, gamma_constants, paper_constants

__all__ = [
    "PairingSeries",
    "RecoveredTensor",
    "GapReport",
    "FIT_MODELS",
    "fit_limit",
    "ntd_schedule",
    "target_limit",
    "probe_direction",
    "quadratic_form_from_limit",
    "polarization_directions",
    "assemble_tensor",
    "weighted_form_from_metric",
    "recover_metric_from_weighted",
    "reconstruct_tensor",
    "stability_gap",
]

FIT_MODELS = {
    "inverse": lambda N: [1.0 / N],
    "sqrt": lambda N: [N ** -0.5],
    "quadratic": lambda N: [1.0 / N, 1.0 / N ** 2],
}

DEFAULT_DTN_SCHEDULE = (32.0, 64.0, 128.0)
DEFAULT_NTD_TARGETS = (320.0, 640.0, 1280.0)

# tangential resolution for the constant-coefficient fast path; only FFTs
# of the boundary data are needed, so the spectral window can be wide
FAST_RESOLUTION = ResolutionSpec(spectral_width=160.0, memory_cap=float("inf"))


@dataclass
class PairingSeries:
    mode: str
    alpha: np.ndarray
    x0: np.ndarray
    schedule: list
    raw: list
    scaled: list
    fit: tuple                 # (limit, slope coefficients, rms residual)
    fit_model: str = "inverse"
    grids: list = dc_field(default_factory=list)
    schedule_cap: float | None = None
    notes: list = dc_field(default_factory=list)

    @property
    def limit(self) -> float:
        return self.fit[0]

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "alpha": [float(v) for v in self.alpha],
            "x0": [float(v) for v in self.x0],
            "schedule": [float(v) for v in self.schedule],
            "raw": [float(v) for v in self.raw],
            "scaled": [float(v) for v in self.scaled],
            "fit_model": self.fit_model,
            "limit": float(self.fit[0]),
            "slope": [float(v) for v in self.fit[1]],
            "fit_residual": float(self.fit[2]),
            "schedule_cap": self.schedule_cap,
            "grids": self.grids,
            "notes": list(self.notes),
        }


def fit_limit(schedule, scaled, model: str = "inverse"):
    """Least-squares a + sum_i b_i g_i(N); returns (a, [b_i], rms residual)."""
    if model not in FIT_MODELS:
        raise ValueError(f"unknown fit model {model!r}; choose from {sorted(FIT_MODELS)}")
    N = np.asarray(schedule, dtype=float)
    y = np.asarray(scaled, dtype=float)
    basis = FIT_MODELS[model]
    cols = [np.ones_like(N)] + [np.array([basis(v)[i] for v in N]) for i in range(len(basis(1.0)))]
    A = np.stack(cols, axis=1)
    if len(N) < A.shape[1] + 1:
        raise ValueError(f"fit model {model!r} needs at least {A.shape[1] + 1} schedule points")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return float(coef[0]), [float(c) for c in coef[1:]], float(np.sqrt(np.mean(res ** 2)))


def ntd_schedule(eta, alpha, targets=DEFAULT_NTD_TARGETS) -> list:
    """Admissible frequencies nearest to each target (duplicates dropped)."""
    targets = sorted(float(t) for t in targets)
    cands = admissible_frequencies(eta, alpha, 1, N_min=0.0, ceiling=max(targets) * 2.5)
    count = 4
    while cands and cands[-1] < max(targets) * 1.5 and count < 400:
        count *= 2
        cands = admissible_frequencies(eta, alpha, count, ceiling=max(targets) * 2.5)
    if not cands:
        raise ValueError("no admissible frequencies found")
    out = []
    for t in targets:
        best = min(cands, key=lambda v: abs(math.log(v / t)))
        if not out or best > out[-1]:
            out.append(best)
    return out


def target_limit(s, mode: str, q: float, constants: PaperConstants | None = None) -> float:
    """Limit of the scaled pairing for quadratic-form value q."""
    pc = constants or paper_constants(s)
    if mode == "dtn":
        return pc.c_sum * q ** pc.s
    if mode == "ntd":
        return pc.c_sum / pc.c_hat_s ** 2 * q ** (-pc.s)
    raise ValueError(f"unknown mode {mode!r}")


def quadratic_form_from_limit(limit: float, s, mode: str, constants: PaperConstants | None = None) -> float:
    """Invert the limit identity: q = C_alpha^2 (times c^{1/s} when weighted)."""
    if not limit > 0:
        raise ValueError(f"limit must be positive, got {limit!r}")
    pc = constants or paper_constants(s)
    if mode == "dtn":
        return (limit / pc.c_sum) ** (1.0 / pc.s)
    if mode == "ntd":
        return (pc.c_sum / pc.c_hat_s ** 2 / limit) ** (1.0 / pc.s)
    raise ValueError(f"unknown mode {mode!r}")


def _default_cutoff(mode, n):
    # Neumann probes need the product cutoff (exact zeros of eta_hat);
    # Dirichlet probes use the radial bump, whose transform decays faster
    return make_cutoff("mollified_box" if mode == "ntd" else "radial_bump", 0.1, n)


def _grid_for(field, N, s, x0, grid, resolution, fast):
    if isinstance(grid, WeightedGrid):
        return grid
    res = grid if isinstance(grid, ResolutionSpec) else (FAST_RESOLUTION if fast else ResolutionSpec())
    if resolution is not None:
        res = resolution
    return build_domain(field, N, res, s=s, center=x0)


def _fixed_grid_cap(grid: WeightedGrid) -> float:
    # largest N with >= 8 points per wavelength
    return 2.0 * math.pi / (8.0 * grid.tangential.spacing)


def probe_direction(field: ConductivityField, grid, s, x0, alpha, schedule=None, mode: str = "dtn", *,
                    cutoff=None, fit_model: str = "inverse", resolution: ResolutionSpec | None = None,
                    fast: bool | None = None, tol: float = 1e-9) -> PairingSeries:
    """Scaled pairings over a schedule and their extrapolated limit.

    ``grid`` is a WeightedGrid shared by every N, or None / a ResolutionSpec
    for per-frequency grids centred at x0 (the box and spectral window then
    follow each probe).
    """
    s = _order(s)
    if mode not in ("dtn", "ntd"):
        raise ValueError(f"unknown mode {mode!r}")
    n = field.n
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    alpha = alpha / np.linalg.norm(alpha)
    eta = cutoff or _default_cutoff(mode, n)
    if schedule is None:
        schedule = list(DEFAULT_DTN_SCHEDULE) if mode == "dtn" else ntd_schedule(eta, alpha)
    schedule = [float(v) for v in schedule]
    if len(schedule) < 3 or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly increasing with at least 3 entries")
    if isinstance(grid, WeightedGrid):
        use_fast = extsolver._fast_path_ok(field, grid) if fast is None else fast
    else:
        lateral = (resolution or (grid if isinstance(grid, ResolutionSpec) else ResolutionSpec())).lateral
        use_fast = (bool(field.constant) and lateral == "periodic") if fast is None else fast
    notes = []
    cap = None
    if isinstance(grid, WeightedGrid):
        cap = _fixed_grid_cap(grid)
        kept = [N for N in schedule if N <= cap * (1 + 1e-12)]
        if len(kept) < len(schedule):
            notes.append(f"schedule capped at N <= {cap:.6g} (8 points per wavelength)")
            schedule = kept
        if len(schedule) < 3:
            raise ValueError(f"fewer than 3 schedule points resolved by the grid (cap {cap:.6g})")
    raw, scaled, grids = [], [], []
    c_bar = gamma_constants(s)[2]
    for N in schedule:
        g = _grid_for(field, N, s, x0, grid, resolution, use_fast)
        if mode == "dtn":
            spec = ProbeSpec(x0, alpha, N, "dirichlet", 0, eta)
            data = dirichlet_data(spec, g.tangential, s)
            p = dtn_pairing(field, g, s, data, fast=use_fast, tol=tol)
            sc = N ** (-2 * s + n / 2.0) * p
        else:
            spec = ProbeSpec(x0, alpha, N, "neumann", 0, eta)
            data = neumann_data(spec, g.tangential)
            with warnings.catch_warnings():
                # the projected aliasing residue of the mean is reported in the notes below
                warnings.simplefilter("ignore", RuntimeWarning)
                p = ntd_pairing(field, g, s, data, fast=use_fast, tol=tol)
            sc = N ** (2 * s + n / 2.0) * p
        raw.append(p)
        scaled.append(sc)
        grids.append(g.describe())
    fit = fit_limit(schedule, scaled, fit_model)
    diffs = np.diff(scaled)
    if np.any(diffs > 0) and np.any(diffs < 0) and np.max(np.abs(diffs)) > 10 * max(fit[2], 1e-12):
        msg = "scaled pairings are not monotone in N; the grid may be under-resolved"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if not (fit[0] > 0 and math.isfinite(fit[0])):
        notes.append("extrapolated limit is not positive")
    return PairingSeries(mode, alpha, x0, schedule, raw, scaled, fit, fit_model, grids, cap, notes)


# --------------------------------------------------------------------------
# polarization
# --------------------------------------------------------------------------

def polarization_directions(n: int) -> list:
    """e_j, then (e_j + e_l)/sqrt(2) for j < l."""
    eye = np.eye(n)
    dirs = [eye[j] for j in range(n)]
    for j in range(n):
        for l in range(j + 1, n):
            dirs.append((eye[j] + eye[l]) / math.sqrt(2.0))
    return dirs


@dataclass
class RecoveredTensor:
    x0: np.ndarray
    matrix: np.ndarray
    q_values: dict
    residuals: dict = dc_field(default_factory=dict)
    eigenvalues: np.ndarray | None = None
    condition: float = float("nan")
    spd: bool = True
    series: list = dc_field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "x0": [float(v) for v in self.x0],
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "q_values": {k: float(v) for k, v in self.q_values.items()},
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "condition": float(self.condition),
            "spd": bool(self.spd),
            "series": [ser.as_dict() for ser in self.series],
        }


def _key(alpha) -> str:
    return "(" + ",".join(f"{float(v):.12g}" for v in alpha) + ")"


def _lookup(q_values, alpha):
    for k, v in q_values.items():
        vec = np.asarray(k if not isinstance(k, str) else _parse_key(k), dtype=float)
        if vec.shape == alpha.shape and np.allclose(vec / np.linalg.norm(vec), alpha, atol=1e-9):
            return float(v)
    return None


def _parse_key(k: str):
    return [float(v) for v in k.strip("()").split(",")]


def _finish(x0, G, q, residuals, series=()):
    G = 0.5 * (G + G.T)
    ev = np.linalg.eigvalsh(G)
    spd = bool(ev.min() > 0)
    if not spd:
        warnings.warn(f"recovered matrix is not positive definite (smallest eigenvalue {ev.min():.3e})",
                      RuntimeWarning, stacklevel=3)
    cond = float(ev.max() / ev.min()) if spd else float("inf")
    return RecoveredTensor(np.asarray(x0, dtype=float), G, q, residuals, ev, cond, spd, list(series))


def assemble_tensor(x0, q_values: dict, *, mode: str = "exact", series=()) -> RecoveredTensor:
    """Symmetric matrix from quadratic-form values q(alpha) = alpha.G alpha.

    ``q_values`` maps direction tuples (or their string keys) to values.
    mode="exact" uses the polarization directions only; mode="lstsq" fits
    every supplied direction and projects onto SPD matrices.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = len(x0)
    dirs = polarization_directions(n)
    if mode == "exact":
        vals = []
        missing = []
        for a in dirs:
            v = _lookup(q_values, a)
            if v is None:
                missing.append(_key(a))
            vals.append(v)
        if missing:
            raise ValueError(f"missing directions: {', '.join(missing)}")
        if any(v <= 0 for v in vals):
            raise ValueError("quadratic-form values must be positive")
        G = np.zeros((n, n))
        for j in range(n):
            G[j, j] = vals[j]
        idx = n
        for j in range(n):
            for l in range(j + 1, n):
                G[j, l] = G[l, j] = vals[idx] - 0.5 * (vals[j] + vals[l])
                idx += 1
        q = {_key(a): v for a, v in zip(dirs, vals)}
        return _finish(x0, G, q, {k: 0.0 for k in q}, series)
    if mode != "lstsq":
        raise ValueError(f"unknown assembly mode {mode!r}")
    rows, rhs, keys = [], [], []
    iu = np.triu_indices(n)
    for k, v in q_values.items():
        a = np.asarray(k if not isinstance(k, str) else _parse_key(k), dtype=float)
        a = a / np.linalg.norm(a)
        outer = np.outer(a, a)
        rows.append(np.where(iu[0] == iu[1], 1.0, 2.0) * outer[iu])
        rhs.append(float(v))
        keys.append(_key(a))
    A = np.array(rows)
    if np.linalg.matrix_rank(A) < len(iu[0]):
        raise ValueError("directions do not determine the matrix")
    sol, *_ = np.linalg.lstsq(A, np.array(rhs), rcond=None)
    G = np.zeros((n, n))
    G[iu] = sol
    G = G + np.triu(G, 1).T
    w, V = np.linalg.eigh(G)
    w = np.maximum(w, 1e-12 * max(abs(w).max(), 1.0))
    G = (V * w) @ V.T
    res = {k: float(r - (np.asarray(_parse_key(k)) @ G @ np.asarray(_parse_key(k))))
           for k, r in zip(keys, rhs)}
    return _finish(x0, G, dict(zip(keys, rhs)), res, series)


# --------------------------------------------------------------------------
# weighted variant: metric recovery
# --------------------------------------------------------------------------

def _check_spd(B, name):
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if np.max(np.abs(B - B.T)) > 1e-10 * max(1.0, np.abs(B).max()):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(0.5 * (B + B.T)).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return 0.5 * (B + B.T)


def weighted_form_from_metric(g, s) -> np.ndarray:
    """B = det(g)^{1/(2s)} g^{-1}: the form recovered by weighted probes when
    gamma = g^{-1}, c = sqrt(det g)."""
    s = _order(s)
    g = _check_spd(g, "g")
    return np.linalg.det(g) ** (1.0 / (2 * s)) * np.linalg.inv(g)


def recover_metric_from_weighted(B, s, n: int | None = None) -> np.ndarray:
    """Invert B = det(g)^{1/(2s)} g^{-1}.

    det B = det(g)^{n/(2s) - 1}, so det g = det(B)^{2s/(n-2s)}.
    """
    s = _order(s)
    B = _check_spd(B, "B")
    n = B.shape[0] if n is None else int(n)
    if B.shape != (n, n):
        raise ValueError("B does not match n")
    expo = n / (2.0 * s) - 1.0
    if abs(expo) < 1e-12:
        raise ValueError("det g is not determined by B when n = 2s")
    sign, logdet_B = np.linalg.slogdet(B)
    logdet_g = logdet_B / expo
    ginv = B * math.exp(-logdet_g / (2.0 * s))
    g = np.linalg.inv(ginv)
    return 0.5 * (g + g.T)


# --------------------------------------------------------------------------
# end-to-end
# --------------------------------------------------------------------------

def reconstruct_tensor(field: ConductivityField, s, x0, *, mode: str = "dtn", schedule=None, grid=None,
                       cutoff=None, fit_model: str = "inverse", resolution: ResolutionSpec | None = None,
                       fast: bool | None = None, directions=None, threads: int = 1) -> RecoveredTensor:
    """Probe every polarization direction (plus ``directions`` for lstsq)
    and assemble q-values into gamma(x0) (c^{1/s} gamma(x0) when weighted)."""
    s = _order(s)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dirs = polarization_directions(field.n)
    extra = [np.asarray(d, dtype=float) / np.linalg.norm(d) for d in (directions or [])]
    all_dirs = dirs + extra

    def run(a):
        return probe_direction(field, grid, s, x0, a, schedule, mode, cutoff=cutoff, fit_model=fit_model,
                               resolution=resolution, fast=fast)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            series = list(pool.map(run, all_dirs))
    else:
        series = [run(a) for a in all_dirs]
    pc = paper_constants(s)
    q = {}
    for a, ser in zip(all_dirs, series):
        q[_key(a)] = quadratic_form_from_limit(ser.limit, s, mode, pc)
    rec = assemble_tensor(x0, q, mode="lstsq" if extra else "exact", series=series)
    rec.residuals.update({f"fit{_key(a)}": ser.fit[2] for a, ser in zip(all_dirs, series)})
    return rec


@dataclass
class GapReport:
    proxy: float
    gamma_gap: float
    ratio: float | None
    per_probe: list
    exact_equality: bool

    def as_dict(self) -> dict:
        return {"proxy": self.proxy, "gamma_gap": self.gamma_gap, "ratio": self.ratio,
                "exact_equality": self.exact_equality, "per_probe": self.per_probe}


def stability_gap(field1: ConductivityField, field2: ConductivityField, grid, s, probe_set, *,
                  cutoff=None, resolution: ResolutionSpec | None = None, fast: bool | None = None) -> GapReport:
    """Operator-gap proxy from Dirichlet probes versus the sampled gamma gap.

    probe_set: iterable of (x0, alpha, N).  Per probe the proxy is
    |p1 - p2| / (N^{2s} ||phi_N||^2); since ||phi_N||^2 = c_bar^2 N^{-n/2},
    this is the scaled pairing gap N^{-2s+n/2} |p1 - p2| divided by c_bar^2,
    an O(1) quantity as N grows.  The gamma gap is the largest entry of |gamma1 - gamma2| at the probe points.
    """
    s = _order(s)
    if field1.n != field2.n:
        raise ValueError("fields have different dimensions")
    n = field1.n
    eta = cutoff or make_cutoff("radial_bump", 0.1, n)
    per = []
    proxy = 0.0
    gap = 0.0
    both_const = field1.constant and field2.constant
    for x0, alpha, N in probe_set:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        alpha = np.asarray(alpha, dtype=float) / np.linalg.norm(alpha)
        use_fast = both_const if fast is None else fast
        g = _grid_for(field1, float(N), s, x0, grid, resolution, use_fast)
        data = dirichlet_data(ProbeSpec(x0, alpha, float(N), "dirichlet", 0, eta), g.tangential, s)
        p1 = dtn_pairing(field1, g, s, data, fast=use_fast and field1.constant)
        p2 = dtn_pairing(field2, g, s, data, fast=use_fast and field2.constant)
        norm2 = data.l2_norm_sq
        val = float(N) ** (-2 * s) * abs(p1 - p2) / norm2
        dg = float(np.abs(field1.gamma_at(x0[None])[0] - field2.gamma_at(x0[None])[0]).max())
        per.append({"x0": [float(v) for v in x0], "alpha": [float(v) for v in alpha], "N": float(N),
                    "pairing1": p1, "pairing2": p2, "proxy": val, "gamma_gap": dg})
        proxy = max(proxy, val)
        gap = max(gap, dg)
    exact = proxy == 0.0 and gap == 0.0
    ratio = None if proxy == 0.0 else gap / proxy
    return GapReport(proxy, gap, ratio, per, exact)

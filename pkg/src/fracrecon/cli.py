"""Batch driver: ``fracrecon CONFIG.json [--task X] [--out DIR] [--threads K]``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field as dc_field, fields
from pathlib import Path

import numpy as np

TASKS = ("constants", "validate", "solve", "probe", "reconstruct", "stability")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATION = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

@dataclass
class GridConfig:
    box_factor: float = 3.0
    spectral_width: float = 24.0
    grading: str = "geometric"
    ratio: float = 1.1
    near_field: float = 1e-5
    beta: float = 2.0
    normal_nodes: int = 96
    depth_factor: float = 16.0
    lateral: str = "periodic"
    memory_cap: float = 2.0e9


@dataclass
class ProbeConfig:
    x0: list = dc_field(default_factory=lambda: [0.0, 0.0])
    alphas: list | None = None
    mode: str = "dtn"
    cutoff: str | None = None
    epsilon: float = 0.1
    fit_model: str = "inverse"
    fast: bool | None = None
    N: float | None = None


@dataclass
class OutputConfig:
    dir: str = "out"
    prefix: str = "run"
    csv: bool = True
    json: bool = True
    svg: bool = True
    snapshot: bool = True


@dataclass
class RunConfig:
    task: str
    s: float = 0.5
    n: int = 2
    field: dict | None = None
    field2: dict | None = None
    deltas: list | None = None
    grid: GridConfig = dc_field(default_factory=GridConfig)
    probe: ProbeConfig = dc_field(default_factory=ProbeConfig)
    schedule: list | None = None
    output: OutputConfig = dc_field(default_factory=OutputConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"grid": GridConfig, "probe": ProbeConfig, "output": OutputConfig}


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    idx = text.find(f'"{key}"')
    if idx < 0:
        return ""
    return f" (line {text.count(chr(10), 0, idx) + 1})"


def _typed(value, typ, where, text):
    if value is None:
        return None
    ok = {
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "bool": lambda v: isinstance(v, bool),
        "list": lambda v: isinstance(v, list),
        "dict": lambda v: isinstance(v, dict),
    }
    base = typ.replace(" | None", "")
    if base in ok and not ok[base](value):
        raise ConfigError(f"field '{where}' must be of type {base}{_line_of(text, where.split('.')[-1])}")
    return float(value) if base == "float" else value


def _build(cls, data: dict, prefix: str, text):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{prefix.rstrip('.')}' must be an object{_line_of(text, prefix.rstrip('.'))}")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{prefix}{key}'{_line_of(text, key)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        val = data[name]
        if name in _SECTIONS and cls is RunConfig:
            kwargs[name] = _build(_SECTIONS[name], val, f"{name}.", text)
        else:
            kwargs[name] = _typed(val, str(f.type), f"{prefix}{name}", text)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def parse_config(data: dict, text: str | None = None) -> RunConfig:
    """Strict parse: unknown keys and wrong types raise ConfigError."""
    if not isinstance(data, dict) or "task" not in data:
        raise ConfigError("config must be an object with a 'task' key")
    cfg = _build(RunConfig, data, "", text)
    validate_config(cfg, text)
    return cfg


def validate_config(cfg: RunConfig, text: str | None = None) -> None:
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task '{cfg.task}'; choose from {', '.join(TASKS)}{_line_of(text, 'task')}")
    if not (0.0 < cfg.s < 1.0):
        raise ConfigError(f"s must lie in (0, 1), got {cfg.s}{_line_of(text, 's')}")
    if cfg.n < 1:
        raise ConfigError(f"n must be positive{_line_of(text, 'n')}")
    if cfg.probe.mode not in ("dtn", "ntd"):
        raise ConfigError(f"probe.mode must be 'dtn' or 'ntd'{_line_of(text, 'mode')}")
    if cfg.probe.cutoff not in (None, "mollified_box", "radial_bump"):
        raise ConfigError(f"probe.cutoff must be 'mollified_box' or 'radial_bump'{_line_of(text, 'cutoff')}")
    if len(cfg.probe.x0) != cfg.n:
        raise ConfigError(f"probe.x0 must have n={cfg.n} entries{_line_of(text, 'x0')}")
    if cfg.probe.alphas is not None:
        for a in cfg.probe.alphas:
            if not isinstance(a, list) or len(a) != cfg.n or not any(a):
                raise ConfigError(f"probe.alphas entries must be nonzero vectors of length n{_line_of(text, 'alphas')}")
    from .reconstruct import FIT_MODELS
    if cfg.probe.fit_model not in FIT_MODELS:
        raise ConfigError(f"probe.fit_model must be one of {sorted(FIT_MODELS)}{_line_of(text, 'fit_model')}")
    if cfg.schedule is not None:
        sch = cfg.schedule
        if any(not isinstance(v, (int, float)) or v <= 0 for v in sch) or any(b <= a for a, b in zip(sch, sch[1:])):
            raise ConfigError(f"schedule must be strictly increasing positive numbers{_line_of(text, 'schedule')}")
    try:
        from .extsolver import ResolutionSpec
        ResolutionSpec(**asdict(cfg.grid))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}{_line_of(text, 'grid')}") from None
    needs_field = cfg.task in ("solve", "probe", "reconstruct", "stability")
    if needs_field and cfg.field is None:
        raise ConfigError(f"task '{cfg.task}' needs a 'field' section")
    for key in ("field", "field2"):
        spec = getattr(cfg, key)
        if spec is not None:
            try:
                from .extsolver import field_from_spec
                fld = field_from_spec(spec)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{key}: {exc}{_line_of(text, key)}") from None
            if fld.n != cfg.n:
                raise ConfigError(f"{key} has dimension {fld.n}, config n = {cfg.n}{_line_of(text, key)}")
    if cfg.task == "stability" and cfg.field2 is None and not cfg.deltas:
        raise ConfigError("task 'stability' needs 'field2' or 'deltas'")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(data, text)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"


# --------------------------------------------------------------------------
# deterministic emitters
# --------------------------------------------------------------------------

def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return None
        return float(f"{v:.12g}")
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    return _num(obj)


def format_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def format_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def format_svg(series: list, targets: dict | None = None, title: str = "") -> str:
    """Scaled pairing against N^{-1/2}; fitted curve and intercept per series.

    ``series`` items: dict(label, schedule, scaled, limit, slope, fit_model).
    ``targets``: label -> target constant drawn as a dashed line.
    """
    W, H, L, R, T, B = 640, 420, 80, 20, 40, 60
    xs, ys = [0.0], []
    for ser in series:
        xs += [v ** -0.5 for v in ser["schedule"]]
        ys += list(ser["scaled"]) + [ser["limit"]]
    for v in (targets or {}).values():
        ys.append(v)
    xmax = max(xs) * 1.05 if len(xs) > 1 else 1.0
    if ys:
        lo, hi = min(ys), max(ys)
        pad = 0.08 * (hi - lo) if hi > lo else 0.05 * max(abs(hi), 1.0)
        ymin, ymax = lo - pad, hi + pad
    else:
        ymin, ymax = 0.0, 1.0

    def px(x):
        return L + (W - L - R) * x / xmax

    def py(y):
        return H - B - (H - T - B) * (y - ymin) / (ymax - ymin)

    f = lambda v: f"{v:.3f}"
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" data-xmax="{xmax:.12g}" data-ymin="{ymin:.12g}" data-ymax="{ymax:.12g}">',
        f'<title>{_esc(title)}</title>',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line class="axis" id="x-axis" x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line class="axis" id="y-axis" x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
        f'<text x="{(L + W - R) // 2}" y="{H - 15}" text-anchor="middle" font-size="14">N^(-1/2)</text>',
        f'<text x="20" y="{(T + H - B) // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {(T + H - B) // 2})">scaled pairing</text>',
    ]
    for i in range(6):
        xv = xmax * i / 5
        yv = ymin + (ymax - ymin) * i / 5
        out.append(f'<text class="xtick" x="{f(px(xv))}" y="{H - B + 18}" text-anchor="middle" '
                   f'font-size="11">{xv:.3g}</text>')
        out.append(f'<text class="ytick" x="{L - 6}" y="{f(py(yv) + 4)}" text-anchor="end" '
                   f'font-size="11">{yv:.4g}</text>')
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    for k, ser in enumerate(series):
        col = palette[k % len(palette)]
        label = _esc(ser["label"])
        from .reconstruct import FIT_MODELS
        basis = FIT_MODELS[ser.get("fit_model", "inverse")]
        pts = []
        for j in range(101):
            x = xmax * j / 100
            if x == 0:
                y = ser["limit"]
            else:
                N = x ** -2
                y = ser["limit"] + sum(b * g for b, g in zip(ser["slope"], basis(N)))
            pts.append(f"{f(px(x))},{f(py(min(max(y, ymin), ymax)))}")
        out.append(f'<polyline class="fit" data-series="{label}" points="{" ".join(pts)}" '
                   f'fill="none" stroke="{col}"/>')
        for N, v in zip(ser["schedule"], ser["scaled"]):
            out.append(f'<circle class="data" data-series="{label}" data-x="{N ** -0.5:.12g}" '
                       f'data-y="{v:.12g}" cx="{f(px(N ** -0.5))}" cy="{f(py(v))}" r="4" fill="{col}"/>')
        out.append(f'<circle class="intercept" data-series="{label}" data-x="0" data-y="{ser["limit"]:.12g}" '
                   f'cx="{f(px(0.0))}" cy="{f(py(ser["limit"]))}" r="6" fill="none" stroke="{col}"/>')
        out.append(f'<text x="{W - R - 4}" y="{T + 14 * (k + 1)}" text-anchor="end" font-size="11" '
                   f'fill="{col}">{label}</text>')
    for label, v in sorted((targets or {}).items()):
        out.append(f'<line class="target" data-series="{_esc(label)}" data-y="{v:.12g}" x1="{L}" '
                   f'y1="{f(py(v))}" x2="{W - R}" y2="{f(py(v))}" stroke="gray" stroke-dasharray="6,4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def emit_report(results: dict, outdir, prefix: str, formats=("csv", "json", "svg")) -> list:
    """Write <prefix>.json, <prefix>.csv, <prefix>.svg from a results dict with
    keys 'report', 'table' (header, rows) and optionally 'plot'."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = outdir / f"{prefix}.json"
        p.write_text(format_json(results.get("report", {})), encoding="utf-8")
        written.append(p)
    if "csv" in formats and "table" in results:
        header, rows = results["table"]
        p = outdir / f"{prefix}.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(format_csv(header, rows))
        written.append(p)
    if "svg" in formats and "plot" in results:
        p = outdir / f"{prefix}.svg"
        plot = results["plot"]
        p.write_text(format_svg(plot["series"], plot.get("targets"), plot.get("title", "")), encoding="utf-8")
        written.append(p)
    return written


# --------------------------------------------------------------------------
# tasks
# --------------------------------------------------------------------------

def _resolution(cfg):
    from .extsolver import ResolutionSpec
    return ResolutionSpec(**asdict(cfg.grid))


def _cutoff(cfg, mode):
    from .ansatz import make_cutoff
    kind = cfg.probe.cutoff or ("mollified_box" if mode == "ntd" else "radial_bump")
    return make_cutoff(kind, cfg.probe.epsilon, cfg.n)


def _alphas(cfg):
    from .reconstruct import polarization_directions
    if cfg.probe.alphas is None:
        return polarization_directions(cfg.n)
    return [np.asarray(a, dtype=float) / np.linalg.norm(a) for a in cfg.probe.alphas]


def task_constants(cfg, threads):
    from .specfun import paper_constants
    pc = paper_constants(cfg.s)
    closed = math.pi / (2 * math.sin(math.pi * cfg.s))
    header = ["s", "c_s", "c_hat_s", "c_bar_s", "c1", "c2", "c1_plus_c2", "closed_form_sum"]
    row = [pc.s, pc.c_s, pc.c_hat_s, pc.c_bar_s, pc.c1, pc.c2, pc.c_sum, closed]
    report = dict(zip(header, row))
    report["quad_error"] = pc.quad_error
    return {"report": {"task": "constants", "constants": report}, "table": (header, [row])}, EXIT_OK


def task_validate(cfg, threads):
    from .ansatz import BoundaryData
    from .extsolver import ConductivityField, build_domain, fourier_reference, solve_dirichlet
    from .specfun import check_bessel_identities
    grid_t = np.geomspace(1e-6, 40.0, 400)
    rows = []
    ok = True
    for s in [0.1 * k for k in range(1, 10)]:
        rep = check_bessel_identities(s, grid_t)
        dev = rep.max_deviation
        passed = dev <= 1e-8
        ok &= passed
        rows.append(["bessel_identities", f"s={s:.1f}", dev, 1e-8, "PASS" if passed else "FAIL"])
    fld = ConductivityField.constant_field(np.eye(cfg.n))
    res = _resolution(cfg)
    grid = build_domain(fld, 16.0, res, s=cfg.s)
    tg = grid.tangential
    xi = np.zeros(cfg.n)
    xi[0] = 3 * math.pi / tg.half_width
    ref = fourier_reference(cfg.s, xi, np.eye(cfg.n))
    mode = np.exp(1j * (tg.coordinates() @ xi))
    sol = solve_dirichlet(fld, grid, cfg.s, BoundaryData.from_array(mode, tg, "dirichlet"))
    exact = ref.values(grid)
    l2 = float(np.linalg.norm(sol.values - exact) / np.linalg.norm(exact))
    e_ref = ref.energy_density * (2 * tg.half_width) ** cfg.n
    perr = abs(sol.energy / e_ref - 1)
    for name, v, tol in [("fourier_reference_solution_l2", l2, 1e-3), ("fourier_reference_pairing", perr, 1e-2)]:
        passed = v <= tol
        ok &= passed
        rows.append([name, f"s={cfg.s:g}", v, tol, "PASS" if passed else "FAIL"])
    header = ["check", "case", "value", "tolerance", "status"]
    report = {"task": "validate", "passed": ok,
              "checks": [dict(zip(header, r)) for r in rows], "grid": grid.describe()}
    return {"report": report, "table": (header, rows)}, (EXIT_OK if ok else EXIT_VALIDATION)


def _field(spec):
    from .extsolver import field_from_spec
    return field_from_spec(spec)


def task_solve(cfg, threads, outdir=None):
    from .ansatz import ProbeSpec, dirichlet_data, neumann_data
    from .extsolver import build_domain, solve_dirichlet, solve_neumann, write_snapshot
    from .reconstruct import ntd_schedule
    fld = _field(cfg.field)
    mode = cfg.probe.mode
    eta = _cutoff(cfg, mode)
    alpha = _alphas(cfg)[0]
    N = cfg.probe.N
    if N is None:
        N = (cfg.schedule or ([32.0, 64.0, 128.0] if mode == "dtn" else ntd_schedule(eta, alpha)))[-1]
    grid = build_domain(fld, N, _resolution(cfg), s=cfg.s, center=cfg.probe.x0)
    if mode == "dtn":
        data = dirichlet_data(ProbeSpec(cfg.probe.x0, alpha, N, "dirichlet", 0, eta), grid.tangential, cfg.s)
        sol = solve_dirichlet(fld, grid, cfg.s, data)
    else:
        data = neumann_data(ProbeSpec(cfg.probe.x0, alpha, N, "neumann", 0, eta), grid.tangential)
        sol = solve_neumann(fld, grid, cfg.s, data)
    report = {"task": "solve", "kind": sol.kind, "N": N, "alpha": alpha, "energy": sol.energy,
              "iterations": sol.iterations, "residual": sol.residual, "grid": grid.describe(),
              "field_hash": sol.field_hash}
    header = ["iteration", "residual"]
    rows = [[i + 1, r] for i, r in enumerate(sol.residual_history)]
    out = {"report": report, "table": (header, rows)}
    if cfg.output.snapshot and outdir is not None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        snap = Path(outdir) / f"{cfg.output.prefix}.snap"
        write_snapshot(snap, sol)
        report["snapshot"] = snap.name
    return out, EXIT_OK


def _series_rows(series):
    rows = []
    for ser in series:
        a = " ".join(f"{v:.12g}" for v in ser.alpha)
        for N, raw, sc in zip(ser.schedule, ser.raw, ser.scaled):
            rows.append([ser.mode, a, N, raw, sc, ser.limit, ser.fit[2]])
    return ["mode", "alpha", "N", "raw_pairing", "scaled_pairing", "fit_limit", "fit_residual"], rows


def _plot(series, fld, cfg, mode):
    from .reconstruct import target_limit
    items, targets = [], {}
    for ser in series:
        label = "alpha=(" + ",".join(f"{v:.3g}" for v in ser.alpha) + ")"
        items.append({"label": label, "schedule": ser.schedule, "scaled": ser.scaled, "limit": ser.limit,
                      "slope": ser.fit[1], "fit_model": ser.fit_model})
        if fld.constant:
            x0 = np.asarray(cfg.probe.x0, dtype=float)[None]
            c0 = float(fld.c_at(x0)[0])
            q = c0 ** (1 / cfg.s) * float(ser.alpha @ fld.gamma_at(x0)[0] @ ser.alpha)
            targets[label] = target_limit(cfg.s, mode, q)
    return {"series": items, "targets": targets, "title": f"{mode} scaled pairings, s={cfg.s:g}"}


def _provenance(cfg, fld):
    from .specfun import paper_constants
    pc = paper_constants(cfg.s)
    return {"field_hash": fld.digest(), "grid_spec": asdict(cfg.grid),
            "constants": {"c_s": pc.c_s, "c_hat_s": pc.c_hat_s, "c_bar_s": pc.c_bar_s,
                          "c1": pc.c1, "c2": pc.c2, "c1_plus_c2": pc.c_sum},
            "s": cfg.s, "n": cfg.n, "seed": cfg.seed}


def task_probe(cfg, threads):
    from .reconstruct import probe_direction, quadratic_form_from_limit
    fld = _field(cfg.field)
    mode = cfg.probe.mode
    eta = _cutoff(cfg, mode)
    series = []
    for a in _alphas(cfg):
        series.append(probe_direction(fld, _resolution(cfg), cfg.s, cfg.probe.x0, a, cfg.schedule, mode,
                                      cutoff=eta, fit_model=cfg.probe.fit_model, fast=cfg.probe.fast))
    report = {"task": "probe", "series": [s.as_dict() for s in series], "provenance": _provenance(cfg, fld)}
    report["q_values"] = [quadratic_form_from_limit(s.limit, cfg.s, mode) if s.limit > 0 else None
                          for s in series]
    return {"report": report, "table": _series_rows(series), "plot": _plot(series, fld, cfg, mode)}, EXIT_OK


def task_reconstruct(cfg, threads):
    from .reconstruct import reconstruct_tensor
    fld = _field(cfg.field)
    mode = cfg.probe.mode
    eta = _cutoff(cfg, mode)
    extra = None
    if cfg.probe.alphas is not None:
        from .reconstruct import polarization_directions
        base = polarization_directions(cfg.n)
        extra = [a for a in _alphas(cfg) if not any(np.allclose(a, b) for b in base)]
    rec = reconstruct_tensor(fld, cfg.s, cfg.probe.x0, mode=mode, schedule=cfg.schedule, grid=_resolution(cfg),
                             cutoff=eta, fit_model=cfg.probe.fit_model, fast=cfg.probe.fast,
                             directions=extra, threads=threads)
    x0 = np.asarray(cfg.probe.x0, dtype=float)[None]
    truth = fld.c_at(x0)[0] ** (1 / cfg.s) * fld.gamma_at(x0)[0]
    report = {"task": "reconstruct", "result": rec.as_dict(), "matrix": rec.matrix,
              "true_matrix": truth, "max_abs_error": float(np.abs(rec.matrix - truth).max()),
              "provenance": _provenance(cfg, fld)}
    return {"report": report, "table": _series_rows(rec.series), "plot": _plot(rec.series, fld, cfg, mode)}, EXIT_OK


def task_stability(cfg, threads):
    from .extsolver import field_from_spec
    from .reconstruct import stability_gap
    fld = _field(cfg.field)
    eta = _cutoff(cfg, "dtn")
    sched = cfg.schedule or [32.0, 64.0, 128.0]
    probes = [(cfg.probe.x0, a, N) for a in _alphas(cfg) for N in sched]
    cases = []
    if cfg.field2 is not None:
        cases.append(("field2", _field(cfg.field2)))
    for d in cfg.deltas or []:
        cases.append((f"delta={d:g}", _scaled_field(cfg.field, 1.0 + d)))
    header = ["case", "proxy", "gamma_gap", "ratio"]
    rows, reps = [], []
    for name, f2 in cases:
        rep = stability_gap(fld, f2, _resolution(cfg), cfg.s, probes, cutoff=eta, fast=cfg.probe.fast)
        rows.append([name, rep.proxy, rep.gamma_gap, "" if rep.ratio is None else rep.ratio])
        reps.append(dict(rep.as_dict(), case=name))
    ratios = [r["ratio"] for r in reps if r["ratio"] is not None]
    spread = (max(ratios) / min(ratios) - 1.0) if len(ratios) > 1 else 0.0
    report = {"task": "stability", "cases": reps, "ratio_spread": spread, "provenance": _provenance(cfg, fld)}
    return {"report": report, "table": (header, rows)}, EXIT_OK


def _scaled_field(spec: dict, factor: float):
    """gamma -> factor * gamma for constant and bump families."""
    from .extsolver import field_from_spec
    spec = json.loads(json.dumps(spec))
    fam = spec.get("family")
    if fam == "constant":
        spec["gamma"] = (factor * np.asarray(spec["gamma"], dtype=float)).tolist()
    elif fam == "bump":
        spec["base"] = (factor * np.asarray(spec["base"], dtype=float)).tolist()
        spec["amplitude"] = factor * float(spec.get("amplitude", 0.0))
    else:
        raise ConfigError(f"'deltas' scaling is not defined for family {fam!r}")
    return field_from_spec(spec)


_RUNNERS = {"constants": task_constants, "validate": task_validate, "probe": task_probe,
            "reconstruct": task_reconstruct, "stability": task_stability}


def run(cfg: RunConfig, outdir=None, threads: int = 1) -> int:
    """Run one task and write its artifacts; returns the exit status."""
    from . import extsolver
    extsolver.set_threads(threads)
    outdir = Path(outdir or cfg.output.dir)
    if cfg.task == "solve":
        results, status = task_solve(cfg, threads, outdir)
    else:
        results, status = _RUNNERS[cfg.task](cfg, threads)
    formats = [k for k in ("csv", "json", "svg") if getattr(cfg.output, k)]
    emit_report(results, outdir, cfg.output.prefix, formats)
    return status


def _module_tag(exc: BaseException) -> str:
    tb = exc.__traceback__
    mod = type(exc).__module__.split(".")[-1]
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("fracrecon."):
            mod = name.split(".")[-1]
        tb = tb.tb_next
    return mod


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fracrecon", description=__doc__.splitlines()[0])
    parser.add_argument("config", help="JSON run configuration")
    parser.add_argument("--task", choices=TASKS, help="override the task in the config")
    parser.add_argument("--out", help="output directory (overrides output.dir)")
    parser.add_argument("--threads", type=int, help="worker threads (else FRACRECON_THREADS, else 1)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.task:
            cfg.task = args.task
            validate_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads
    if threads is None:
        env = os.environ.get("FRACRECON_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError:
            print(f"config error: FRACRECON_THREADS={env!r} is not an integer", file=sys.stderr)
            return EXIT_CONFIG
    if threads < 1:
        print("config error: thread count must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(cfg, args.out, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cli: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"{_module_tag(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

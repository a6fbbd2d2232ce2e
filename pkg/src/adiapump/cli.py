"""Batch experiment runner.

``adiapump run <config.json> [--out DIR] [--jobs N] [--seed-family NAME]``

A config is one JSON document::

    {"schema_version": 1, "experiment": "residual_sweep",
     "family": {"name": "special_case", "params": {...}},
     "selection": {"e_ref": 0.0, "k": 2},
     "alpha_values": [0.0, 0.5], "epsilon_values": [0.125, 0.0625, ...],
     "t_grid_size": 513, "output_dir": "out", "tolerances": {...}}

Each run writes ``<experiment>.csv`` (first line documents the columns) and
``<experiment>.json`` (rows, checks with their tolerances, and the resolved
config).  The exit code is 0 iff no check has status ``fail``; 1 when a check
fails, 2 for a bad config or file, 3 when the computation itself raises.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evolve, examplefam, holonomy, model, spectral
from .errors import AdiapumpError, ConfigError, SelfIntersectionError, ShapeError
from .numerics import fit_slope, maxabs

SCHEMA_VERSION = 1
EXPERIMENTS = ("residual_sweep", "charge_table", "holonomy_compare", "omega_check",
               "invariant_suite")

DEFAULT_TOLERANCES = {
    "slope_first": [1.0, 0.15],
    "slope_second": [2.0, 0.2],
    "slope_closeness": [1.0, 0.2],
    "slope_charge": [1.0, 0.2],
    "slope_spread": 0.2,
    "min_r_squared": 0.98,
    "pass_r_squared": 0.99,
    "noise_floor": 1e-9,
    "residual_over_eps_ratio": 10.0,
    "case_agreement": 1e-6,
    "bracket": 1e-5,
    "holonomy": 1e-6,
    "berry": 1e-6,
    "omega": 1e-6,
    "octant_cut": 1e-4,
    "algebra": 1e-7,
    "zero_order": 1e-7,
    "intertwining": 1e-6,
    "unitarity": 1e-10,
    "commutator": 1e-6,
    "hermiticity": 1e-12,
    "tol_prop": 1e-7,
}


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    experiment: str
    family: dict
    alpha_values: list = field(default_factory=lambda: [0.5])
    epsilon_values: list = field(default_factory=list)
    t_grid_size: int = 513
    output_dir: str = "out"
    tolerances: dict = field(default_factory=dict)
    selection: dict = None
    case: str = None
    frame: str = "projected"
    cross_check: bool = False
    compare_cases: bool = False
    loops: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if not isinstance(self.family, dict) or "name" not in self.family:
            raise ConfigError("family must be an object with a 'name'")
        eps = [float(e) for e in self.epsilon_values]
        if any(not 0.0 < e <= 1.0 for e in eps):
            raise ConfigError("epsilon_values must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("epsilon_values must be strictly decreasing")
        self.epsilon_values = eps
        self.alpha_values = [float(a) for a in self.alpha_values]
        if any(not 0.0 <= a <= 1.0 for a in self.alpha_values):
            raise ConfigError("alpha_values must lie in [0, 1]")
        if self.t_grid_size < 5 or (self.t_grid_size - 1) % 2:
            raise ConfigError("t_grid_size must be odd and at least 5")
        unknown = set(self.tolerances) - set(DEFAULT_TOLERANCES)
        if unknown:
            raise ConfigError(f"unknown tolerance keys {sorted(unknown)}")
        if self.experiment == "residual_sweep" and len(eps) < 4:
            raise ConfigError("residual_sweep needs at least 4 epsilon values")
        if self.experiment == "charge_table" and not eps:
            raise ConfigError("charge_table needs epsilon values")

    @property
    def tol(self):
        out = dict(DEFAULT_TOLERANCES)
        out.update(self.tolerances)
        return out

    @property
    def t_grid(self):
        return np.linspace(0.0, 1.0, self.t_grid_size)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "experiment" not in data or "family" not in data:
            raise ConfigError("config needs 'experiment' and 'family'")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# family registry


@dataclass
class FamilyBundle:
    family: model.HamiltonianFamily
    selection: model.SpectralSelection
    special: object = None


def _matrix(spec, default):
    if spec is None:
        return np.asarray(default, dtype=complex)
    a = np.asarray(spec, dtype=float)
    if a.ndim == 3:          # [..., 2] re/im pairs
        return a[..., 0] + 1j * a[..., 1]
    return a.astype(complex)


def make_loop(spec) -> examplefam.LoopSpec:
    kind = spec.get("kind")
    p = {k: v for k, v in spec.items() if k not in ("kind", "name")}
    name = spec.get("name")
    if kind == "latitude":
        return examplefam.latitude_loop(p["theta_c"], p.get("axis", "r1"),
                                        p.get("radius", 1.0), p.get("orientation", 1), name)
    if kind == "fourier":
        return examplefam.fourier_loop(p["coeffs"], name or "fourier")
    if kind == "polygon":
        return examplefam.great_circle_polygon(p["vertices"], p.get("radius", 1.0),
                                               name or "polygon")
    if kind == "octant":
        return examplefam.octant_polygon(p.get("radius", 1.0))
    if kind == "octant_cut":
        return examplefam.octant_polygon_cut(p.get("cut", 1e-2), p.get("radius", 1.0))
    raise ConfigError(f"unknown loop kind {kind!r}")


def _random(p):
    f = model.random_family(**p)
    return FamilyBundle(f, model.SpectralSelection(0.0, p.get("rank", 1)))


def _two_level(p):
    f = model.two_level_family(**p)
    return FamilyBundle(f, model.SpectralSelection(-p.get("radius", 1.0), 1))


def _special_case(p):
    p = dict(p)
    loop = make_loop(p.pop("loop", {"kind": "latitude", "theta_c": math.pi / 4}))
    sp = examplefam.SpecialCaseParams(loop, **p)
    return FamilyBundle(sp.family(), model.SpectralSelection(0.0, 2), sp)


def _z0_variation(p):
    p = dict(p)
    f, df, ddf = examplefam.circle_2d(p.pop("center", (0.8, 0.3)), p.pop("radius", 0.4),
                                      p.pop("turns", 1))
    zp = examplefam.Z0VariationParams(f, df, ddt_loop=ddf, **p)
    return FamilyBundle(zp.family(), model.SpectralSelection(0.0, 2), zp)


def _constant(p):
    m = _matrix(p.get("matrix"), np.diag([-1.0, 0.0, 1.5]))
    return FamilyBundle(model.constant_family(m), model.SpectralSelection(0.0, 1))


def _linear_alpha(p):
    m = _matrix(p.get("matrix"), np.diag([-1.0, 0.0, 1.5]))
    return FamilyBundle(model.linear_alpha_family(m), model.SpectralSelection(0.0, 1))


def _tabulated(p):
    if "path" not in p:
        raise ConfigError("tabulated family needs a 'path'")
    return FamilyBundle(model.load_tabulated(p["path"]),
                        model.SpectralSelection(p.get("e_ref", 0.0), p.get("k", 1)))


FAMILIES = {
    "random": _random,
    "two_level": _two_level,
    "special_case": _special_case,
    "z0_variation": _z0_variation,
    "constant": _constant,
    "linear_alpha": _linear_alpha,
    "tabulated": _tabulated,
}


def build_family(spec, selection=None) -> FamilyBundle:
    name = spec["name"]
    if name not in FAMILIES:
        raise ConfigError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}")
    try:
        bundle = FAMILIES[name](dict(spec.get("params", {})))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for family {name!r}: {exc}") from exc
    if selection:
        bundle.selection = model.SpectralSelection(**selection)
    return bundle


_BUNDLES = {}


def _bundle(cfg_dict):
    key = json.dumps([cfg_dict["family"], cfg_dict.get("selection")], sort_keys=True)
    if key not in _BUNDLES:
        _BUNDLES[key] = build_family(cfg_dict["family"], cfg_dict.get("selection"))
    return _BUNDLES[key]


# ---------------------------------------------------------------------------
# checks and output


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, complex):
        return {"re": _clean(x.real), "im": _clean(x.imag)}
    return x


def _cplx(m):
    m = np.asarray(m, dtype=complex)
    return {"re": m.real.tolist(), "im": m.imag.tolist()}


def check(name, value, tolerance, status=None, **context):
    """A named comparison ``value <= tolerance`` (or an explicit status)."""
    if status is None:
        status = "pass" if value is not None and math.isfinite(value) and value <= tolerance \
            else "fail"
    return {"name": name, "value": value, "tolerance": tolerance, "status": status, **context}


def slope_check(name, fit, target, tol, pass_r2):
    status = "inconclusive" if fit.inconclusive else (
        "pass" if abs(fit.slope - target) <= tol and fit.r_squared >= pass_r2 else "fail")
    return {"name": name, "value": fit.slope, "tolerance": tol, "target": target,
            "r_squared": fit.r_squared, "pass_r_squared": pass_r2, "status": status,
            "fit": fit.to_dict()}


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_outputs(out_dir, experiment, columns, rows, report):
    os.makedirs(out_dir, exist_ok=True)
    buf = io.StringIO()
    buf.write("# columns: " + "; ".join(f"{c}: {d}" for c, d in columns) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([c for c, _ in columns])
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c, _ in columns])
    csv_path = os.path.join(out_dir, f"{experiment}.csv")
    json_path = os.path.join(out_dir, f"{experiment}.json")
    with open(csv_path, "w", newline="") as fh:
        fh.write(buf.getvalue())
    with open(json_path, "w") as fh:
        json.dump(_clean(report), fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")
    return csv_path, json_path


def _map(fn, tasks, jobs):
    """Ordered map; fans out to processes when ``jobs > 1``."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*tasks)))


# ---------------------------------------------------------------------------
# residual sweep


def _residual_task(cfg_dict, alpha, epsilon):
    b = _bundle(cfg_dict)
    t = np.linspace(0.0, 1.0, cfg_dict["t_grid_size"])
    tol = dict(DEFAULT_TOLERANCES, **cfg_dict["tolerances"])
    try:
        out = evolve.residual_point(b.family, alpha, epsilon, b.selection, t,
                                    tol_prop=tol["tol_prop"])
        out["error"] = ""
    except AdiapumpError as exc:
        out = {"error": f"{type(exc).__name__}: {exc}"}
    out.update(alpha=alpha, epsilon=epsilon)
    return out


def run_residual_sweep(cfg: ExperimentConfig, jobs=1):
    tol = cfg.tol
    d = cfg.to_dict()
    tasks = [(d, a, e) for a in cfg.alpha_values for e in cfg.epsilon_values]
    rows = sorted(_map(_residual_task, tasks, jobs), key=lambda r: (r["alpha"], -r["epsilon"]))
    checks, fits = [], {}
    failed = [r for r in rows if r["error"]]
    for r in failed:
        checks.append(check(f"propagation(alpha={r['alpha']!r}, eps={r['epsilon']!r})",
                            None, None, "fail", error=r["error"]))
    good = [r for r in rows if not r["error"]]
    keys = (("first_order", "slope_first"), ("second_order", "slope_second"),
            ("closeness", "slope_closeness"))
    slopes = []
    for a in cfg.alpha_values:
        sub = [r for r in good if r["alpha"] == a]
        if len(sub) < 4:
            continue
        eps = [r["epsilon"] for r in sub]
        fits[repr(a)] = {}
        for key, tname in keys:
            fit = fit_slope(eps, [r[key] for r in sub], tol["min_r_squared"], tol["noise_floor"])
            fits[repr(a)][key] = fit.to_dict()
            target, width = tol[tname]
            checks.append(slope_check(f"{key}_slope(alpha={a!r})", fit, target, width,
                                      tol["pass_r_squared"]))
            if key == "first_order":
                slopes.append(fit)
        for r in sub:
            checks.append(check(f"unitarity(alpha={a!r}, eps={r['epsilon']!r})",
                                r["unitarity"], tol["unitarity"]))
            checks.append(check(f"intertwining(alpha={a!r}, eps={r['epsilon']!r})",
                                r["intertwining"], tol["intertwining"]))
    if len(slopes) >= 2:
        if any(f.inconclusive for f in slopes):
            checks.append(check("first_order_slope_spread", None, tol["slope_spread"],
                                "inconclusive"))
        else:
            s = [f.slope for f in slopes]
            checks.append(check("first_order_slope_spread", max(s) - min(s),
                                tol["slope_spread"]))
    columns = [("alpha", "parameter"), ("epsilon", "adiabatic parameter"),
               ("first_order", "max_t ||U - W Phi||_2"),
               ("second_order", "max_t ||U - W1 Phi1||_2"),
               ("closeness", "max_t ||W1 Phi1 - W Phi||_2"),
               ("unitarity", "max unitarity residual of U, W, Phi"),
               ("intertwining", "max |W P(0) - P W|"),
               ("commutator", "max |[Phi, P(0)]|"),
               ("propagation_change", "max trajectory change under substep doubling"),
               ("substeps_exact", "substeps per output interval for U"),
               ("error", "upstream error (empty if none)")]
    return columns, rows, checks, {"fits": fits}


# ---------------------------------------------------------------------------
# charge table


def _default_case(bundle):
    if not bundle.family.periodic_t:
        return "leading_order"
    return "simple" if bundle.selection.k == 1 else "degenerate_framed"


def _charge_task(cfg_dict, alpha, epsilon):
    b = _bundle(cfg_dict)
    t = np.linspace(0.0, 1.0, cfg_dict["t_grid_size"])
    tol = dict(DEFAULT_TOLERANCES, **cfg_dict["tolerances"])
    case = cfg_dict.get("case") or _default_case(b)
    out = {"alpha": alpha, "epsilon": epsilon, "case": case, "error": ""}
    try:
        U = evolve.propagate_exact(b.family, alpha, epsilon, t, tol["tol_prop"], charge=True)
        exact = evolve.charge_time_quadrature(b.family, alpha, epsilon, trajectory=U)
        frame = None
        if cfg_dict.get("frame") == "closed_form":
            if b.special is None:
                raise ConfigError("closed-form frames exist only for the special-case families")
            frame = b.special.frame
        if case == "leading_order":
            rep = holonomy.charge_leading_order(b.family, alpha, epsilon, b.selection, t,
                                                exact=exact)
        else:
            rep = holonomy.charge_matrix_elements_periodic(
                b.family, alpha, epsilon, case, b.selection, t, frame=frame, exact=exact)
        out["report"] = rep.to_dict()
        out["exact_quadrature_error"] = exact.quadrature_error_estimate
        if cfg_dict.get("compare_cases") and case.startswith("degenerate"):
            other = "degenerate_parallel" if case == "degenerate_framed" else "degenerate_framed"
            rep2 = holonomy.charge_matrix_elements_periodic(
                b.family, alpha, epsilon, other, b.selection, t, frame=frame, exact=exact)
            out["case_difference"] = maxabs(rep.geometric_term - rep2.geometric_term)
        if (frame is not None and isinstance(b.special, examplefam.SpecialCaseParams)
                and case.startswith("degenerate")):
            out["bracket_difference"] = maxabs(
                rep.geometric_term - b.special.charge_bracket_closed_form(alpha))
        if cfg_dict.get("cross_check"):
            q2 = evolve.charge_alpha_derivative(b.family, alpha, epsilon, t_grid=t,
                                                center=U)
            out["cross_difference"] = maxabs(q2.matrix - exact.matrix)
            out["tol_cross"] = q2.flags["tol_cross"]
            out["richardson_ok"] = q2.flags.get("richardson_ok")
    except AdiapumpError as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def run_charge_table(cfg: ExperimentConfig, jobs=1):
    tol = cfg.tol
    d = cfg.to_dict()
    tasks = [(d, a, e) for a in cfg.alpha_values for e in cfg.epsilon_values]
    results = sorted(_map(_charge_task, tasks, jobs), key=lambda r: (r["alpha"], -r["epsilon"]))
    rows, checks = [], []
    for res in results:
        a, e = res["alpha"], res["epsilon"]
        tag = f"alpha={a!r}, eps={e!r}"
        if res["error"]:
            checks.append(check(f"charge({tag})", None, None, "fail", error=res["error"]))
            rows.append({"alpha": a, "epsilon": e, "case": res["case"], "error": res["error"]})
            continue
        rep = res["report"]
        ex = np.asarray(rep["exact"]["re"]) + 1j * np.asarray(rep["exact"]["im"])
        ge = np.asarray(rep["geometric_term"]["re"]) + 1j * np.asarray(rep["geometric_term"]["im"])
        for i in range(ex.shape[0]):
            for j in range(ex.shape[1]):
                diff = abs(ex[i, j] - rep["dynamical_term"] * (i == j) - ge[i, j])
                rows.append({"alpha": a, "epsilon": e, "case": res["case"], "row": i, "col": j,
                             "exact_re": ex[i, j].real, "exact_im": ex[i, j].imag,
                             "dynamical": rep["dynamical_term"] if i == j else 0.0,
                             "geometric_re": ge[i, j].real, "geometric_im": ge[i, j].imag,
                             "residual": diff, "residual_over_eps": diff / e,
                             "error": ""})
        if "case_difference" in res:
            checks.append(check(f"case_agreement({tag})", res["case_difference"],
                                tol["case_agreement"]))
        if "bracket_difference" in res:
            checks.append(check(f"closed_form_bracket({tag})", res["bracket_difference"],
                                tol["bracket"]))
        if "cross_difference" in res:
            checks.append(check(f"cross_identity({tag})", res["cross_difference"],
                                res["tol_cross"], richardson_ok=res["richardson_ok"]))
    for a in cfg.alpha_values:
        sub = [r for r in results if r["alpha"] == a and not r["error"]]
        if len(sub) < 2:
            continue
        eps = np.array([r["epsilon"] for r in sub])
        resid = np.array([r["report"]["residual"] for r in sub])
        if len(sub) >= 4:
            fit = fit_slope(eps, resid, tol["min_r_squared"], tol["noise_floor"])
            target, width = tol["slope_charge"]
            checks.append(slope_check(f"charge_residual_slope(alpha={a!r})", fit, target,
                                      width, 0.0))
        if np.all(resid <= tol["noise_floor"]):
            checks.append(check(f"residual_over_eps_bounded(alpha={a!r})", None,
                                tol["residual_over_eps_ratio"], "inconclusive"))
        else:
            ratio = resid / eps
            spread = float(np.max(ratio) / max(np.min(ratio), np.finfo(float).tiny))
            checks.append(check(f"residual_over_eps_bounded(alpha={a!r})", spread,
                                tol["residual_over_eps_ratio"]))
    columns = [("alpha", "parameter"), ("epsilon", "adiabatic parameter"),
               ("case", "formula variant"), ("row", "matrix row in the P(0) basis"),
               ("col", "matrix column"), ("exact_re", "Re exact charge element"),
               ("exact_im", "Im exact charge element"),
               ("dynamical", "(1/eps) int dE/dalpha on the diagonal"),
               ("geometric_re", "Re geometric term"), ("geometric_im", "Im geometric term"),
               ("residual", "|exact - dynamical - geometric|"),
               ("residual_over_eps", "residual / eps"),
               ("error", "upstream error (empty if none)")]
    return columns, rows, checks, {"reports": results}


# ---------------------------------------------------------------------------
# holonomy comparison


def run_holonomy_compare(cfg: ExperimentConfig, jobs=1):
    tol = cfg.tol
    b = build_family(cfg.family, cfg.selection)
    t = cfg.t_grid
    rows, checks = [], []
    for a in cfg.alpha_values:
        try:
            if isinstance(b.special, examplefam.SpecialCaseParams):
                hm = holonomy.holonomy_B(b.special.frame(t, a), t)
                ref = b.special.holonomy_closed_form(a)
                diff, quantity = maxabs(hm.B - ref), "B(1) vs closed form"
                key = "holonomy"
            elif isinstance(b.special, examplefam.Z0VariationParams):
                hm = holonomy.holonomy_B(b.special.frame(t, a), t)
                ref = b.special.holonomy_closed_form()
                diff, quantity = maxabs(hm.B - ref), "B(1) vs diagonal form"
                key = "holonomy"
            elif b.selection.k == 1 and b.family.periodic_t:
                W = evolve.propagate_transport(b.family, a, t, selection=b.selection,
                                               tol_prop=tol["tol_prop"])
                bp = holonomy.berry_phase(b.family, a, W)
                hm, ref = np.array([[bp.beta]]), np.array([[bp.beta_quadrature]])
                diff, quantity, key = bp.agreement, "beta overlap vs quadrature", "berry"
            else:
                raise ConfigError("holonomy_compare needs a special-case family or a "
                                  "periodic family with a simple eigenvalue")
        except AdiapumpError as exc:
            checks.append(check(f"holonomy(alpha={a!r})", None, None, "fail",
                                error=f"{type(exc).__name__}: {exc}"))
            continue
        num = hm.B if hasattr(hm, "B") else hm
        rows.append({"alpha": a, "quantity": quantity, "difference": diff,
                     "tolerance": tol[key], "numeric": _cplx(num), "reference": _cplx(ref)})
        checks.append(check(f"{key}(alpha={a!r})", diff, tol[key]))
    columns = [("alpha", "parameter"), ("quantity", "compared objects"),
               ("difference", "max abs entrywise difference"),
               ("tolerance", "pass threshold")]
    return columns, rows, checks, {}


# ---------------------------------------------------------------------------
# solid angle


_ORACLES = {
    "latitude": lambda p: 2 * math.pi * (1 - math.cos(p["theta_c"])),
    "octant": lambda p: math.pi / 2,
}


def run_omega_check(cfg: ExperimentConfig, jobs=1):
    tol = cfg.tol
    specs = cfg.loops or [{"kind": "latitude", "theta_c": math.pi / 6},
                          {"kind": "latitude", "theta_c": math.pi / 4},
                          {"kind": "latitude", "theta_c": math.pi / 3},
                          {"kind": "octant"}]
    rows, checks = [], []
    for spec in specs:
        loop = make_loop(spec)
        line_loop = loop
        if spec["kind"] == "octant":
            # the octant corner sits on the singular line of the one-form
            line_loop = examplefam.octant_polygon_cut(tol["octant_cut"], spec.get("radius", 1.0))
        for direction, lp, ll in (("forward", loop, line_loop),
                                  ("reversed", loop.reversed(), line_loop.reversed())):
            row = {"loop": loop.name, "direction": direction, "tolerance": tol["omega"]}
            try:
                row["omega_solid"] = examplefam.omega_solid_angle(lp)
            except SelfIntersectionError as exc:
                row.update(status="skipped", note=str(exc))
                rows.append(row)
                checks.append(check(f"omega({loop.name}, {direction})", None, tol["omega"],
                                    "skipped"))
                continue
            row["omega_line"] = examplefam.omega_line_integral(ll)
            row["difference"] = abs(row["omega_line"] - row["omega_solid"])
            row["status"] = "pass" if row["difference"] < tol["omega"] else "fail"
            checks.append(check(f"omega({loop.name}, {direction})", row["difference"],
                                tol["omega"]))
            if spec["kind"] in _ORACLES:
                row["oracle_abs"] = _ORACLES[spec["kind"]](spec)
                checks.append(check(f"omega_oracle({loop.name}, {direction})",
                                    abs(abs(row["omega_solid"]) - row["oracle_abs"]),
                                    tol["omega"]))
            rows.append(row)
        fwd, rev = rows[-2], rows[-1]
        if "omega_line" in fwd and "omega_line" in rev:
            checks.append(check(f"orientation_flip({loop.name})",
                                abs(fwd["omega_line"] + rev["omega_line"]), tol["omega"]))
    columns = [("loop", "loop name"), ("direction", "forward or reversed"),
               ("omega_line", "line integral of the holonomy one-form"),
               ("omega_solid", "oriented solid angle (Gauss-Bonnet)"),
               ("difference", "|omega_line - omega_solid|"),
               ("oracle_abs", "|omega| from the closed form (if any)"),
               ("tolerance", "pass threshold"), ("status", "pass, fail or skipped")]
    return columns, rows, checks, {}


# ---------------------------------------------------------------------------
# invariant suite


def run_invariant_suite(cfg: ExperimentConfig, jobs=1):
    tol = cfg.tol
    b = build_family(cfg.family, cfg.selection)
    t = cfg.t_grid
    eps = cfg.epsilon_values[0] if cfg.epsilon_values else 1 / 16
    rows, checks = [], []

    def add(a, name, value, key):
        rows.append({"alpha": a, "invariant": name, "residual": value, "tolerance": tol[key]})
        checks.append(check(f"{name}(alpha={a!r})", value, tol[key]))

    for a in cfg.alpha_values:
        try:
            hs = model.evaluate(b.family, t, a)
            add(a, "hermiticity", maxabs(hs - np.conj(np.swapaxes(hs, -1, -2))), "hermiticity")
            alg = spectral.algebra_residuals(b.family, t, a, b.selection)
            for k in ("idempotency", "pdotp", "pkp", "prkp"):
                add(a, k, alg[k], "algebra")
            add(a, "zero_order_identity",
                holonomy.zero_order_identity_residual(b.family, a, t, b.selection), "zero_order")
            W = evolve.propagate_transport(b.family, a, t, selection=b.selection,
                                           tol_prop=tol["tol_prop"])
            add(a, "intertwining", float(np.max(W.extras["intertwining_residual"])),
                "intertwining")
            U = evolve.propagate_exact(b.family, a, eps, t, tol["tol_prop"])
            add(a, "unitarity", U.unitarity_residual(), "unitarity")
            phi = evolve.propagate_phase(b.family, a, eps, W, tol_prop=tol["tol_prop"])
            add(a, "phase_commutator", float(np.max(phi.extras["commutator_residual"])),
                "commutator")
            if b.selection.k == 1 and b.family.periodic_t:
                add(a, "berry_agreement", holonomy.berry_phase(b.family, a, W).agreement,
                    "berry")
        except AdiapumpError as exc:
            checks.append(check(f"invariants(alpha={a!r})", None, None, "fail",
                                error=f"{type(exc).__name__}: {exc}"))
    columns = [("alpha", "parameter"), ("invariant", "identity checked"),
               ("residual", "max residual over the grid"), ("tolerance", "pass threshold")]
    return columns, rows, checks, {"epsilon": eps}


RUNNERS = {
    "residual_sweep": run_residual_sweep,
    "charge_table": run_charge_table,
    "holonomy_compare": run_holonomy_compare,
    "omega_check": run_omega_check,
    "invariant_suite": run_invariant_suite,
}


# ---------------------------------------------------------------------------
# entry point


def load_config(path, seed_family=None) -> ExperimentConfig:
    with open(path) as fh:
        data = json.load(fh)
    if seed_family is not None:
        if seed_family not in FAMILIES:
            raise ConfigError(f"unknown family {seed_family!r}; choose from {sorted(FAMILIES)}")
        data["family"] = {"name": seed_family, "params": {}}
        data.pop("selection", None)
    return ExperimentConfig.from_dict(data)


def run(cfg: ExperimentConfig, out_dir=None, jobs=1):
    """Run one experiment, write its CSV and JSON, and return the report."""
    columns, rows, checks, extra = RUNNERS[cfg.experiment](cfg, jobs)
    failed = [c["name"] for c in checks if c["status"] == "fail"]
    report = {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "tolerances": cfg.tol,
        "rows": rows,
        "checks": checks,
        "summary": {s: sum(c["status"] == s for c in checks)
                    for s in ("pass", "fail", "inconclusive", "skipped")},
        "passed": not failed,
        **extra,
    }
    paths = write_outputs(out_dir or cfg.output_dir, cfg.experiment, columns, rows, report)
    return report, paths


def main(argv=None):
    parser = argparse.ArgumentParser(prog="adiapump", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the experiment described by a JSON config")
    p.add_argument("config", help="path to the JSON config")
    p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for (eps, alpha) pairs")
    p.add_argument("--seed-family", default=None, choices=sorted(FAMILIES),
                   help="replace the configured family by a built-in one with default parameters")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed_family)
        report, paths = run(cfg, args.out, max(1, args.jobs))
    except (ConfigError, ShapeError, OSError, json.JSONDecodeError) as exc:
        print(f"adiapump: error: {exc}", file=sys.stderr)
        return 2
    except AdiapumpError as exc:
        print(f"adiapump: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    s = report["summary"]
    print(f"{cfg.experiment}: {s['pass']} pass, {s['fail']} fail, "
          f"{s['inconclusive']} inconclusive, {s['skipped']} skipped")
    for path in paths:
        print(f"wrote {path}")
    return 0 if report["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())

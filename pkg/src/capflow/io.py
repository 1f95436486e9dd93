"""Configuration loading and file emission.

A run configuration is a strict JSON document; every key is optional except
``theta``, ``n``, ``grid``, ``phi``, ``f`` and ``h0``.  Outputs are plain CSV,
Wavefront OBJ and a JSON report that embeds the original configuration text
unchanged.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import expr as ex
from .curvature import embed, mesh_to_obj
from .diagnostics import DiagnosticsRow
from .flow import FlowConfig, RunReport

__all__ = ["Config", "ConfigError", "CONFIG_SCHEMA", "load_config", "config_from_text", "emit_outputs", "read_snapshot", "write_timeseries", "read_timeseries"]


class ConfigError(ValueError):
    """Invalid configuration; ``pointer`` is the JSON pointer of the offending value."""

    def __init__(self, message: str, pointer: str = "", offset: Optional[int] = None):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
        self.offset = offset


_POS = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["theta", "n", "grid", "phi", "f", "h0"],
    "properties": {
        "theta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": math.pi / 2, "description": "contact angle, must lie in (0, pi/2)"},
        "n": {"enum": [1, 2], "description": "dimension of the hypersurface"},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_rho"],
            "properties": {
                "n_rho": {"type": "integer", "minimum": 8, "description": "radial cells (n = 2) or nodes across the arc (n = 1)"},
                "n_phi": {"type": "integer", "minimum": 8, "multipleOf": 2, "description": "azimuthal nodes (n = 2 only, even)"},
            },
        },
        "phi": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "p"],
                    "properties": {"kind": {"const": "power"}, "p": {"type": "number", "not": {"const": 0}}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "src"],
                    "properties": {"kind": {"const": "expr"}, "src": {"type": "string", "minLength": 1}},
                },
            ],
            "description": "{'kind': 'power', 'p': p} or {'kind': 'expr', 'src': text in s, x1.., theta}",
        },
        "f": {"type": "string", "minLength": 1, "description": "positive expression in x1.. and theta"},
        "h0": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scale": _POS,
                "amplitude": {"type": "number"},
                "mode": {"type": "string", "description": "'random' or an expression in x1.., theta, rho, phi with zero normal slope at the boundary"},
            },
        },
        "t_max": {**_POS, "default": 20.0},
        "tol_residual": {**_POS, "default": 1e-6},
        "dt_init": {**_POS, "default": 1e-3},
        "dt_min": {**_POS, "default": 1e-10},
        "dt_max": {**_POS, "default": 0.5},
        "safety": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.9},
        "rtol": {**_POS, "default": 1e-7},
        "atol": {**_POS, "default": 1e-10},
        "monitors": {"type": "boolean", "default": True},
        "cadence": {"type": "integer", "minimum": 1, "default": 1, "description": "steps between diagnostics rows"},
        "snapshot_cadence": {"type": "integer", "minimum": 0, "default": 0, "description": "steps between field snapshots, 0 = first and last only"},
        "mesh": {"type": "boolean", "default": False, "description": "write mesh_<k>.obj with each snapshot (n = 2)"},
        "seed": {"type": "integer", "minimum": 0, "default": 0},
        "sample_times": {"type": "array", "items": {"type": "number", "minimum": 0}, "default": []},
        "s_lo": {**_POS, "default": 1e-3},
        "s_hi": {**_POS, "default": 1e3},
        "barrier_samples": {"type": "integer", "minimum": 2, "default": 16},
        "max_stages": {"type": "integer", "minimum": 2, "default": 600},
        "max_steps": {"type": "integer", "minimum": 1, "default": 200000},
        "out": {"type": "string", "description": "output directory (the --out flag wins)"},
    },
}

_FLOW_KEYS = (
    "t_max",
    "tol_residual",
    "dt_init",
    "dt_min",
    "dt_max",
    "safety",
    "rtol",
    "atol",
    "monitors",
    "cadence",
    "seed",
    "s_lo",
    "s_hi",
    "barrier_samples",
    "max_stages",
    "max_steps",
)


@dataclass
class Config:
    flow: FlowConfig
    text: str
    data: dict
    out: Optional[str] = None
    snapshot_cadence: int = 0
    mesh: bool = False
    seed: int = 0
    path: Optional[str] = None
    defaults_used: list = field(default_factory=list)


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def _schema_error(err: jsonschema.ValidationError) -> ConfigError:
    ptr = _pointer(err.absolute_path)
    desc = err.schema.get("description")
    if desc is None and err.absolute_path:
        parent = CONFIG_SCHEMA["properties"].get(err.absolute_path[0], {})
        desc = parent.get("description")
    msg = err.message + (f" ({desc})" if desc else "")
    return ConfigError(msg, ptr)


def config_from_text(text: str, seed: Optional[int] = None, path: Optional[str] = None) -> Config:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: {exc.msg} at line {exc.lineno} column {exc.colno}", "", exc.pos) from None
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        raise _schema_error(errors[0])

    n = data["n"]
    grid = data["grid"]
    if n == 2 and "n_phi" not in grid:
        raise ConfigError("n_phi is required for n = 2", "/grid")
    for key in ("f",):
        try:
            ex.parse(data[key])
        except ex.ParseError as exc:
            raise ConfigError(str(exc), f"/{key}", exc.offset) from None
    if data["phi"]["kind"] == "expr":
        try:
            ex.parse(data["phi"]["src"])
        except ex.ParseError as exc:
            raise ConfigError(str(exc), "/phi/src", exc.offset) from None
    if "mode" in data["h0"] and data["h0"]["mode"] != "random":
        try:
            ex.parse(data["h0"]["mode"])
        except ex.ParseError as exc:
            raise ConfigError(str(exc), "/h0/mode", exc.offset) from None

    props = CONFIG_SCHEMA["properties"]
    kwargs = {}
    used = []
    for key in _FLOW_KEYS:
        if key in data:
            kwargs[key] = data[key]
        else:
            kwargs[key] = props[key]["default"]
            used.append(key)
    if seed is not None:
        kwargs["seed"] = seed
    try:
        flow = FlowConfig(
            theta=float(data["theta"]),
            dim_n=n,
            n_rho=grid["n_rho"],
            n_phi=grid.get("n_phi", 1) if n == 2 else 1,
            phi=dict(data["phi"]),
            f=data["f"],
            h0=dict(data["h0"]),
            sample_times=tuple(data.get("sample_times", ())),
            **kwargs,
        )
        flow.problem  # grid, f and phi are validated here, before any stepping
    except ex.EvalError as exc:
        raise ConfigError(str(exc), "", exc.offset) from None
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(str(exc), "") from None
    return Config(
        flow=flow,
        text=text,
        data=data,
        out=data.get("out"),
        snapshot_cadence=data.get("snapshot_cadence", 0),
        mesh=data.get("mesh", False),
        seed=flow.seed,
        path=path,
        defaults_used=used,
    )


def load_config(path, seed: Optional[int] = None) -> Config:
    """Read, schema-check and convert a JSON configuration file.

    Raises ``FileNotFoundError`` for a missing file and :class:`ConfigError`
    (with a JSON pointer, and the parser offset for expression errors) for
    anything invalid.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config is not UTF-8 ({exc.reason})") from None
    return config_from_text(text, seed=seed, path=str(path))


# --------------------------------------------------------------------------- outputs


def _fmt(x) -> str:
    return repr(float(x))


def write_timeseries(path, rows: list[DiagnosticsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DiagnosticsRow.header())
        for row in rows:
            w.writerow([_fmt(v) for v in row.values()])


def read_timeseries(path) -> list[DiagnosticsRow]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != DiagnosticsRow.header():
            raise ValueError(f"unexpected timeseries header {header}")
        return [DiagnosticsRow(*map(float, rec)) for rec in r]


def write_snapshot(path, grid, state, problem) -> None:
    R, PH = np.meshgrid(grid.rho, grid.phi, indexing="ij")
    res = problem.residual(state.h, state.bundle)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rho", "phi_angle", "h", "K", "residual"])
        for vals in zip(R.ravel(), PH.ravel(), state.h.ravel(), state.bundle.gauss_k.ravel(), res.ravel()):
            w.writerow([_fmt(v) for v in vals])


def read_snapshot(path, grid) -> np.ndarray:
    """The ``h`` column of a snapshot, reshaped to the grid (row-major in rho, phi)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != grid.n_nodes:
        raise ValueError(f"snapshot has {data.shape[0]} rows, grid has {grid.n_nodes} nodes")
    return data[:, 2].reshape(grid.shape)


def _clean(obj):
    # JSON has no inf/nan; non-finite numbers become null
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def report_dict(report: RunReport) -> dict:
    final = report.state
    rows = report.rows
    mon = report.monitors
    return {
        "status": report.status,
        "t_final": final.t,
        "residual_inf": final.residual_inf,
        "initial_residual_inf": report.initial_residual_inf,
        "J_final": final.J,
        "steps": report.n_steps,
        "rejects": report.n_rejects,
        "rhs_evaluations": report.n_evals,
        "wall_time": report.wall_time,
        "condition": report.condition.as_dict(),
        "barrier_levels": {"s_minus": report.levels.s_minus, "s_plus": report.levels.s_plus},
        "monitors_ok": all(m.ok for m in mon) if mon else None,
        "min_u": min((r.min_u for r in rows), default=None),
        "min_grad_bound_slack": min((r.grad_bound_slack for r in rows), default=None),
        "min_radius": min((r.min_radius for r in rows), default=None),
        "warnings": list(report.warnings),
    }


def render_report(report: RunReport, config_text: str) -> str:
    """report.json text with the configuration spliced in verbatim under "config"."""
    body = json.dumps(_clean(report_dict(report)), indent=2, allow_nan=False)
    return '{\n  "config": ' + config_text.strip("\n") + ",\n" + body[2:] + "\n"


def emit_outputs(report: RunReport, cfg: Config, out_dir) -> list[Path]:
    """Write timeseries.csv, snap_<k>.csv, optional mesh_<k>.obj and report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    ts = out / "timeseries.csv"
    write_timeseries(ts, report.rows)
    written.append(ts)
    problem = cfg.flow.problem
    for k, (step_no, state) in enumerate(report.snapshots):
        p = out / f"snap_{k}.csv"
        write_snapshot(p, report.grid, state, problem)
        written.append(p)
        if cfg.mesh and report.grid.dim_n == 2:
            m = out / f"mesh_{k}.obj"
            m.write_text(mesh_to_obj(embed(report.grid, state.h)))
            written.append(m)
    rp = out / "report.json"
    tmp = out / ".report.json.tmp"
    tmp.write_text(render_report(report, cfg.text), encoding="utf-8")
    os.replace(tmp, rp)
    written.append(rp)
    return written

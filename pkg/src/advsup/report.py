"""Artifact persistence: task files, trajectory CSVs, JSON documents, plots.

Every artifact carries the schema version and the hash of the config that
produced it.  Floats are written with ``repr`` so files round-trip exactly
and identical runs produce identical bytes (wall-clock fields aside).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION
from .experiments import TeacherTask, Trajectory
from .models import Dims, dump_params, load_params

TASK_FORMAT = "advsup-task"
CSV_COLUMNS = ("arm", "n", "risk", "grad_norm", "epsilon_hat", "step_size",
               "lambda_hat", "delta_hat", "M_hat", "wallclock_ms")
WALLCLOCK_FILES = ("timing.json",)


class ReportError(ValueError):
    pass


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


# -- task files -------------------------------------------------------------

def format_task(task: TeacherTask, config_hash: str) -> str:
    d = task.dims
    lines = [
        f"{TASK_FORMAT} {SCHEMA_VERSION}",
        f"config_hash {config_hash}",
        f"dims d_x={d.d_x} d_y={d.d_y} d_h={d.d_h} L={d.L} phi={d.phi}",
        f"seed {task.seed}",
        f"n_samples {len(task)}",
        "theta_star",
        dump_params(task.theta_star).rstrip("\n"),
        "end_theta_star",
        "data",
    ]
    for x, y in zip(task.x, task.y):
        lines.append(" ".join(_num(v) for v in x) + " | " + " ".join(_num(v) for v in y))
    return "\n".join(lines) + "\n"


def parse_task(text: str, critic_widths=(16, 16)) -> tuple[TeacherTask, str]:
    """Inverse of :func:`format_task`; returns ``(task, config_hash)``."""
    lines = text.splitlines()
    try:
        fmt, version = lines[0].split()
        if fmt != TASK_FORMAT:
            raise ReportError(f"not a task file (header {lines[0]!r})")
        if int(version) != SCHEMA_VERSION:
            raise ReportError(f"task file schema {version} unsupported (expected {SCHEMA_VERSION})")
        cfg_hash = lines[1].split()[1]
        kv = dict(item.split("=") for item in lines[2].split()[1:])
        dims = Dims(int(kv["d_x"]), int(kv["d_y"]), int(kv["d_h"]), int(kv["L"]),
                    critic_widths=tuple(critic_widths), phi=kv["phi"])
        seed = int(lines[3].split()[1])
        n = int(lines[4].split()[1])
        start, end = lines.index("theta_star"), lines.index("end_theta_star")
        theta_star = load_params("\n".join(lines[start + 1:end]))[0]
        rows = lines[lines.index("data") + 1:]
        x = np.array([[float(v) for v in r.split("|")[0].split()] for r in rows]).reshape(len(rows), dims.d_x)
        y = np.array([[float(v) for v in r.split("|")[1].split()] for r in rows]).reshape(len(rows), dims.d_y)
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, ReportError):
            raise
        raise ReportError(f"malformed task file: {exc}") from exc
    if len(rows) != n:
        raise ReportError(f"task file declares {n} rows but has {len(rows)}")
    return TeacherTask(theta_star, x, y, seed, dims), cfg_hash


# -- trajectories ------------------------------------------------------------

def trajectory_csv(traj: Trajectory, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION} config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in traj.records:
        w.writerow([traj.arm, r.n, _num(r.risk), _num(r.grad_norm), _num(r.epsilon_hat), _num(r.step_size),
                    _num(r.lambda_hat), _num(r.delta_hat), _num(r.M_hat), _num(r.wallclock_ms)])
    return buf.getvalue()


def read_trajectory_csv(path) -> tuple[dict, list]:
    """Return ``(header, rows)`` with rows as dicts of floats (None for blanks)."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().lstrip("#").split()
        header = dict(item.split("=") for item in first)
        rows = []
        for rec in csv.DictReader(fh):
            rows.append({k: (v if k == "arm" else (float(v) if v != "" else None)) for k, v in rec.items()})
    return header, rows


# -- JSON --------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def json_document(payload: dict, config_hash) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "config_hash": config_hash}
    doc.update(payload)
    return json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n"


# -- checksums ---------------------------------------------------------------

def artifact_checksum(path) -> str:
    """SHA-256 of an artifact with wall-clock content removed."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".csv":
        lines = data.decode().splitlines()
        kept = []
        for line in lines:
            if line.startswith("#"):
                kept.append(line)
            else:
                kept.append(",".join(next(csv.reader([line]))[:-1]))
        data = "\n".join(kept).encode()
    return hashlib.sha256(data).hexdigest()


def directory_checksums(directory) -> dict:
    root = Path(directory)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in WALLCLOCK_FILES and not p.name.endswith(".tmp"):
            out[str(p.relative_to(root))] = artifact_checksum(p)
    return out


# -- plots -------------------------------------------------------------------

def dat_file(xs, ys, x_label: str, y_label: str, config_hash: str) -> str:
    lines = [f"# schema_version={SCHEMA_VERSION} config_hash={config_hash}", f"# {x_label} {y_label}"]
    lines += [f"{_num(x)} {_num(y)}" for x, y in zip(xs, ys)]
    return "\n".join(lines) + "\n"


def svg_line_chart(xs, ys, title: str, x_label: str, y_label: str, config_hash: str,
                   width: int = 480, height: int = 320) -> str:
    """Minimal static line chart; axes are log10 when all values are positive."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    log_x = xs.size > 0 and bool(np.all(xs > 0))
    log_y = ys.size > 0 and bool(np.all(ys > 0))
    tx = np.log10(xs) if log_x else xs
    ty = np.log10(ys) if log_y else ys
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def scale(v, lo, hi, span):
        return span / 2 if hi == lo else (v - lo) / (hi - lo) * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<!-- schema_version={SCHEMA_VERSION} config_hash={config_hash} -->",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="22" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle" font-size="12">'
        f'{"log10 " if log_x else ""}{x_label}</text>',
        f'<text x="15" y="{top + ph / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {top + ph / 2})">{"log10 " if log_y else ""}{y_label}</text>',
    ]
    if tx.size:
        x0, x1, y0, y1 = tx.min(), tx.max(), ty.min(), ty.max()
        pts = [(left + scale(a, x0, x1, pw), top + ph - scale(b, y0, y1, ph)) for a, b in zip(tx, ty)]
        parts.append('<polyline fill="none" stroke="steelblue" stroke-width="2" points="'
                     + " ".join(f"{a:.2f},{b:.2f}" for a, b in pts) + '"/>')
        for a, b in pts:
            parts.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="steelblue"/>')
        for v, anchor, xpos in ((x0, "start", left), (x1, "end", left + pw)):
            parts.append(f'<text x="{xpos}" y="{top + ph + 16}" text-anchor="{anchor}" font-size="10">{v:.3g}</text>')
        for v, ypos in ((y0, top + ph), (y1, top + 10)):
            parts.append(f'<text x="{left - 4}" y="{ypos}" text-anchor="end" font-size="10">{v:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- aggregation -------------------------------------------------------------

CURVES = (
    ("grad_sup_vs_epsilon", "sup", "grad_norm_sup"),
    ("bound_sup_vs_epsilon", "sup", "bound_sup"),
    ("grad_aug_arm_vs_epsilon", "aug", "grad_norm_aug"),
    ("grad_aug_trained_critic_vs_epsilon", "sup_trained_critic", "grad_norm_aug"),
)


def _curve_value(cert: dict, key: str):
    if key == "bound_sup":
        return cert["lambda_hat"] * cert["M_hat"]
    return cert[key]


def load_runs(directory) -> list:
    """Collect ``(comparison, certificates)`` pairs found below ``directory``."""
    root = Path(directory)
    runs = []
    for comp_path in sorted(root.rglob("comparison.json")):
        cert_path = comp_path.with_name("certificates.json")
        with open(comp_path, encoding="utf-8") as fh:
            comp = json.load(fh)
        certs = None
        if cert_path.exists():
            with open(cert_path, encoding="utf-8") as fh:
                certs = json.load(fh)
        runs.append((comp, certs))
    return runs


def aggregate(runs: list) -> tuple[dict, dict]:
    """Build the aggregate report and the curve data from loaded runs.

    Runs sharing a config hash are identical by construction and counted once.
    Raises ReportError on an empty input or mixed schema versions.
    """
    if not runs:
        raise ReportError("no run outputs found")
    versions = {c.get("schema_version") for c, _ in runs}
    versions |= {k.get("schema_version") for _, k in runs if k is not None}
    if len(versions) != 1:
        raise ReportError(f"mixed schema versions {sorted(map(str, versions))}")
    unique = {}
    for comp, certs in runs:
        unique.setdefault(comp["config_hash"], (comp, certs))
    ordered = sorted(unique.values(), key=lambda r: (r[0]["training_seed"], r[0]["task_seed"], r[0]["config_hash"]))

    rows, ratio_rows = [], []
    for comp, _ in ordered:
        risks, conv = comp["risks"], comp["convergence"]
        rows.append({
            "config_hash": comp["config_hash"],
            "seed": comp["training_seed"],
            "task_seed": comp["task_seed"],
            "valid": risks["valid"],
            "R_sup": risks.get("R_sup"),
            "R_aug": risks.get("R_aug"),
            "aug_le_sup": risks.get("aug_le_sup"),
            "N_sup_star": conv["N_sup_star"],
            "N_aug_star": conv["N_aug_star"],
        })
        ratio_rows.append({
            "seed": comp["training_seed"],
            "N_sup_star": conv["N_sup_star"],
            "N_aug_star": conv["N_aug_star"],
            "predicted_ratio": conv["predicted_ratio"],
            "measured_ratio": conv["measured_ratio"],
            "ratio_defined": conv["ratio_defined"],
        })

    def fraction(values):
        vals = [bool(v) for v in values if v is not None]
        return {"fraction": (sum(vals) / len(vals)) if vals else None, "count": sum(vals), "of": len(vals)}

    curves = {}
    for name, arm, key in CURVES:
        by_eps = {}
        for _, certs in ordered:
            for row in (certs or {}).get("gradient_epsilon_curve", []):
                entry = row.get(arm)
                if entry is not None:
                    by_eps.setdefault(row["epsilon"], []).append(_curve_value(entry["certificate"], key))
        eps = sorted(by_eps)
        curves[name] = {"epsilon": eps, "mean": [float(np.mean(by_eps[e])) for e in eps],
                        "count": [len(by_eps[e]) for e in eps]}

    hashes = sorted(unique)
    report = {
        "runs": len(rows),
        "config_hashes": hashes,
        "inf_approximation": "minimum risk over the trajectory; aggregate over seeds",
        "rows": rows,
        "risk_fraction_aug_le_sup": fraction(r["aug_le_sup"] for r in rows if r["valid"]),
        "convergence_fraction_aug_le_sup": fraction(
            None if c["N_sup_star"] is None and c["N_aug_star"] is None
            else (c["N_aug_star"] is not None and (c["N_sup_star"] is None or c["N_aug_star"] <= c["N_sup_star"]))
            for c in ratio_rows),
        "ratio_table": ratio_rows,
        "curves": curves,
    }
    return report, curves


def report_hash(report: dict) -> str:
    return hashlib.sha256("\n".join(report["config_hashes"]).encode()).hexdigest()

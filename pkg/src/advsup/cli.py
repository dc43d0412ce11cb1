"""Command line entry point: gen-data, run, probe, compare, report.

Exit codes: 0 success, 1 a certificate check failed, 2 usage or config
error (nothing is written), 3 numerical divergence (artifacts kept).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import config as cfgmod
from . import report as rep
from .config import ConfigError, RunConfig, config_hash
from .experiments import (
    compare_risks,
    displacement_bounds,
    final_certificate,
    gradient_epsilon_curve,
    initial_state,
    make_teacher_task,
    measure_convergence,
    near_optimal_probe,
    risk_monotonicity,
    train_augmented,
    train_supervised,
)

EXIT_OK = 0
EXIT_UNSOUND = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
OUTPUT_ENV = "ADVSUP_OUTPUT_DIR"


class UsageError(Exception):
    pass


# -- orchestration (importable, used by the subcommands and the tests) --------

def build_task(cfg: RunConfig, task_path=None):
    if task_path is None:
        return make_teacher_task(cfg.task.seed, cfg.task.n_samples, cfg.dims())
    try:
        text = Path(task_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read task file {task_path}: {exc}") from exc
    try:
        task, _ = rep.parse_task(text, critic_widths=cfg.critic.widths)
    except rep.ReportError as exc:
        raise UsageError(str(exc)) from exc
    d, c = task.dims, cfg.dims()
    if (d.d_x, d.d_y, d.d_h, d.L, d.phi) != (c.d_x, c.d_y, c.d_h, c.L, c.phi):
        raise UsageError(f"task file dims {d} do not match config dims {c}")
    return task


def train_arms(cfg: RunConfig, task):
    tc = cfg.train_config()
    theta_0, psi_0 = initial_state(task, cfg.training.seed, tc)
    t0 = time.perf_counter()
    sup = train_supervised(task, theta_0, tc)
    t1 = time.perf_counter()
    aug = train_augmented(task, theta_0, psi_0, tc)
    t2 = time.perf_counter()
    timing = {"sup_ms": (t1 - t0) * 1e3, "aug_ms": (t2 - t1) * 1e3,
              "generator_steps": {"sup": len(sup.records) - 1, "aug": len(aug.records) - 1},
              "critic_steps": aug.critic_steps}
    return sup, aug, psi_0, timing


def _probe_payload(cfg: RunConfig, task, sup, aug, psi_0) -> dict:
    probes = {}
    for eps in cfg.probe.epsilons:
        probes[repr(float(eps))] = {
            arm: [{"n": n, "certificate": c.to_dict()}
                  for n, c in near_optimal_probe(traj, task, eps, max_certificates=cfg.probe.max_certificates)]
            for arm, traj in (("sup", sup), ("aug", aug))
        }
    curve = gradient_epsilon_curve(sup, aug, task, cfg.probe.epsilons, psi_0=psi_0,
                                   config=cfg.train_config(), critic_steps=cfg.probe.critic_steps)
    return {"probes": probes, "gradient_epsilon_curve": curve}


def _all_certificates(payload):
    """Yield every certificate dict nested anywhere in ``payload``."""
    if isinstance(payload, dict):
        if "checks" in payload and "lambda_hat" in payload:
            yield payload
            return
        for v in payload.values():
            yield from _all_certificates(v)
    elif isinstance(payload, list):
        for v in payload:
            yield from _all_certificates(v)


def soundness_summary(*payloads) -> dict:
    certs = [c for p in payloads for c in _all_certificates(p)]
    failures = [{"check": k, **v} for c in certs for k, v in c["checks"].items() if not v["pass"]]
    return {"certificates": len(certs), "failures": failures, "all_passed": not failures}


def run_pipeline(cfg: RunConfig, out_dir, task=None, task_path=None) -> tuple[int, dict]:
    """Train both arms, certify, compare, and write every run artifact to ``out_dir``."""
    if task is None:
        task = build_task(cfg, task_path)
    h = config_hash(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sup, aug, psi_0, timing = train_arms(cfg, task)
    diverged = sup.diverged or aug.diverged

    rep.write_atomic(out / "config.ini", cfgmod.dump(cfg, include_output=False))
    rep.write_atomic(out / "task.txt", rep.format_task(task, h))
    rep.write_atomic(out / "sup.csv", rep.trajectory_csv(sup, h))
    rep.write_atomic(out / "aug.csv", rep.trajectory_csv(aug, h))

    critic = aug.critics[-1] if aug.critics else psi_0
    final = {arm: (None if c is None else c.to_dict())
             for arm, c in (("sup", final_certificate(sup, task, critic)),
                            ("aug", final_certificate(aug, task, critic)))}
    certificates = {"final": final, **_probe_payload(cfg, task, sup, aug, psi_0)}

    tc = cfg.train_config()
    pair = (sup, aug)
    risks = compare_risks(task, cfg.training.seed, len(sup.records) - 1 if sup.records else 0, tc,
                          trajectories=pair) if sup.records and aug.records else {"valid": False}
    risks["valid"] = risks.get("valid", False) and not diverged
    comparison = {
        "task_seed": task.seed,
        "training_seed": cfg.training.seed,
        "task_digest": task.digest(),
        "risks": risks,
        "convergence": measure_convergence(task, cfg.training.seed, cfg.training.risk_threshold, tc,
                                           trajectories=pair),
        "monotonicity": {arm: risk_monotonicity(t) for arm, t in (("sup", sup), ("aug", aug)) if t.records},
        "displacement": {},
        "divergence": {arm: {"diverged": t.diverged, "message": t.divergence_message}
                       for arm, t in (("sup", sup), ("aug", aug))},
    }
    for arm, t in (("sup", sup), ("aug", aug)):
        if len(t.params) > 1 and all(r.M_hat is not None for r in t.records):
            d = displacement_bounds(t, task)
            comparison["displacement"][arm] = {
                "all_steps_pass": d["all_steps_pass"],
                "steps": len(d["steps"]),
                "max_ratio": max(s["ratio"] for s in d["steps"]),
                "cumulative": d["cumulative"],
            }
    sound = soundness_summary(certificates, risks.get("final_certificates", {}))
    certificates["soundness"] = sound

    rep.write_atomic(out / "certificates.json", rep.json_document(certificates, h))
    rep.write_atomic(out / "comparison.json", rep.json_document(comparison, h))
    rep.write_atomic(out / "timing.json", rep.json_document(timing, h))

    code = EXIT_DIVERGED if diverged else (EXIT_OK if sound["all_passed"] else EXIT_UNSOUND)
    return code, {"config_hash": h, "soundness": sound, "comparison": comparison, "diverged": diverged}


def probe_pipeline(cfg: RunConfig, out_dir, task_path=None) -> int:
    task = build_task(cfg, task_path)
    h = config_hash(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sup, aug, psi_0, _ = train_arms(cfg, task)
    payload = _probe_payload(cfg, task, sup, aug, psi_0)
    payload["soundness"] = soundness_summary(payload)
    rep.write_atomic(out / "probes.json", rep.json_document(payload, h))
    if sup.diverged or aug.diverged:
        return EXIT_DIVERGED
    return EXIT_OK if payload["soundness"]["all_passed"] else EXIT_UNSOUND


def report_pipeline(in_dir, out_dir=None, formats=("dat", "svg")) -> tuple[int, dict]:
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise UsageError(f"{in_dir} is not a directory")
    try:
        doc, curves = rep.aggregate(rep.load_runs(in_dir))
    except rep.ReportError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(out_dir) if out_dir is not None else in_dir
    out.mkdir(parents=True, exist_ok=True)
    h = rep.report_hash(doc)
    rep.write_atomic(out / "report.json", rep.json_document(doc, h))
    for name, c in curves.items():
        if "dat" in formats:
            rep.write_atomic(out / f"{name}.dat", rep.dat_file(c["epsilon"], c["mean"], "epsilon", name, h))
        if "svg" in formats:
            rep.write_atomic(out / f"{name}.svg",
                             rep.svg_line_chart(c["epsilon"], c["mean"], name, "epsilon", "gradient norm", h))
    return EXIT_OK, doc


def parse_seeds(spec: str) -> list:
    seeds = []
    try:
        for part in spec.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-"))
                seeds.extend(range(lo, hi + 1))
            elif part:
                seeds.append(int(part))
    except ValueError as exc:
        raise UsageError(f"bad seed list {spec!r}") from exc
    if not seeds or any(s < 0 for s in seeds):
        raise UsageError(f"bad seed list {spec!r}")
    return sorted(set(seeds))


# -- argument handling ---------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (sections task, training, critic, probe, output)")
    group = p.add_argument_group("config overrides")
    for flag, dotted, default in cfgmod.flag_specs():
        shown = cfgmod._format(default)
        group.add_argument(flag, dest=dotted, default=None, metavar="VALUE",
                           help=f"overrides {dotted} (default {shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advsup", description="Supervised vs adversarially augmented training lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", help="write the teacher task file")
    _add_config_flags(p)
    p = sub.add_parser("run", help="train both arms and write trajectories, certificates and comparisons")
    _add_config_flags(p)
    p.add_argument("--task", help="task file from gen-data (generated in-line when omitted)")
    p = sub.add_parser("probe", help="certify near-optimal iterates only")
    _add_config_flags(p)
    p.add_argument("--task", help="task file from gen-data")
    p = sub.add_parser("compare", help="paired runs over a seed list, then aggregate")
    _add_config_flags(p)
    p.add_argument("--seeds", default="0-19", help="e.g. 0-19 or 0,3,7")
    p = sub.add_parser("report", help="aggregate run directories into a report with plot data")
    p.add_argument("input", help="directory containing run outputs")
    p.add_argument("--out", help="output directory (defaults to the input directory)")
    p.add_argument("--formats", default="dat,svg", help="plot formats to emit: dat, svg")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {dotted: getattr(args, dotted) for _, dotted, _ in cfgmod.flag_specs()
                 if getattr(args, dotted, None) is not None}
    env_dir = os.environ.get(OUTPUT_ENV)
    if env_dir and "output.directory" not in overrides:
        overrides["output.directory"] = env_dir
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    return cfgmod.parse(text, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "report":
            formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
            if set(formats) - {"dat", "svg"}:
                raise UsageError(f"unknown formats {args.formats!r}")
            code, doc = report_pipeline(args.input, args.out, formats)
            print(f"report: {doc['runs']} runs -> {Path(args.out or args.input) / 'report.json'}")
            return code
        cfg = resolve_config(args)
        out = Path(cfg.output.directory)
        if args.command == "gen-data":
            task = build_task(cfg)
            out.mkdir(parents=True, exist_ok=True)
            rep.write_atomic(out / "task.txt", rep.format_task(task, config_hash(cfg)))
            print(f"wrote {out / 'task.txt'}")
            return EXIT_OK
        if args.command == "run":
            code, summary = run_pipeline(cfg, out, task_path=args.task)
            _print_run(out, summary)
            return code
        if args.command == "probe":
            code = probe_pipeline(cfg, out, task_path=args.task)
            print(f"wrote {out / 'probes.json'}")
            return code
        if args.command == "compare":
            worst = EXIT_OK
            for s in parse_seeds(args.seeds):
                seed_cfg = cfg.replace("training", seed=s)
                code, summary = run_pipeline(seed_cfg, out / f"seed_{s:04d}")
                _print_run(out / f"seed_{s:04d}", summary)
                worst = max(worst, code)
            report_pipeline(out, out, cfg.output.formats)
            return worst
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


def _print_run(out, summary) -> None:
    risks = summary["comparison"]["risks"]
    sound = summary["soundness"]
    print(f"{out}: R_sup={risks.get('R_sup')} R_aug={risks.get('R_aug')} "
          f"certificates={sound['certificates']} failures={len(sound['failures'])} "
          f"diverged={summary['diverged']}")


if __name__ == "__main__":
    sys.exit(main())

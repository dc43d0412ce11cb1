import json
import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advsup import cli
from advsup import config as cfgmod
from advsup import report as rep
from advsup.config import ConfigError, RunConfig
from advsup.models import generator_forward
from advsup.objectives import supervised_loss

FAST = ["--task-n-samples", "16", "--training-N", "5", "--probe-critic-steps", "5", "--probe-max-certificates", "3"]
HEADER = "arm,n,risk,grad_norm,epsilon_hat,step_size,lambda_hat,delta_hat,M_hat,wallclock_ms"


def run_cli(*args):
    return cli.main([str(a) for a in args])


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert cfgmod.parse(cfgmod.dump(cfg)) == cfg
        assert cfgmod.dump(cfgmod.parse(cfgmod.dump(cfg))) == cfgmod.dump(cfg)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), eta=st.floats(0, 10, allow_nan=False), N=st.integers(0, 10**6),
           thr=st.floats(1e-300, 1e3), clip=st.floats(1e-12, 1e3),
           eps=st.lists(st.floats(1e-300, 1e300), min_size=1, max_size=5),
           widths=st.lists(st.integers(1, 64), min_size=1, max_size=4))
    def test_random_configs_round_trip_bit_exactly(self, seed, eta, N, thr, clip, eps, widths):
        cfg = RunConfig()
        cfg = cfg.replace("task", seed=seed)
        cfg = cfg.replace("training", eta=eta, N=N, risk_threshold=thr)
        cfg = cfg.replace("critic", clip=clip, widths=tuple(widths))
        cfg = cfg.replace("probe", epsilons=tuple(eps))
        text = cfgmod.dump(cfg)
        back = cfgmod.parse(text)
        assert back == cfg
        assert cfgmod.dump(back) == text
        assert cfgmod.config_hash(back) == cfgmod.config_hash(cfg)

    @pytest.mark.parametrize("text", [
        "[task]\nseed = x\n",
        "[nonsense]\na = 1\n",
        "[task]\ncolour = blue\n",
        "[task]\nd_x = 0\n",
        "[training]\ninit = magic\n",
        "[probe]\nepsilons = 0.1,-1\n",
        "not a config at all",
        "[output]\nformats = png\n",
    ])
    def test_rejects_bad_text(self, text):
        with pytest.raises(ConfigError):
            cfgmod.parse(text)

    def test_every_field_has_a_flag(self):
        flags = {f for f, _, _ in cfgmod.flag_specs()}
        for section in cfgmod.SECTIONS:
            for name in getattr(RunConfig(), section).__dataclass_fields__:
                assert f"--{section}-{name.replace('_', '-')}" in flags

    def test_hash_ignores_output_location(self):
        a = RunConfig()
        b = a.replace("output", directory="elsewhere")
        assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
        assert cfgmod.config_hash(a) != cfgmod.config_hash(a.replace("task", seed=1))

    def test_env_overrides_directory_only(self, monkeypatch, tmp_path):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        args = cli.build_parser().parse_args(["gen-data"])
        assert cli.resolve_config(args).output.directory == str(tmp_path / "env")
        args = cli.build_parser().parse_args(["gen-data", "--output-directory", str(tmp_path / "flag")])
        assert cli.resolve_config(args).output.directory == str(tmp_path / "flag")


class TestGenData:
    def test_same_config_same_file(self, tmp_path):
        for d in ("a", "b"):
            assert run_cli("gen-data", "--output-directory", tmp_path / d) == 0
        assert (tmp_path / "a" / "task.txt").read_bytes() == (tmp_path / "b" / "task.txt").read_bytes()

    def test_row_count(self, tmp_path):
        assert run_cli("gen-data", "--task-n-samples", 3, "--output-directory", tmp_path) == 0
        lines = (tmp_path / "task.txt").read_text().splitlines()
        assert len(lines) - lines.index("data") - 1 == 3

    def test_round_trip_teacher_loss_is_zero(self, tmp_path):
        run_cli("gen-data", "--task-phi", "mlp", "--output-directory", tmp_path)
        task, h = rep.parse_task((tmp_path / "task.txt").read_text())
        assert re.fullmatch(r"[0-9a-f]{64}", h)
        assert np.all(supervised_loss(generator_forward(task.theta_star, task.x), task.y) == 0.0)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run_cli("gen-data", "--output-directory", blocker / "sub") != 0


class TestRun:
    def test_outputs_and_golden_header(self, tmp_path):
        assert run_cli("run", *FAST, "--output-directory", tmp_path) == 0
        for name in ("sup.csv", "aug.csv", "certificates.json", "comparison.json", "timing.json"):
            assert (tmp_path / name).exists()
        h = cfgmod.config_hash(cfgmod.parse(cfgmod.dump(cfgmod.load(tmp_path / "config.ini"))))
        for arm in ("sup", "aug"):
            lines = (tmp_path / f"{arm}.csv").read_text().splitlines()
            assert lines[0] == f"# schema_version=1 config_hash={h}"
            assert lines[1] == HEADER
            assert len(lines) == 2 + 6
            assert all(line.startswith(arm + ",") for line in lines[2:])
        for name in ("certificates.json", "comparison.json", "timing.json"):
            doc = json.loads((tmp_path / name).read_text())
            assert doc["schema_version"] == 1 and doc["config_hash"] == h

    def test_teacher_start(self, tmp_path):
        assert run_cli("run", *FAST, "--training-init", "teacher", "--output-directory", tmp_path) == 0
        _, rows = rep.read_trajectory_csv(tmp_path / "sup.csv")
        assert all(r["risk"] == 0.0 for r in rows)

    def test_default_smoke_run_certificates_pass(self, tmp_path):
        code, summary = cli.run_pipeline(RunConfig(), tmp_path)
        assert code == 0
        assert summary["soundness"]["all_passed"] and summary["soundness"]["certificates"] > 0

    def test_corrupted_config_writes_nothing(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[task\nseed = 0\n")
        out = tmp_path / "out"
        assert run_cli("run", "--config", bad, "--output-directory", out) == 2
        assert not out.exists()

    def test_bad_flag_value_writes_nothing(self, tmp_path):
        out = tmp_path / "out"
        assert run_cli("run", "--training-eta", "fast", "--output-directory", out) == 2
        assert not out.exists()

    def test_unknown_flag_is_usage_error(self):
        assert run_cli("run", "--no-such-flag") == 2

    def test_divergence_exit_code_keeps_artifacts(self, tmp_path):
        assert run_cli("run", *FAST, "--training-eta", "1e200", "--training-estimate-every", "0",
                       "--output-directory", tmp_path) == 3
        comp = json.loads((tmp_path / "comparison.json").read_text())
        assert comp["divergence"]["sup"]["diverged"] and not comp["risks"]["valid"]
        assert (tmp_path / "sup.csv").exists()

    def test_task_file_input(self, tmp_path):
        run_cli("gen-data", "--task-n-samples", 16, "--output-directory", tmp_path / "data")
        assert run_cli("run", *FAST, "--task", tmp_path / "data" / "task.txt", "--output-directory", tmp_path / "r") == 0
        assert (tmp_path / "data" / "task.txt").read_text().split("\n", 2)[2] == \
            (tmp_path / "r" / "task.txt").read_text().split("\n", 2)[2]

    def test_task_dims_mismatch(self, tmp_path):
        run_cli("gen-data", "--task-n-samples", 4, "--output-directory", tmp_path / "data")
        assert run_cli("run", *FAST, "--task-d-x", 3, "--task", tmp_path / "data" / "task.txt",
                       "--output-directory", tmp_path / "r") == 2

    def test_probe_subcommand(self, tmp_path):
        assert run_cli("probe", *FAST, "--probe-epsilons", "10.0", "--output-directory", tmp_path) == 0
        doc = json.loads((tmp_path / "probes.json").read_text())
        assert doc["soundness"]["all_passed"]
        assert len(doc["probes"]["10.0"]["sup"]) == 3


class TestReport:
    def test_single_run(self, tmp_path):
        run_cli("run", *FAST, "--output-directory", tmp_path / "runs" / "a")
        assert run_cli("report", tmp_path / "runs", "--out", tmp_path / "rep") == 0
        doc = json.loads((tmp_path / "rep" / "report.json").read_text())
        assert doc["runs"] == 1 and len(doc["rows"]) == 1 and len(doc["ratio_table"]) == 1
        assert doc["risk_fraction_aug_le_sup"]["fraction"] in (0.0, 1.0)
        for name, *_ in rep.CURVES:
            assert (tmp_path / "rep" / f"{name}.dat").exists()
            assert (tmp_path / "rep" / f"{name}.svg").read_text().startswith("<svg")

    def test_duplicate_runs_counted_once(self, tmp_path):
        run_cli("run", *FAST, "--output-directory", tmp_path / "one" / "a")
        run_cli("run", *FAST, "--output-directory", tmp_path / "two" / "a")
        run_cli("run", *FAST, "--output-directory", tmp_path / "two" / "b")
        run_cli("report", tmp_path / "one", "--out", tmp_path / "r1")
        run_cli("report", tmp_path / "two", "--out", tmp_path / "r2")
        for name in ["report.json"] + [f"{c[0]}.dat" for c in rep.CURVES]:
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()

    def test_empty_directory(self, tmp_path):
        assert run_cli("report", tmp_path) == 2

    def test_mixed_schema_versions_refused(self, tmp_path):
        run_cli("run", *FAST, "--output-directory", tmp_path / "a")
        run_cli("run", *FAST, "--training-seed", 1, "--output-directory", tmp_path / "b")
        p = tmp_path / "b" / "comparison.json"
        doc = json.loads(p.read_text())
        doc["schema_version"] = 99
        p.write_text(json.dumps(doc))
        assert run_cli("report", tmp_path) == 2
        assert not (tmp_path / "report.json").exists()

    def test_compare_seed_sweep(self, tmp_path):
        assert run_cli("compare", *FAST, "--seeds", "0-2", "--output-directory", tmp_path) == 0
        doc = json.loads((tmp_path / "report.json").read_text())
        assert [r["seed"] for r in doc["rows"]] == [0, 1, 2]
        assert len(set(doc["config_hashes"])) == 3

    def test_bad_seed_list(self, tmp_path):
        assert run_cli("compare", "--seeds", "a-b", "--output-directory", tmp_path / "x") == 2


class TestDeterminism:
    def test_pipeline_checksums(self, tmp_path):
        for d in ("p1", "p2"):
            root = tmp_path / d
            assert run_cli("gen-data", "--task-n-samples", 16, "--output-directory", root / "data") == 0
            assert run_cli("run", *FAST, "--task", root / "data" / "task.txt", "--output-directory", root / "run") == 0
            assert run_cli("report", root / "run") == 0
        a = rep.directory_checksums(tmp_path / "p1")
        b = rep.directory_checksums(tmp_path / "p2")
        assert a == b and len(a) > 10

    def test_wallclock_column_ignored_by_checksum(self, tmp_path):
        run_cli("run", *FAST, "--output-directory", tmp_path)
        p = tmp_path / "sup.csv"
        before = rep.artifact_checksum(p)
        lines = p.read_text().splitlines()
        lines[2] = ",".join(lines[2].split(",")[:-1] + ["123.0"])
        p.write_text("\n".join(lines) + "\n")
        assert rep.artifact_checksum(p) == before


class TestSvg:
    def test_empty_curve(self):
        assert "<polyline" not in rep.svg_line_chart([], [], "t", "x", "y", "h")

    def test_log_axes(self):
        svg = rep.svg_line_chart([0.01, 0.1], [1e-4, 1e-2], "t", "eps", "g", "h")
        assert "log10 eps" in svg and svg.count("<circle") == 2

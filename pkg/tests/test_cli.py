"""Run files and the falqon command surface: artifacts, exit codes, formats."""

import json
import textwrap

import numpy as np
import pytest

from falqon.checkpoint import load_checkpoint
from falqon.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from falqon.config import load_config
from falqon.overhead import CostParams, parse_breakdown
from falqon.training import TrainConfig, build_model

SMALL_RUN = """
    [run]
    steps = 5
    batch = 4
    rank = 3
    top_k = 2
    dims = 6, 8
    backbone_std = 0.05
    teacher_gap = 1e-3
    label_noise = 0.0
"""

_SMALL_RUN_KEYS = {
    "steps": "5",
    "batch": "4",
    "rank": "3",
    "top_k": "2",
    "dims": "6, 8",
    "backbone_std": "0.05",
    "teacher_gap": "1e-3",
    "label_noise": "0.0",
}


def write_ini(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


def small_run(extra="", **overrides):
    """SMALL_RUN with [run] keys replaced (never repeated) and extra sections appended.

    ConfigParser rejects duplicate keys, so overrides must substitute in place.
    """
    keys = dict(_SMALL_RUN_KEYS)
    keys.update(overrides)
    run = "[run]\n" + "".join(f"{k} = {v}\n" for k, v in keys.items())
    return run + textwrap.dedent(extra)


def run_cli(*argv):
    return main(list(argv))


def split_sections(document):
    """Compare-document blocks keyed by their [name] headers."""
    sections = {}
    current = None
    for line in document.splitlines():
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif line.startswith("summary:"):
            sections["summary"] = [line]
            current = None
        elif current is not None and line:
            sections[current].append(line)
    return sections


def section_losses(lines):
    out = []
    for line in lines[1:]:  # skip the step,loss header
        if not line[0].isdigit():
            break
        _, loss = line.split(",")
        out.append(float(loss))
    return out


class TestConfigLoading:
    def test_empty_file_gives_defaults(self, tmp_path):
        setup = load_config(write_ini(tmp_path, ""))
        assert setup.train == TrainConfig()
        assert setup.cost == CostParams()
        assert setup.outputs.report == tmp_path / "report.json"
        assert setup.resume_from is None

    def test_run_section_parses_types(self, tmp_path):
        setup = load_config(write_ini(tmp_path, """
            [run]
            steps = 7
            lr = 5e-3
            dims = 4, 9, 3
            quantize = false
            buffer_mode = overwrite
        """))
        cfg = setup.train
        assert cfg.steps == 7
        assert cfg.lr == 5e-3
        assert cfg.dims == (4, 9, 3)
        assert cfg.quantize is False
        assert cfg.buffer_mode == "overwrite"

    def test_cost_section_maps_to_params(self, tmp_path):
        setup = load_config(write_ini(tmp_path, """
            [cost]
            fp16_throughput = 2e13
            op_overhead_s = 1e-5
        """))
        assert setup.cost.fp16_throughput == 2e13
        assert setup.cost.fp8_throughput == 4e13
        assert setup.cost.op_overhead_s == 1e-5

    def test_paths_resolve_against_the_config_directory(self, tmp_path):
        nested = tmp_path / "cfgs"
        nested.mkdir()
        setup = load_config(write_ini(nested, """
            [output]
            report = ../artifacts/r.json
            [resume]
            from = warm.ckpt
        """))
        assert setup.outputs.report == nested / "../artifacts/r.json"
        assert setup.resume_from == nested / "warm.ckpt"

    @pytest.mark.parametrize("text", [
        "[run]\nwibble = 3\n",
        "[wibble]\nx = 1\n",
        "[run]\nsteps = banana\n",
        "[run]\nquantize = maybe\n",
        "[run]\ndims = \n",
        "[run\nsteps = 3\n",
        "[run]\nsteps = -4\n",
    ])
    def test_defective_configs_rejected(self, tmp_path, text):
        with pytest.raises(ValueError):
            load_config(write_ini(tmp_path, text))

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="cannot read"):
            load_config(tmp_path / "absent.ini")


class TestTrainCommand:
    def test_writes_all_three_artifacts(self, tmp_path, capsys):
        cfg = write_ini(tmp_path, SMALL_RUN)
        assert run_cli("train", "-c", str(cfg)) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert len(report["losses"]) == 5
        assert (tmp_path / "run.ckpt").read_bytes()[:8] == b"FALQONCK"
        rows = parse_breakdown((tmp_path / "breakdown.csv").read_text())
        assert rows[0]["path"] == "fp8_melded"
        out = capsys.readouterr().out
        assert "final_loss=" in out

    def test_zero_steps_is_a_valid_empty_run(self, tmp_path):
        cfg = write_ini(tmp_path, "[run]\nsteps = 0\ndims = 6, 8\nrank = 3\n")
        assert run_cli("train", "-c", str(cfg)) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["losses"] == []
        rows = parse_breakdown((tmp_path / "breakdown.csv").read_text())
        assert all(r["flops"] == 0 and r["quantize_ops"] == 0 for r in rows)

    def test_corrupt_config_exits_1_and_writes_nothing(self, tmp_path, capsys):
        cfg = write_ini(tmp_path, "[run]\nsteps = banana\n")
        assert run_cli("train", "-c", str(cfg)) == EXIT_CONFIG
        assert "error" in capsys.readouterr().err
        assert list(tmp_path.glob("*.json")) == []
        assert list(tmp_path.glob("*.ckpt")) == []
        assert list(tmp_path.glob("*.csv")) == []

    def test_divergence_exits_2(self, tmp_path, capsys):
        # the quantized engine saturates instead of overflowing, so the
        # unclamped full-precision arm is the one that can diverge
        cfg = write_ini(
            tmp_path,
            small_run(lr="1e160", steps="20", variant="explicit_full", quantize="false"),
        )
        with np.errstate(over="ignore"):
            assert run_cli("train", "-c", str(cfg)) == EXIT_NUMERIC
        assert "numerical abort" in capsys.readouterr().err
        assert list(tmp_path.glob("*.json")) == []

    def test_non_melded_variant_skips_the_checkpoint(self, tmp_path, capsys):
        cfg = write_ini(tmp_path, small_run("variant = explicit_fp8\n"))
        assert run_cli("train", "-c", str(cfg)) == EXIT_OK
        assert not (tmp_path / "run.ckpt").exists()
        assert "checkpoint skipped" in capsys.readouterr().err

    def test_resumed_segments_equal_one_straight_run(self, tmp_path):
        first = write_ini(tmp_path, small_run("""\
            [output]
            report = r5.json
            checkpoint = c5.ckpt
            breakdown = b5.csv
        """), name="first.ini")
        tail = write_ini(tmp_path, small_run("""\
            [resume]
            from = c5.ckpt
            [output]
            report = rtail.json
            checkpoint = ctail.ckpt
            breakdown = btail.csv
        """, steps="3", start_step="5"), name="tail.ini")
        straight = write_ini(tmp_path, small_run("""\
            [output]
            report = r8.json
            checkpoint = c8.ckpt
            breakdown = b8.csv
        """, steps="8"), name="straight.ini")
        for cfg in (first, tail, straight):
            assert run_cli("train", "-c", str(cfg)) == EXIT_OK
        tail_losses = json.loads((tmp_path / "rtail.json").read_text())["losses"]
        full_losses = json.loads((tmp_path / "r8.json").read_text())["losses"]
        assert tail_losses == full_losses[5:]
        assert ((tmp_path / "ctail.ckpt").read_bytes()
                == (tmp_path / "c8.ckpt").read_bytes())

    def test_resume_matches_even_after_codes_move(self, tmp_path):
        # a learning rate high enough that backbone codes change during
        # the first segment: the resumed run must rebuild the task from
        # the step-0 model, not from the checkpointed state
        over = dict(lr="0.05", label_noise="1e-3")
        first = write_ini(tmp_path, small_run("""\
            [output]
            report = r5.json
            checkpoint = c5.ckpt
            breakdown = b5.csv
        """, **over), name="first.ini")
        tail = write_ini(tmp_path, small_run("""\
            [resume]
            from = c5.ckpt
            [output]
            report = rtail.json
            checkpoint = ctail.ckpt
            breakdown = btail.csv
        """, steps="3", start_step="5", **over), name="tail.ini")
        straight = write_ini(tmp_path, small_run("""\
            [output]
            report = r8.json
            checkpoint = c8.ckpt
            breakdown = b8.csv
        """, steps="8", **over), name="straight.ini")
        for cfg in (first, tail, straight):
            assert run_cli("train", "-c", str(cfg)) == EXIT_OK
        cfg5 = load_config(first).train
        moved, _ = load_checkpoint(tmp_path / "c5.ckpt", cfg5)
        fresh = build_model(cfg5)
        assert not np.array_equal(moved.layers[0].w_merged.codes,
                                  fresh.layers[0].w_merged.codes)
        tail_losses = json.loads((tmp_path / "rtail.json").read_text())["losses"]
        full_losses = json.loads((tmp_path / "r8.json").read_text())["losses"]
        assert tail_losses == full_losses[5:]
        assert ((tmp_path / "ctail.ckpt").read_bytes()
                == (tmp_path / "c8.ckpt").read_bytes())

    def test_reports_are_bit_identical_across_runs(self, tmp_path):
        cfg = write_ini(tmp_path, SMALL_RUN)
        run_cli("train", "-c", str(cfg))
        first = json.loads((tmp_path / "report.json").read_text())
        ckpt = (tmp_path / "run.ckpt").read_bytes()
        run_cli("train", "-c", str(cfg))
        second = json.loads((tmp_path / "report.json").read_text())
        first.pop("wall_time_ms")
        second.pop("wall_time_ms")
        assert first == second
        assert ckpt == (tmp_path / "run.ckpt").read_bytes()


class TestCompareCommand:
    def test_three_sections_and_summary(self, tmp_path, capsys):
        cfg = write_ini(tmp_path, SMALL_RUN)
        assert run_cli("compare", "-c", str(cfg)) == EXIT_OK
        captured = capsys.readouterr()
        sections = split_sections(captured.out)
        counts = {name: len(section_losses(sections[name]))
                  for name in ("melded", "explicit_fp8", "explicit_full")}
        assert counts == {"melded": 5, "explicit_fp8": 5, "explicit_full": 5}
        assert (tmp_path / "compare.csv").read_text() == captured.out
        summary = sections["summary"][0]
        fields = dict(part.split("=") for part in summary.split()[1:])
        assert int(fields["melded_quantize_ops"]) < int(
            fields["explicit_quantize_ops"])
        assert float(fields["ratio"]) < 1.0

    def test_degenerate_mode_makes_melded_match_the_oracle(self, tmp_path, capsys):
        # all rows folded every step, nothing quantized: the melded arm
        # must walk the explicit full-precision trajectory
        cfg = write_ini(tmp_path, """
            [run]
            steps = 25
            batch = 4
            rank = 3
            top_k = 8
            dims = 6, 8
            backbone_std = 0.05
            teacher_gap = 1e-3
            label_noise = 0.0
            quantize = false
            lr = 1e-3
        """)
        assert run_cli("compare", "-c", str(cfg)) == EXIT_OK
        sections = split_sections(capsys.readouterr().out)
        melded = section_losses(sections["melded"])
        oracle = section_losses(sections["explicit_full"])
        assert len(melded) == len(oracle) == 25
        for a, b in zip(melded, oracle):
            assert a == pytest.approx(b, rel=1e-8)

    def test_thread_cap_does_not_change_the_document(self, tmp_path, capsys, monkeypatch):
        cfg = write_ini(tmp_path, SMALL_RUN)
        run_cli("compare", "-c", str(cfg))
        base = capsys.readouterr().out
        monkeypatch.setenv("FALQON_THREADS", "1")
        run_cli("compare", "-c", str(cfg))
        assert capsys.readouterr().out == base

    def test_garbage_thread_cap_is_a_config_error(self, tmp_path, capsys, monkeypatch):
        cfg = write_ini(tmp_path, SMALL_RUN)
        monkeypatch.setenv("FALQON_THREADS", "banana")
        assert run_cli("compare", "-c", str(cfg)) == EXIT_CONFIG
        monkeypatch.setenv("FALQON_THREADS", "0")
        assert run_cli("compare", "-c", str(cfg)) == EXIT_CONFIG

    # errstate is thread-local and the arms run in worker threads
    @pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
    def test_divergence_exits_2(self, tmp_path):
        cfg = write_ini(
            tmp_path,
            small_run(lr="1e160", steps="20", quantize="false"),
        )
        with np.errstate(over="ignore"):
            assert run_cli("compare", "-c", str(cfg)) == EXIT_NUMERIC


class TestFp8TableCommand:
    def test_e4m3_table(self, capsys):
        assert run_cli("fp8-table", "--format", "e4m3") == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "bits,value"
        assert len(lines) == 257
        assert lines[1] == "0x00,0.0"
        assert any(line.endswith(",448.0") for line in lines)

    def test_e5m2_table_has_its_max(self, capsys):
        assert run_cli("fp8-table", "--format", "e5m2") == EXIT_OK
        out = capsys.readouterr().out
        assert ",57344.0" in out

    def test_invalid_format_exits_1(self):
        with pytest.raises(SystemExit) as err:
            run_cli("fp8-table", "--format", "e2m5")
        assert err.value.code == EXIT_CONFIG


class TestSvdCheckCommand:
    def test_reports_ok_against_the_dense_oracle(self, capsys):
        assert run_cli("svd-check", "--m", "20", "--n", "12",
                       "--r", "4", "--seed", "1") == EXIT_OK
        out = capsys.readouterr().out
        assert "status=ok" in out

    def test_rank_out_of_range_exits_1(self, capsys):
        assert run_cli("svd-check", "--m", "4", "--n", "4",
                       "--r", "9") == EXIT_CONFIG
        assert "error" in capsys.readouterr().err


class TestOverheadCommand:
    def test_default_curve_and_crossover_column(self, capsys):
        assert run_cli("overhead") == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "rank,ratio,crossover"
        rows = [line.split(",") for line in lines[1:]]
        crossovers = {int(r[2]) for r in rows}
        assert crossovers == {4096}
        assert 2048 <= crossovers.pop() <= 8192
        ratios = [float(r[1]) for r in rows]
        assert ratios == sorted(ratios)

    def test_params_file_recalibrates(self, tmp_path, capsys):
        cfg = write_ini(tmp_path, """
            [cost]
            fp16_throughput = 5.013e13
        """)
        assert run_cli("overhead", "--params", str(cfg)) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        crossover = int(lines[1].split(",")[2])
        assert crossover != 4096  # slower chip, earlier break-even
        assert crossover < 4096

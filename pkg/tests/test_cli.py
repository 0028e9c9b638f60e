"""Command-line interface: subcommands, exit codes, outputs."""

import csv
import json
import os

import numpy as np
import pytest

from splatface.cli import apply_thread_cap, main


def _run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def _last_json(stdout: str) -> dict:
    return json.loads(stdout.strip().splitlines()[-1])


# -- exit codes ----------------------------------------------------------------------

def test_unknown_subcommand_exits_1():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1


def test_unknown_flag_exits_1():
    with pytest.raises(SystemExit) as exc:
        main(["render", "--nope"])
    assert exc.value.code == 1


def test_missing_required_option_exits_1(capsys):
    code, _, err = _run(capsys, ["render"])
    assert code == 1
    assert "--checkpoint" in err


def test_runtime_error_exits_2(capsys, tmp_path):
    code, _, err = _run(capsys, ["render", "--checkpoint", str(tmp_path / "no.esgc"),
                                 "--manifest", str(tmp_path / "no.json"),
                                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert err.startswith("error:")


# -- config file ----------------------------------------------------------------------

def test_config_file_unknown_key_rejected(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bench": {"splats": "100", "bogus_key": 1}}))
    code, _, err = _run(capsys, ["bench", "--config", str(cfg)])
    assert code == 1
    assert "bogus_key" in err


def test_config_file_values_used_and_flags_override(capsys, tmp_path, tiny_pipeline):
    cfg = tmp_path / "cfg.json"
    out_a = str(tmp_path / "a")
    cfg.write_text(json.dumps({"render": {
        "checkpoint": tiny_pipeline["neutral"],
        "manifest": tiny_pipeline["manifest"],
        "out": out_a, "frames": "0"}}))
    code, stdout, _ = _run(capsys, ["render", "--config", str(cfg)])
    assert code == 0
    assert _last_json(stdout)["out"] == os.path.abspath(out_a)

    out_b = str(tmp_path / "b")
    code, stdout, _ = _run(capsys, ["render", "--config", str(cfg),
                                    "--out", out_b])
    assert code == 0
    assert _last_json(stdout)["out"] == os.path.abspath(out_b)


def test_default_config_template_is_exhaustive():
    from splatface.cli import COMMAND_DEFAULTS
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    with open(os.path.join(here, "configs", "default.json")) as f:
        doc = json.load(f)
    assert set(doc) == set(COMMAND_DEFAULTS)
    for cmd, section in doc.items():
        assert set(section) == set(COMMAND_DEFAULTS[cmd]), cmd


# -- train ordering and capability ------------------------------------------------------

def test_emotion_stage_without_neutral_checkpoint_exits_2(capsys, tiny_pipeline,
                                                          tmp_path):
    code, _, err = _run(capsys, ["train", "--stage", "emotion",
                                 "--data", tiny_pipeline["data"],
                                 "--out", str(tmp_path), "--iterations", "1"])
    assert code == 2
    assert "ordering" in err


def test_stylization_refuses_neutral_checkpoint(capsys, tiny_pipeline, tmp_path):
    code, _, err = _run(capsys, ["train", "--stage", "stylization",
                                 "--data", tiny_pipeline["data"],
                                 "--out", str(tmp_path), "--iterations", "1",
                                 "--init-from", tiny_pipeline["neutral"]])
    assert code == 2
    assert "ordering" in err


def test_style_render_from_pre_style_checkpoint_exits_2(capsys, tiny_pipeline,
                                                        tmp_path):
    code, _, err = _run(capsys, ["render", "--checkpoint", tiny_pipeline["emotion"],
                                 "--manifest", tiny_pipeline["manifest"],
                                 "--out", str(tmp_path), "--style", "style0"])
    assert code == 2
    assert "stylization" in err


# -- render ------------------------------------------------------------------------------

def test_render_writes_frames_and_metrics(capsys, tiny_pipeline, tmp_path):
    out = str(tmp_path / "r")
    code, stdout, _ = _run(capsys, ["render",
                                    "--checkpoint", tiny_pipeline["stylization"],
                                    "--manifest", tiny_pipeline["manifest"],
                                    "--out", out, "--frames", "0,2"])
    assert code == 0
    summary = _last_json(stdout)
    assert summary["frames"] == 2
    assert os.path.exists(os.path.join(out, "frame_0000.png"))
    assert os.path.exists(os.path.join(out, "frame_0002.png"))
    rows = list(csv.DictReader(open(os.path.join(out, "metrics.csv"))))
    assert len(rows) == 2
    assert {"frame", "psnr", "ssim", "lmd"} <= set(rows[0])
    assert set(summary["metrics"]) == {"PSNR", "SSIM", "LMD"}


def test_render_orbit_view_count(capsys, tiny_pipeline, tmp_path):
    out = str(tmp_path / "orbit")
    code, stdout, _ = _run(capsys, ["render",
                                    "--checkpoint", tiny_pipeline["neutral"],
                                    "--manifest", tiny_pipeline["manifest"],
                                    "--out", out, "--orbit", "8"])
    assert code == 0
    assert _last_json(stdout)["views"] == 8
    assert len([f for f in os.listdir(out) if f.startswith("orbit_")]) == 8


def test_render_is_deterministic(capsys, tiny_pipeline, tmp_path):
    args = ["render", "--checkpoint", tiny_pipeline["stylization"],
            "--manifest", tiny_pipeline["manifest"], "--frames", "1",
            "--style", "style0"]
    outs = []
    for sub in ("d1", "d2"):
        out = str(tmp_path / sub)
        assert _run(capsys, args + ["--out", out])[0] == 0
        outs.append(open(os.path.join(out, "frame_0001.png"), "rb").read())
    assert outs[0] == outs[1]


# -- interpolate ---------------------------------------------------------------------------

def test_interpolate_emits_frame_per_alpha(capsys, tiny_pipeline, tmp_path):
    out = str(tmp_path / "interp")
    code, stdout, _ = _run(capsys, ["interpolate",
                                    "--checkpoint", tiny_pipeline["emotion"],
                                    "--manifest", tiny_pipeline["manifest"],
                                    "--out", out, "--what", "emotion",
                                    "--pair", "happy,sad",
                                    "--alphas", "1,0.75,0.5,0.25,0",
                                    "--frame", "1"])
    assert code == 0
    summary = _last_json(stdout)
    assert summary["alphas"] == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert len(summary["frames"]) == 5
    assert all(os.path.exists(p) for p in summary["frames"])
    assert summary["mean_abs_distance_from_first_endpoint"][0] == 0.0


def test_interpolate_style_needs_stage3(capsys, tiny_pipeline, tmp_path):
    code, _, err = _run(capsys, ["interpolate",
                                 "--checkpoint", tiny_pipeline["emotion"],
                                 "--manifest", tiny_pipeline["manifest"],
                                 "--out", str(tmp_path), "--what", "style"])
    assert code == 2
    assert "stylization" in err


# -- attn-viz -------------------------------------------------------------------------------

def test_attn_viz_outputs(capsys, tiny_pipeline, tmp_path):
    out = str(tmp_path / "attn")
    code, stdout, _ = _run(capsys, ["attn-viz",
                                    "--checkpoint", tiny_pipeline["emotion"],
                                    "--manifest", tiny_pipeline["manifest"],
                                    "--out", out, "--layer", "ega",
                                    "--token", "emotion", "--frame", "1"])
    assert code == 0
    summary = _last_json(stdout)
    assert os.path.exists(summary["overlay"])
    rows = list(csv.reader(open(summary["weights_csv"])))
    assert rows[0] == ["splat_index", "weight"]
    assert len(rows) == 1 + 120  # one row per splat
    weights = np.array([float(r[1]) for r in rows[1:]])
    assert np.all(weights >= 0) and np.all(weights <= 1.0)
    assert set(summary["region_means"]) == {"mouth", "eyes", "other"}


def test_attn_viz_unknown_token_exits_2(capsys, tiny_pipeline, tmp_path):
    code, _, err = _run(capsys, ["attn-viz",
                                 "--checkpoint", tiny_pipeline["emotion"],
                                 "--manifest", tiny_pipeline["manifest"],
                                 "--out", str(tmp_path), "--layer", "aga",
                                 "--token", "nonsense"])
    assert code == 2
    assert "nonsense" in err


# -- bench ---------------------------------------------------------------------------------

def test_bench_emits_csv_and_subquadratic_scaling(capsys):
    code, stdout, _ = _run(capsys, ["bench", "--splats", "100,400",
                                    "--size", "48", "--frames", "50"])
    assert code == 0
    rows = list(csv.reader(stdout.strip().splitlines()))
    assert rows[0] == ["splats", "size", "median_ms", "fps"]
    assert [r[0] for r in rows[1:]] == ["100", "400"]
    t1, t4 = float(rows[1][2]), float(rows[2][2])
    assert t4 < 8 * t1  # the command itself exits 2 when this fails


def test_bench_rejects_too_few_frames(capsys):
    code, _, err = _run(capsys, ["bench", "--splats", "100", "--frames", "10"])
    assert code == 1
    assert "50" in err


# -- environment ----------------------------------------------------------------------------

def test_thread_cap_env(monkeypatch):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("ESG_THREADS", "2")
    apply_thread_cap()
    assert os.environ["OMP_NUM_THREADS"] == "2"
    assert os.environ["OPENBLAS_NUM_THREADS"] == "2"

import json
import shutil

import numpy as np
import pytest

from ebt import cli, pipeline
from ebt.config import ConfigError
from ebt.metrics import EvalReport
from ebt.raster import load_ppm, save_ppm
from ebt.storage import load_landmarks
from ebt.synth_data import gen_face_basis, gen_phonemes, gen_speakers


def run_cli(*args):
    return cli.main([str(a) for a in args])


def write_config(path, cfg):
    path.write_text(cfg.to_text())
    return path


def frames_of(proj, sub="frames"):
    return [p.read_bytes() for p in sorted(proj.path("output", sub).glob("*.ppm"))]


# ---------------------------------------------------------------------------
# stage bookkeeping


def test_downstream_closure():
    assert pipeline.downstream("synth") == list(pipeline.STAGES[1:])
    assert pipeline.downstream("train-a2e") == ["drive", "post", "eval"]
    assert pipeline.downstream("eval") == []


def test_stage_graph_is_acyclic_and_ordered():
    for i, s in enumerate(pipeline.STAGES):
        assert all(pipeline.STAGES.index(d) < i for d in pipeline.REQUIRES[s])


def test_world_json_round_trip():
    b = gen_face_basis(0)
    ph, sp = gen_phonemes(1, b), gen_speakers(2, b, 4)
    ph2, sp2 = pipeline.world_from_json(pipeline.world_to_json((b.dim_s, b.dim_e), ph, sp))
    for a, c in zip(ph + sp, ph2 + sp2):
        for k, v in vars(a).items():
            np.testing.assert_array_equal(getattr(c, k), v)


def test_drive_before_training_exits_4(tmp_path, tiny_config):
    cfg = write_config(tmp_path / "c.cfg", tiny_config)
    proj = tmp_path / "p"
    assert run_cli("synth", "--project", proj, "--config", cfg) == cli.EXIT_OK
    assert run_cli("drive", "--project", proj) == cli.EXIT_STAGE
    assert run_cli("train-a2e", "--project", proj) == cli.EXIT_STAGE
    assert run_cli("eval", "--project", proj) == cli.EXIT_STAGE


def test_no_project_exits_4(tmp_path):
    assert run_cli("fitface", "--project", tmp_path / "none") == cli.EXIT_STAGE


def test_usage_errors_exit_2(tmp_path):
    assert run_cli("bogus", "--project", tmp_path) == cli.EXIT_USAGE
    assert run_cli("synth") == cli.EXIT_USAGE


def test_bad_config_exits_3(tmp_path):
    (tmp_path / "c.cfg").write_text("no_such_key = 1\n")
    assert run_cli("synth", "--project", tmp_path / "p", "--config", tmp_path / "c.cfg") == cli.EXIT_CONFIG
    (tmp_path / "d.cfg").write_text("k = -2\n")
    assert run_cli("synth", "--project", tmp_path / "p", "--config", tmp_path / "d.cfg") == cli.EXIT_CONFIG


def test_bad_thread_count_exits_3(tmp_path, tiny_config, monkeypatch):
    cfg = write_config(tmp_path / "c.cfg", tiny_config)
    assert run_cli("synth", "--project", tmp_path / "p", "--config", cfg) == cli.EXIT_OK
    monkeypatch.setenv("EBT_THREADS", "many")
    assert run_cli("fitface", "--project", tmp_path / "p") == cli.EXIT_CONFIG


def test_manifest_reset_and_missing_files(tmp_path, tiny_config):
    proj = pipeline.cmd_synth(tmp_path, tiny_config)
    pipeline.cmd_fitface(proj)
    assert proj.done("fitface")
    pipeline.cmd_synth(tmp_path, tiny_config)  # re-synth before training is allowed
    proj = pipeline.open_project(tmp_path)
    assert proj.done("synth") and not proj.done("fitface")
    proj.path("footage", "landmarks.txt").unlink()
    with pytest.raises(pipeline.MissingStageError, match="missing"):
        pipeline.cmd_fitface(proj)


def test_manifest_lists_existing_files(tiny_project):
    proj, _ = tiny_project
    manifest = json.loads(proj.path("manifest.json").read_text())
    assert all(manifest["stages"].values())
    for files in manifest["files"].values():
        assert all(proj.path(f).exists() for f in files)


# ---------------------------------------------------------------------------
# config snapshot


def test_config_frozen_after_training(tiny_project, tmp_path):
    proj, _ = tiny_project
    other = proj.config.replace(a2e_hidden=24)
    with pytest.raises(ConfigError, match="a2e_hidden"):
        pipeline.open_project(proj.root, other)
    with pytest.raises(ConfigError, match="frozen"):
        pipeline.cmd_synth(proj.root, other)
    cfg = write_config(tmp_path / "o.cfg", other)
    assert run_cli("post", "--project", proj.root, "--config", cfg) == cli.EXIT_CONFIG
    assert run_cli("post", "--project", proj.root, "--seed", 99) == cli.EXIT_CONFIG


def test_model_dims_checked_against_config(tiny_project, tmp_path):
    proj, _ = tiny_project
    copy = tmp_path / "copy"
    shutil.copytree(proj.root, copy)
    manifest = json.loads((copy / "manifest.json").read_text())
    manifest["config"]["a2e_hidden"] = 24
    (copy / "manifest.json").write_text(json.dumps(manifest))
    assert run_cli("drive", "--project", copy) == cli.EXIT_CONFIG


def test_corrupt_model_exits_1(tiny_project, tmp_path):
    proj, _ = tiny_project
    copy = tmp_path / "copy"
    shutil.copytree(proj.root, copy)
    raw = (copy / "models" / "a2e.ebtm").read_bytes()
    (copy / "models" / "a2e.ebtm").write_bytes(raw[:-3])
    assert run_cli("drive", "--project", copy) == cli.EXIT_IO


# ---------------------------------------------------------------------------
# outputs and determinism


def test_run_all_outputs(tiny_project):
    proj, report = tiny_project
    cfg = proj.config
    frames = [load_ppm(p) for p in sorted(proj.path("output", "frames").glob("*.ppm"))]
    n_out = int(np.floor(cfg.drive_phonemes * 0.2 * cfg.fps + 1e-9))
    assert len(frames) == n_out and frames[0].shape == (cfg.frame_size, cfg.frame_size, 3)
    assert isinstance(report, EvalReport) and report.n_frames == n_out
    assert EvalReport.from_text(proj.path("output", "report.txt").read_text()) == report
    assert proj.path("output", "report.csv").read_text().startswith("sequence,")
    base = pipeline.read_stats(proj.path("output", "baseline.txt"))
    assert {"untrained_e_exp", "untrained_e_ldmk", "oracle_e_exp"} <= set(base)
    assert base["oracle_e_exp"] < 1e-12  # the phoneme oracle is exact on synthetic audio


def test_raw_frames_keep_the_background(tiny_project):
    proj, _ = tiny_project
    raw = [load_ppm(p) for p in sorted(proj.path("output", "raw").glob("*.ppm"))]
    plan = [int(v) for v in proj.path("output", "plan.txt").read_text().split()]
    src = pipeline.footage_frame_paths(proj)
    # the corner is far from the mouth crop
    for t in (0, len(raw) - 1):
        np.testing.assert_array_equal(raw[t][:4, :4], load_ppm(src[plan[t]])[:4, :4])


def test_drive_is_bit_identical_on_rerun(tiny_project):
    proj, _ = tiny_project
    before_raw, before = frames_of(proj, "raw"), frames_of(proj)
    expr = proj.path("output", "expression.txt").read_text()
    pipeline.cmd_drive(proj)
    pipeline.cmd_post(proj)
    pipeline.cmd_eval(proj)
    assert frames_of(proj, "raw") == before_raw and frames_of(proj) == before
    assert proj.path("output", "expression.txt").read_text() == expr


def test_thread_count_does_not_change_output(tiny_project, monkeypatch):
    proj, _ = tiny_project
    before = frames_of(proj, "raw")
    monkeypatch.setenv("EBT_THREADS", "3")
    pipeline.cmd_drive(proj)
    assert frames_of(proj, "raw") == before


def test_full_runs_are_byte_identical(tiny_project, tiny_config, tmp_path):
    proj, _ = tiny_project
    assert run_cli("all", "--project", tmp_path / "again", "--config", write_config(tmp_path / "c.cfg", tiny_config)) == 0
    for sub in ("models", "output", "output/frames", "fit"):
        for p in sorted(proj.path(sub).glob("*.*")):
            if p.name == "source.txt":  # holds an absolute path
                continue
            assert (tmp_path / "again" / sub / p.name).read_bytes() == p.read_bytes(), p


def test_external_source_audio_skips_scoring(tiny_project, tmp_path):
    proj, _ = tiny_project
    copy = tmp_path / "copy"
    shutil.copytree(proj.root, copy)
    wav = tmp_path / "other.wav"
    shutil.copy(copy / "heldout" / sorted(p.name for p in (copy / "heldout").iterdir())[0] / "audio.wav", wav)
    assert run_cli("drive", "--project", copy, "--source-audio", wav) == 0
    assert run_cli("post", "--project", copy) == 0
    assert run_cli("eval", "--project", copy) == 0
    assert not (copy / "output" / "report.txt").exists()
    assert run_cli("post", "--project", copy, "--source-audio", wav) == cli.EXIT_CONFIG


def test_wrong_sample_rate_rejected(tiny_project, tmp_path):
    from ebt.audio_features import AudioClip, save_wav

    proj, _ = tiny_project
    copy = tmp_path / "copy"
    shutil.copytree(proj.root, copy)
    save_wav(tmp_path / "x.wav", AudioClip(np.zeros(8000, dtype=np.float32), 8000))
    assert run_cli("drive", "--project", copy, "--source-audio", tmp_path / "x.wav") == cli.EXIT_IO


# ---------------------------------------------------------------------------
# footage ingestion


def test_ingest_external_footage(tiny_project, tmp_path):
    proj, _ = tiny_project
    copy = tmp_path / "copy"
    shutil.copytree(proj.root, copy)
    ext = tmp_path / "ext"
    ext.mkdir()
    src = pipeline.footage_frame_paths(proj)
    lms = load_landmarks(proj.path("footage", "landmarks.txt"), proj.config.n_landmarks)
    keep = list(range(0, len(src), 2))
    for i, j in enumerate(keep):
        # mirror the frames so they are not the synthetic ones
        save_ppm(ext / f"img_{i:03d}.ppm", load_ppm(src[j])[:, ::-1])
    mirrored = lms[keep].copy()
    mirrored[..., 0] = proj.config.frame_size - 1 - mirrored[..., 0]
    (tmp_path / "lm.txt").write_text("".join(" ".join(repr(float(v)) for v in row.reshape(-1)) + "\n" for row in mirrored))

    assert run_cli("ingest", "--project", copy, "--frames", ext, "--landmarks", tmp_path / "lm.txt") == 0
    p = pipeline.open_project(copy)
    assert pipeline.footage_is_external(p) and p.done("train-a2e") and not p.done("fitface")
    assert len(pipeline.footage_frame_paths(p)) == len(keep)
    for stage in ("fitface", "train-render", "drive", "post", "eval"):
        assert run_cli(stage, "--project", copy) == 0, stage
    rep = EvalReport.from_text((copy / "output" / "report.txt").read_text())
    assert np.isnan(rep.psnr_db) and np.isfinite(rep.e_ldmk)


def test_ingest_needs_both_inputs(tiny_project, tmp_path):
    proj, _ = tiny_project
    assert run_cli("ingest", "--project", proj.root, "--frames", tmp_path) == cli.EXIT_USAGE


def test_ingest_rejects_count_mismatch(tiny_project, tmp_path):
    proj, _ = tiny_project
    copy = tmp_path / "copy"
    shutil.copytree(proj.root, copy)
    ext = tmp_path / "ext"
    ext.mkdir()
    for j, p in enumerate(pipeline.footage_frame_paths(proj)[:3]):
        shutil.copy(p, ext / f"{j}.ppm")
    lm = proj.path("footage", "landmarks.txt").read_text().splitlines()[:2]
    (tmp_path / "lm.txt").write_text("\n".join(lm) + "\n")
    assert run_cli("ingest", "--project", copy, "--frames", ext, "--landmarks", tmp_path / "lm.txt") == cli.EXIT_IO
    assert pipeline.open_project(copy).done("fitface")  # nothing changed

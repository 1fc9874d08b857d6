import csv
import json
import math
import os

import numpy as np
import pytest

from pcenhance.color import frame_to_yuv
from pcenhance.dae import DaeConfig, DAENet, save_dae
from pcenhance.dge import DgeConfig, DGENet, save_dge
from pcenhance.errors import AgreementError, FrameError, PcEnhanceError
from pcenhance.harness import cli
from pcenhance.harness import pipeline as pl
from pcenhance.harness.codec import DegradationConfig
from pcenhance.harness.pipeline import PipelineConfig, dae_training_samples, run_pipeline
from pcenhance.harness.synthetic import make_synthetic_sequence
from pcenhance.ply import read_ply, write_ply
from pcenhance.runtime import ENV_VAR
from pcenhance.voxel import VoxelFrame


@pytest.fixture(scope="module")
def small_seq():
    return make_synthetic_sequence("moving-cube", 3, 5, seed=4, cube_side=8)


def test_two_frame_smoke():
    seq = make_synthetic_sequence("moving-cube", 2, 5, seed=0, cube_side=8)
    run = run_pipeline(seq, DGENet(DgeConfig.toy()), DAENet(DaeConfig.toy()),
                       PipelineConfig(DegradationConfig(2, 16.0)))
    assert len(run.records) == 2
    for r, f in zip(run.records, seq):
        assert r.n_enhanced == r.n_points == len(f) and r.geometry_agreement
        assert r.n_degraded < r.n_points


def test_lossless_configuration_reports_infinite_psnr(small_seq):
    run = run_pipeline(small_seq, None, None, PipelineConfig(DegradationConfig(1, 1.0)))
    assert np.all(np.isinf(run.column("d1_enhanced")))
    assert np.all(np.isinf(run.column("y_psnr")))
    assert not run.column("y_mse_decoded").any()


def test_bits_add_up(small_seq):
    run = run_pipeline(small_seq, None, None, PipelineConfig(DegradationConfig(2, 8.0), use_dae=False))
    per_frame = run.column("geometry_bits") + run.column("attribute_bits")
    assert run.total_bits == pytest.approx(per_frame.sum(), rel=1e-12)
    assert run.bpip() == pytest.approx(per_frame.sum() / run.column("n_points").sum(), rel=1e-12)
    np.testing.assert_allclose(run.column("bpip"), per_frame / run.column("n_points"), rtol=1e-12)


def test_without_dge_colors_land_on_decoded_geometry(small_seq):
    run = run_pipeline(small_seq, DGENet(DgeConfig.toy()), None, PipelineConfig(use_dge=False, use_dae=False))
    assert np.array_equal(run.column("n_enhanced"), run.column("n_degraded"))
    np.testing.assert_array_equal(run.column("d1_enhanced"), run.column("d1_degraded"))
    assert run.checkpoints == {"dge": None, "dae": None}


def test_untrained_attribute_stage_is_transparent(small_seq):
    # a freshly built DAE emits zero offsets, whichever previous frame it sees
    cfg = PipelineConfig(keep_frames=True)
    a = run_pipeline(small_seq, None, DAENet(DaeConfig.toy()), cfg)
    b = run_pipeline(small_seq, None, None, PipelineConfig(keep_frames=True, prev_source="enhanced"))
    np.testing.assert_array_equal(a.column("y_psnr"), b.column("y_psnr"))
    np.testing.assert_array_equal(a.column("y_mse_enhanced"), a.column("y_mse_decoded"))
    assert all(np.array_equal(x.attrs, y.attrs) for x, y in zip(a.frames, b.frames))


def test_checkpoint_paths_and_models_agree(tmp_path, small_seq):
    dge, dae = DGENet(DgeConfig.toy(seed=2)), DAENet(DaeConfig.toy(seed=2))
    dae.aoe.weight.data = np.random.default_rng(0).normal(scale=0.1, size=dae.aoe.weight.data.shape)
    save_dge(tmp_path / "g.bin", dge)
    save_dae(tmp_path / "a.bin", dae)
    by_obj = run_pipeline(small_seq, dge, dae)
    by_path = run_pipeline(small_seq, str(tmp_path / "g.bin"), str(tmp_path / "a.bin"))
    for col in ("d1_enhanced", "y_psnr", "yuv_psnr"):
        np.testing.assert_array_equal(by_obj.column(col), by_path.column(col))
    assert by_path.checkpoints["dge"].endswith("g.bin")


def test_stage_failures_name_the_frame(small_seq, monkeypatch):
    def broken(*a, **k):
        raise PcEnhanceError("boom")

    monkeypatch.setattr(pl, "da_knn_recolor", broken)
    with pytest.raises(FrameError) as err:
        run_pipeline(small_seq, None, None, PipelineConfig(use_dae=False))
    assert err.value.frame_index == 0 and err.value.stage == "recolor"
    assert isinstance(err.value.__cause__, PcEnhanceError)


def test_disagreeing_geometry_is_caught(small_seq, monkeypatch):
    real = pl.enhance_geometry
    calls = []

    def flaky(dge, prev, curr, orig, factor):
        out = real(dge, prev, curr, orig, factor)
        calls.append(1)
        if len(calls) == 4:                      # decoder side of frame 1
            out = VoxelFrame(out.coords[:-1], bit_depth=out.bit_depth)
        return out

    monkeypatch.setattr(pl, "enhance_geometry", flaky)
    with pytest.raises(FrameError) as err:
        run_pipeline(small_seq, DGENet(DgeConfig.toy()), None, PipelineConfig(use_dae=False))
    assert err.value.frame_index == 1 and err.value.stage == "geometry"
    assert isinstance(err.value.__cause__, AgreementError)


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(prev_source="future")


def test_attribute_samples_without_geometry_network(small_seq):
    samples = dae_training_samples(small_seq, None, qstep=1.0)
    for t, s in enumerate(samples, start=1):
        np.testing.assert_array_equal(s.target.attrs, frame_to_yuv(small_seq[t]).attrs)
        np.testing.assert_array_equal(s.curr.attrs, s.target.attrs)


# ---- command line

def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("seq")
    assert cli.main(["synth", "--frames", "3", "--bit-depth", "5", "--seed", "1", "--out-dir", str(d)]) == 0
    return d


def test_synth_writes_frames(seq_dir):
    paths = sorted(os.listdir(seq_dir))
    assert paths == [f"moving-cube_{i:04d}.ply" for i in range(3)]
    ref = make_synthetic_sequence("moving-cube", 3, 5, seed=1)
    f = read_ply(seq_dir / paths[1], 5)
    assert np.array_equal(f.coords, ref[1].coords) and np.array_equal(f.attrs, ref[1].attrs)


def test_eval_and_degrade(tmp_path, seq_dir):
    frame = str(seq_dir / "moving-cube_0000.ply")
    assert cli.main(["eval", "--ref", frame, "--test", frame, "--bitdepth", "5", "--attrs",
                     "--out", str(tmp_path / "e.csv")]) == 0
    row = _rows(tmp_path / "e.csv")[0]
    assert list(row) == list(cli.EVAL_HEADER)
    assert all(math.isinf(float(v)) for v in row.values())
    assert cli.main(["degrade", "--input", frame, "--out-dir", str(tmp_path / "d"), "--bit-depth", "5",
                     "--preset", "R03", "--csv", str(tmp_path / "d.csv")]) == 0
    out = read_ply(tmp_path / "d" / "moving-cube_0000.ply", 5)
    assert np.all(out.coords % 4 == 0)
    assert float(_rows(tmp_path / "d.csv")[0]["bits"]) > 0


def test_bd_of_identical_curves(tmp_path):
    path = tmp_path / "rd.csv"
    path.write_text("bpip,d1\n0.5,30\n1.0,34\n2.0,37\n4.0,39\n")
    assert cli.main(["bd", "--anchor", str(path), "--test", str(path), "--out", str(tmp_path / "bd.csv")]) == 0
    row = _rows(tmp_path / "bd.csv")[0]
    assert abs(float(row["bd_rate_percent"])) < 1e-9 and abs(float(row["bd_quality_db"])) < 1e-9


def test_recolor_command(tmp_path, seq_dir):
    frame = str(seq_dir / "moving-cube_0001.ply")
    out = tmp_path / "r.ply"
    assert cli.main(["recolor", "--geom", frame, "--source", frame, "--bit-depth", "5", "--out", str(out),
                     "--correlation-csv", str(tmp_path / "c.csv")]) == 0
    a, b = read_ply(frame, 5), read_ply(out, 5)
    assert np.array_equal(a.attrs, b.attrs)
    assert (tmp_path / "c.csv").read_text().startswith("delta_geo,delta_att")


def test_train_enhance_and_pipeline_commands(tmp_path, seq_dir):
    g, a = str(tmp_path / "g.bin"), str(tmp_path / "a.bin")
    common = ["--synthetic-count", "1", "--frames", "2", "--bit-depth", "5", "--epochs", "1"]
    assert cli.main(["train-dge", *common, "--out", g]) == 0
    assert cli.main(["train-dae", *common, "--dge", g, "--out", a]) == 0
    csv_path = str(tmp_path / "p.csv")
    assert cli.main(["pipeline", "--seq", str(seq_dir), "--bit-depth", "5", "--dge", g, "--dae", a,
                     "--csv", csv_path]) == 0
    rows = _rows(csv_path)
    assert len(rows) == 3 and list(rows[0]) == list(pl.RECORD_FIELDS)
    echo = json.loads(open(csv_path + ".config.json").read())
    assert echo["checkpoints"] == {"dge": g, "dae": a}

    f0, f1 = str(seq_dir / "moving-cube_0000.ply"), str(seq_dir / "moving-cube_0001.ply")
    n = len(read_ply(f1, 5))
    assert cli.main(["dge", "enhance", "--prev", f0, "--curr", f1, "--ckpt", g, "--n-points", str(n),
                     "--stride", "2", "--bit-depth", "5", "--out", str(tmp_path / "up.ply")]) == 0
    assert len(read_ply(tmp_path / "up.ply", 5)) == n
    assert cli.main(["dae", "enhance", "--prev", f0, "--curr", f1, "--ckpt", a, "--bit-depth", "5",
                     "--out", str(tmp_path / "att.ply")]) == 0
    assert np.array_equal(read_ply(tmp_path / "att.ply", 5).coords, read_ply(f1, 5).coords)

    out_dir = tmp_path / "enh"
    assert cli.main(["enhance", "--seq", str(seq_dir), "--bit-depth", "5", "--dge", g, "--no-dae",
                     "--out-dir", str(out_dir), "--csv", str(tmp_path / "e.csv")]) == 0
    assert sorted(os.listdir(out_dir)) == [f"frame_{i:04d}.ply" for i in range(3)]


def test_config_file_supplies_defaults(tmp_path, seq_dir):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[pipeline]\nseq = {seq_dir}\nbit-depth = 5\nno_dge = true\nno-dae = yes\n"
                   f"preset = R02\ncsv = {tmp_path / 'p.csv'}\n")
    assert cli.main(["pipeline", "--config", str(ini)]) == 0
    rows = _rows(tmp_path / "p.csv")
    assert all(r["n_enhanced"] == r["n_degraded"] for r in rows)
    # command-line flags still override the file
    assert cli.main(["pipeline", "--config", str(ini), "--csv", str(tmp_path / "q.csv"), "--preset", "R05"]) == 0
    assert [r["n_degraded"] for r in _rows(tmp_path / "q.csv")] != [r["n_degraded"] for r in rows]


@pytest.mark.parametrize("text", ["[teleport]\nx = 1\n", "[pipeline]\nwarp-factor = 9\n",
                                  "[pipeline]\nno-dge = maybe\n"])
def test_bad_config_files_are_rejected(tmp_path, text):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    with pytest.raises(SystemExit) as err:
        cli.main(["pipeline", "--config", str(ini)])
    assert err.value.code == 2


def test_deterministic_flag_sets_environment(tmp_path, seq_dir, monkeypatch):
    monkeypatch.delenv(ENV_VAR, raising=False)
    frame = str(seq_dir / "moving-cube_0000.ply")
    cli.main(["eval", "--ref", frame, "--test", frame, "--bitdepth", "5", "--deterministic", "off",
              "--out", str(tmp_path / "e.csv")])
    assert os.environ[ENV_VAR] == "0"


def test_library_errors_become_exit_status_one(tmp_path, capsys):
    bad = tmp_path / "bad.ply"
    bad.write_text("not a ply file\n")
    assert cli.main(["eval", "--ref", str(bad), "--test", str(bad)]) == 1
    assert "pcenhance: error" in capsys.readouterr().err


def test_frames_written_by_the_library_load_in_the_cli(tmp_path):
    f = make_synthetic_sequence("textured-wave", 2, 5, seed=0)[0]
    write_ply(tmp_path / "w.ply", f)
    assert cli.main(["eval", "--ref", str(tmp_path / "w.ply"), "--test", str(tmp_path / "w.ply"),
                     "--bitdepth", "5", "--out", str(tmp_path / "o.csv")]) == 0


def test_unwritable_output_is_reported(tmp_path, seq_dir, capsys):
    frame = str(seq_dir / "moving-cube_0000.ply")
    out = str(tmp_path / "missing" / "r.ply")
    assert cli.main(["recolor", "--geom", frame, "--source", frame, "--bit-depth", "5", "--out", out]) == 1
    assert "No such file" in capsys.readouterr().err


def test_nested_train_commands_share_config_sections(tmp_path):
    ini = tmp_path / "t.ini"
    ini.write_text("[train-dae]\nsynthetic-count = 1\nframes = 2\nbit-depth = 5\nepochs = 1\n"
                   f"batch-size = 2\nout = {tmp_path / 'a.bin'}\n")
    assert cli.main(["dae", "train", "--config", str(ini)]) == 0
    assert (tmp_path / "a.bin").exists()
    args = cli.build_parser().parse_args(["train-dae", "--out", "x"])
    assert args.batch_size == 3 and args.lr == 1e-3

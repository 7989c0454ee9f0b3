"""CLI: command wiring, exit codes, determinism, format round-trips."""

import numpy as np
import pytest

from tempotrack import formats
from tempotrack.cli import main
from tempotrack.pipeline import TrackingModel


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.chrd"
    code = run(["generate-data", "--n-clips", "4", "--seed", "0", "--frames", "8",
                "--height", "32", "--width", "32", "--sprites", "2",
                "--tracks", "8", "--out", str(path)])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def stage_a_ckpt(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "a.ckpt"
    code = run(["pretrain", "--data", str(dataset), "--out", str(out),
                "--height", "32", "--width", "32", "--patch", "8", "--dim", "16",
                "--depth", "2", "--heads", "2",
                "--iters", "15", "--warmup-iters", "2", "--queries-per-batch", "8",
                "--seed", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def stage_b_ckpt(dataset, stage_a_ckpt, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "b.ckpt"
    code = run(["train-adapter", "--data", str(dataset), "--backbone", str(stage_a_ckpt),
                "--out", str(out), "--window", "3", "--stride", "2",
                "--iters", "8", "--warmup-iters", "1", "--queries-per-batch", "8",
                "--seed", "4"])
    assert code == 0
    return out


class TestGenerateData:
    def test_deterministic_files(self, tmp_path):
        a, b = tmp_path / "a.chrd", tmp_path / "b.chrd"
        args = ["generate-data", "--n-clips", "2", "--seed", "5", "--frames", "6",
                "--height", "32", "--width", "32", "--sprites", "2", "--tracks", "4"]
        assert run(args + ["--out", str(a)]) == 0
        assert run(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_clips_usage_error(self, tmp_path):
        code = run(["generate-data", "--n-clips", "0", "--out", str(tmp_path / "x.chrd")])
        assert code == 2

    def test_round_trip_readable(self, dataset):
        clips = formats.read_dataset(dataset)
        assert len(clips) == 4
        assert clips[0].frames.shape == (8, 32, 32, 3)


class TestPretrain:
    def test_single_iter_writes_log(self, dataset, tmp_path):
        out = tmp_path / "one.ckpt"
        log = tmp_path / "loss.log"
        code = run(["pretrain", "--data", str(dataset), "--out", str(out),
                    "--height", "32", "--width", "32", "--dim", "16", "--depth", "2",
                    "--heads", "2", "--iters", "2", "--warmup-iters", "1",
                    "--queries-per-batch", "4", "--loss-log", str(log)])
        assert code == 0
        lines = [l for l in log.read_text().splitlines() if not l.startswith("#")]
        assert len(lines) == 2
        model = TrackingModel.load(out)
        assert model.adapters is None
        assert model.meta["stage"] == "pretrain"

    def test_missing_data_usage_error(self, tmp_path):
        code = run(["pretrain", "--data", str(tmp_path / "nope.chrd"),
                    "--out", str(tmp_path / "x.ckpt")])
        assert code == 2


class TestTrainAdapter:
    def test_placement_all_slot_count(self, dataset, stage_a_ckpt, tmp_path):
        out = tmp_path / "b.ckpt"
        code = run(["train-adapter", "--data", str(dataset), "--backbone", str(stage_a_ckpt),
                    "--out", str(out), "--window", "3", "--placement", "all",
                    "--iters", "2", "--warmup-iters", "1", "--queries-per-batch", "4"])
        assert code == 0
        tensors, meta = formats.read_checkpoint(out)
        # depth 2 backbone -> 1 slot
        slots = {name.split(".")[1] for name in tensors if name.startswith("adapter.")}
        assert slots == {"0"}
        assert meta["adapter.placement"] == "all"

    def test_conv3d_kernels_have_declared_shape(self, dataset, stage_a_ckpt, tmp_path):
        out = tmp_path / "c3.ckpt"
        code = run(["train-adapter", "--data", str(dataset), "--backbone", str(stage_a_ckpt),
                    "--out", str(out), "--window", "3", "--aggregation", "conv3d",
                    "--iters", "2", "--warmup-iters", "1", "--queries-per-batch", "4"])
        assert code == 0
        tensors, meta = formats.read_checkpoint(out)
        assert meta["adapter.aggregation"] == "conv3d"
        assert tensors["adapter.0.agg_w"].shape == (3, 3, 3, 4, 4)

    def test_missing_backbone_usage_error(self, dataset, tmp_path):
        code = run(["train-adapter", "--data", str(dataset),
                    "--backbone", str(tmp_path / "nope.ckpt"),
                    "--out", str(tmp_path / "x.ckpt"), "--iters", "2",
                    "--warmup-iters", "1"])
        assert code == 2

    def test_window_exceeding_clip_rejected(self, dataset, stage_a_ckpt, tmp_path):
        code = run(["train-adapter", "--data", str(dataset), "--backbone", str(stage_a_ckpt),
                    "--out", str(tmp_path / "x.ckpt"), "--window", "13",
                    "--iters", "2", "--warmup-iters", "1"])
        assert code == 2


class TestTrack:
    def test_grid_queries(self, dataset, stage_b_ckpt, tmp_path):
        out = tmp_path / "t.traj"
        code = run(["track", "--checkpoint", str(stage_b_ckpt), "--data", str(dataset),
                    "--clip", "0", "--grid", "4", "--out", str(out)])
        assert code == 0
        header, preds = formats.read_trajectories(out)
        assert len(preds) == 16
        assert all(p.query.t == 0 for p in preds)

    def test_rerun_byte_identical(self, dataset, stage_b_ckpt, tmp_path):
        a, b = tmp_path / "a.traj", tmp_path / "b.traj"
        args = ["track", "--checkpoint", str(stage_b_ckpt), "--data", str(dataset),
                "--clip", "1", "--grid", "3"]
        assert run(args + ["--out", str(a)]) == 0
        assert run(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_empty_queries_file_valid_output(self, dataset, stage_b_ckpt, tmp_path):
        qfile = tmp_path / "q.txt"
        qfile.write_text("# nothing\n")
        out = tmp_path / "t.traj"
        code = run(["track", "--checkpoint", str(stage_b_ckpt), "--data", str(dataset),
                    "--queries", str(qfile), "--out", str(out)])
        assert code == 0
        header, preds = formats.read_trajectories(out)
        assert preds == []

    def test_out_of_bounds_query_names_it(self, dataset, stage_b_ckpt, tmp_path, capsys):
        qfile = tmp_path / "q.txt"
        qfile.write_text("99 4 0\n")
        code = run(["track", "--checkpoint", str(stage_b_ckpt), "--data", str(dataset),
                    "--queries", str(qfile), "--out", str(tmp_path / "t.traj")])
        assert code == 2
        assert "99" in capsys.readouterr().err

    def test_both_query_sources_rejected(self, dataset, stage_b_ckpt, tmp_path):
        code = run(["track", "--checkpoint", str(stage_b_ckpt), "--data", str(dataset),
                    "--grid", "2", "--queries", "x", "--out", str(tmp_path / "t.traj")])
        assert code == 2


class TestEvaluate:
    def test_oracle_perfect_score(self, dataset, tmp_path):
        out = tmp_path / "r.txt"
        code = run(["evaluate", "--data", str(dataset), "--oracle", "--mode", "strided",
                    "--split", "all", "--out", str(out)])
        assert code == 0
        report = formats.decode_kv(out.read_text())
        assert float(report["delta_avg"]) == 1.0

    def test_modes_change_query_counts(self, dataset, stage_b_ckpt, tmp_path):
        r1, r2 = tmp_path / "s.txt", tmp_path / "f.txt"
        assert run(["evaluate", "--data", str(dataset), "--checkpoint", str(stage_b_ckpt),
                    "--mode", "strided", "--split", "all", "--out", str(r1)]) == 0
        assert run(["evaluate", "--data", str(dataset), "--checkpoint", str(stage_b_ckpt),
                    "--mode", "first", "--split", "all", "--out", str(r2)]) == 0
        k1 = formats.decode_kv(r1.read_text())
        k2 = formats.decode_kv(r2.read_text())
        assert int(k1["n_queries"]) > int(k2["n_queries"])

    def test_report_regenerated_identical(self, dataset, stage_b_ckpt, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        args = ["evaluate", "--data", str(dataset), "--checkpoint", str(stage_b_ckpt),
                "--split", "all"]
        assert run(args + ["--out", str(a)]) == 0
        assert run(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_checkpoint_required_without_oracle(self, dataset, tmp_path):
        code = run(["evaluate", "--data", str(dataset), "--out", str(tmp_path / "r.txt")])
        assert code == 2


class TestDumpFeatures:
    def test_writes_one_image_per_frame(self, dataset, stage_b_ckpt, tmp_path):
        out_dir = tmp_path / "feat"
        code = run(["dump-features", "--checkpoint", str(stage_b_ckpt),
                    "--data", str(dataset), "--clip", "0", "--out-dir", str(out_dir)])
        assert code == 0
        files = sorted(p.name for p in out_dir.iterdir())
        assert files == [f"frame_{t:03d}.ppm" for t in range(8)]

    def test_rerun_byte_identical(self, dataset, stage_b_ckpt, tmp_path):
        d1, d2 = tmp_path / "f1", tmp_path / "f2"
        for d in (d1, d2):
            assert run(["dump-features", "--checkpoint", str(stage_b_ckpt),
                        "--data", str(dataset), "--clip", "0", "--out-dir", str(d)]) == 0
        for a, b in zip(sorted(d1.iterdir()), sorted(d2.iterdir())):
            assert a.read_bytes() == b.read_bytes()


class TestConfigPrecedence:
    def test_flag_beats_config_file(self, dataset, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("iters: 5\nwarmup_iters: 1\nqueries_per_batch: 4\nseed: 9\n")
        out = tmp_path / "m.ckpt"
        log = tmp_path / "l.log"
        code = run(["pretrain", "--data", str(dataset), "--out", str(out),
                    "--height", "32", "--width", "32", "--dim", "16", "--depth", "2",
                    "--heads", "2", "--config", str(cfg), "--iters", "3",
                    "--loss-log", str(log)])
        assert code == 0
        lines = [l for l in log.read_text().splitlines() if not l.startswith("#")]
        assert len(lines) == 3  # flag value, not the config file's 5
        _, meta = formats.read_checkpoint(out)
        assert meta["train.iters"] == "3"
        assert meta["train.seed"] == "9"  # config file value survives

    def test_resolved_config_echoed(self, dataset, tmp_path):
        out = tmp_path / "m.ckpt"
        code = run(["pretrain", "--data", str(dataset), "--out", str(out),
                    "--height", "32", "--width", "32", "--dim", "16", "--depth", "2",
                    "--heads", "2", "--iters", "2", "--warmup-iters", "1",
                    "--tau", "10", "--mask-radius", "3"])
        assert code == 0
        _, meta = formats.read_checkpoint(out)
        assert meta["matcher.tau"] == "10.0"
        assert meta["matcher.mask_radius"] == "3.0"

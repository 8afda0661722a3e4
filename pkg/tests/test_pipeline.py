"""Config, staged runs, persistence, and the CLI."""

import json
import math

import numpy as np
import pytest

from osar.idsn import PipelineError, load_pairs
from osar.image import Image, load_image, save_image, save_rois
from osar.metrics import Region
from osar.pipeline import (
    PROFILES,
    STAGES,
    PipelineConfig,
    RunRecord,
    apply_profile,
    rng_streams,
    run_pipeline,
)
from osar import cli
from synthdata import make_two_class_image, two_class_rois


class TestPipelineConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.pair_count == 100_000
        assert cfg.identity_fraction == 0.1
        assert cfg.augment_per_class == 500
        assert cfg.batch_size == 270
        assert cfg.max_epochs == 4
        assert cfg.lr == 0.0005
        assert cfg.attention_enabled is True
        assert cfg.classify_stride == 32
        assert cfg.synthesis_stride == 16
        assert cfg.threshold == 0.01

    @pytest.mark.parametrize("overrides", [
        dict(seed=-1),
        dict(seed=2**64),
        dict(seed=1.5),
        dict(pair_count=0),
        dict(batch_size=-3),
        dict(max_epochs=0),
        dict(lr=0.0),
        dict(threshold=0.0),
        dict(threshold=1.0),
        dict(identity_fraction=1.0),
        dict(identity_fraction=-0.1),
        dict(classify_stride=0),
        dict(attention_enabled=1),
    ])
    def test_invalid_values_rejected(self, overrides):
        with pytest.raises(ValueError):
            PipelineConfig(**overrides)

    def test_dict_round_trip(self):
        cfg = PipelineConfig(seed=42, pair_count=500, attention_enabled=False)
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown config"):
            PipelineConfig.from_dict({"seed": 1, "pair_cuont": 10})

    def test_overrides(self):
        cfg = PipelineConfig().with_overrides({"seed": 9, "lr": 0.002})
        assert (cfg.seed, cfg.lr) == (9, 0.002)

    def test_desk_profile(self):
        cfg = apply_profile(PipelineConfig(seed=5), "desk")
        assert cfg.pair_count == 5_000
        assert cfg.augment_per_class == 200
        assert cfg.seed == 5
        with pytest.raises(ValueError, match="unknown profile"):
            apply_profile(PipelineConfig(), "cluster")


class TestRngStreams:
    def test_deterministic_and_distinct(self):
        a = rng_streams(123)
        b = rng_streams(123)
        c = rng_streams(124)
        for name in a:
            assert a[name].integers(1 << 30) == b[name].integers(1 << 30)
        draws = {name: rng_streams(123)[name].integers(1 << 30) for name in a}
        assert len(set(draws.values())) == len(draws)
        assert rng_streams(123)["aarn"].integers(1 << 30) != c["aarn"].integers(1 << 30)


TINY = PipelineConfig(seed=31, pair_count=200, augment_per_class=50,
                      batch_size=27, max_epochs=2)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    rng = np.random.default_rng(11)
    image = make_two_class_image(rng, size=160)
    save_image(image, root / "in.raw", format="raw")
    save_rois(two_class_rois(3, 3, size=160), root / "rois.json")
    return root


@pytest.fixture(scope="module")
def finished_run(workspace):
    events = []

    def progress(stage, info):
        events.append((stage, dict(info)))

    record = run_pipeline(workspace / "in.raw", workspace / "rois.json", TINY,
                          out_root=workspace, progress=progress,
                          save_pairs=True)
    return workspace, record, events


class TestRunPipeline:
    def test_record_contents(self, finished_run):
        _, record, _ = finished_run
        assert record.config == TINY
        assert len(record.loss_history) == TINY.max_epochs
        assert 0.0 <= record.idsn_accuracy <= 1.0
        assert record.image_format == "raw"
        assert len(record.metrics) == 1
        assert record.output_path == "output.raw"

    def test_artifacts_on_disk(self, finished_run):
        root, record, _ = finished_run
        run_dir = root / "runs" / record.run_id
        for name in ("config.json", "record.json", "output.raw",
                     "attention1.png", "attention2.png", "pairs.bin"):
            assert (run_dir / name).exists(), name
        saved = json.loads((run_dir / "config.json").read_text())
        assert PipelineConfig.from_dict(saved) == TINY
        pairs = load_pairs(run_dir / "pairs.bin")
        assert len(pairs) == TINY.pair_count

    def test_output_dims_match_input(self, finished_run):
        root, record, _ = finished_run
        out = load_image(root / "runs" / record.run_id / "output.raw")
        src = load_image(root / "in.raw")
        assert out.pixels.shape == src.pixels.shape

    def test_record_json_round_trip(self, finished_run):
        root, record, _ = finished_run
        doc = json.loads((root / "runs" / record.run_id / "record.json").read_text())
        restored = RunRecord.from_dict(doc)
        assert restored.config == record.config
        assert restored.loss_history == record.loss_history
        assert restored.metrics == record.metrics
        assert restored.timings == record.timings
        assert [(r.x, r.y, r.label) for r in restored.rois] == \
               [(r.x, r.y, r.label) for r in record.rois]

    def test_stage_timings_cover_wall_clock(self, finished_run):
        _, record, _ = finished_run
        assert set(record.timings) == set(STAGES)
        assert sum(record.timings.values()) >= 0.95 * record.total_seconds
        assert sum(record.timings.values()) <= record.total_seconds * 1.001

    def test_default_eval_region_is_valid_window(self, finished_run):
        _, record, _ = finished_run
        region = record.metrics[0].region
        assert (region.width, region.height) == (32, 32)
        assert 0 <= region.x <= 160 - 32 and 0 <= region.y <= 160 - 32

    def test_progress_reports_stages_in_order(self, finished_run):
        _, record, events = finished_run
        stage_entries = [s for s, info in events if not info]
        assert stage_entries == list(STAGES)

    def test_progress_loss_history_matches_record(self, finished_run):
        _, record, events = finished_run
        partials = [info["loss_history"] for s, info in events
                    if s == "train_aarn" and "loss_history" in info]
        assert len(partials) == TINY.max_epochs
        np.testing.assert_allclose(partials[-1], record.loss_history, rtol=1e-12)

    def test_same_seed_reproduces_artifacts(self, finished_run, workspace):
        root, record, _ = finished_run
        again = run_pipeline(workspace / "in.raw", workspace / "rois.json", TINY,
                             out_root=workspace, save_pairs=True)
        first = root / "runs" / record.run_id
        second = root / "runs" / again.run_id
        for name in ("output.raw", "attention1.png", "attention2.png", "pairs.bin"):
            assert (first / name).read_bytes() == (second / name).read_bytes(), name
        assert again.loss_history == record.loss_history
        assert again.metrics == record.metrics

    def test_explicit_eval_regions(self, workspace):
        cfg = PipelineConfig(seed=3, pair_count=60, augment_per_class=30,
                             batch_size=27, max_epochs=1)
        regions = [Region(0, 0, 32, 32), Region(90, 90, 38, 38)]
        record = run_pipeline(workspace / "in.raw", workspace / "rois.json", cfg,
                              out_root=workspace, eval_regions=regions)
        assert [m.region for m in record.metrics] == regions

    def test_all_n_rois_is_the_no_artifact_error(self, workspace, tmp_path):
        save_rois(two_class_rois(0, 3, size=160), tmp_path / "n_only.json")
        with pytest.raises(PipelineError, match="no artifact patches detected"):
            run_pipeline(workspace / "in.raw", tmp_path / "n_only.json", TINY,
                         out_root=tmp_path)
        error_docs = list((tmp_path / "runs").glob("*/error.json"))
        assert len(error_docs) == 1
        assert "no artifact patches" in json.loads(error_docs[0].read_text())["error"]

    def test_all_a_rois_rejected(self, workspace, tmp_path):
        save_rois(two_class_rois(3, 0, size=160), tmp_path / "a_only.json")
        with pytest.raises(ValueError, match="N-type"):
            run_pipeline(workspace / "in.raw", tmp_path / "a_only.json", TINY,
                         out_root=tmp_path)

    def test_failed_stage_leaves_prior_artifacts(self, workspace, tmp_path):
        save_rois(two_class_rois(0, 3, size=160), tmp_path / "n_only.json")
        try:
            run_pipeline(workspace / "in.raw", tmp_path / "n_only.json", TINY,
                         out_root=tmp_path, run_id="feedcafe0000")
        except PipelineError:
            pass
        run_dir = tmp_path / "runs" / "feedcafe0000"
        assert (run_dir / "config.json").exists()
        assert not (run_dir / "record.json").exists()

    def test_missing_image_is_io_error(self, workspace, tmp_path):
        from osar.image import FormatError
        with pytest.raises((OSError, FormatError)):
            run_pipeline(tmp_path / "nope.raw", workspace / "rois.json", TINY,
                         out_root=tmp_path)
        with pytest.raises(OSError):
            run_pipeline(tmp_path / "nope.png", workspace / "rois.json", TINY,
                         out_root=tmp_path)


class TestCli:
    def _denoise(self, workspace, tmp_path, capsys, extra=()):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(TINY.to_dict()))
        code = cli.main([
            "denoise", "--image", str(workspace / "in.raw"),
            "--rois", str(workspace / "rois.json"),
            "--config", str(config_path), "--out", str(tmp_path), *extra,
        ])
        assert code == 0
        return json.loads(capsys.readouterr().out)

    def test_denoise_then_metrics_consistency(self, workspace, tmp_path, capsys):
        doc = self._denoise(workspace, tmp_path, capsys)
        reported = doc["metrics"][0]
        region = reported["region"]
        out_path = tmp_path / "runs" / doc["run_id"] / doc["output_path"]
        code = cli.main([
            "metrics", "--image", str(out_path),
            "--baseline", str(workspace / "in.raw"),
            "--region", "{x},{y},{width},{height}".format(**region),
        ])
        assert code == 0
        recomputed = json.loads(capsys.readouterr().out)
        assert recomputed == reported

    def test_denoise_seed_flag_overrides_config(self, workspace, tmp_path, capsys):
        doc = self._denoise(workspace, tmp_path, capsys, extra=["--seed", "99"])
        assert doc["config"]["seed"] == 99

    def test_metrics_self_compare_is_zero(self, workspace, capsys):
        path = str(workspace / "in.raw")
        code = cli.main(["metrics", "--image", path, "--baseline", path,
                         "--region", "4,4,16,16"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["delta_snr_pct"] == 0.0
        assert doc["delta_mean_pct"] == 0.0

    def test_metrics_without_baseline(self, workspace, capsys):
        code = cli.main(["metrics", "--image", str(workspace / "in.raw"),
                         "--region", "4,4,16,16"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["delta_snr_pct"] is None
        assert math.isfinite(doc["snr"])

    def test_metrics_bad_region(self, workspace, capsys):
        code = cli.main(["metrics", "--image", str(workspace / "in.raw"),
                         "--region", "4,4,16"])
        assert code == 1

    def test_classify_writes_binary_map(self, workspace, tmp_path, capsys):
        out = tmp_path / "map.png"
        code = cli.main([
            "classify", "--image", str(workspace / "in.raw"),
            "--rois", str(workspace / "rois.json"),
            "--out", str(out), "--seed", "5",
        ])
        assert code == 0 and out.exists()
        from PIL import Image as PILImage
        values = set(np.asarray(PILImage.open(out)).ravel().tolist())
        assert values <= {0, 255}

    def test_synth_dumps_requested_count(self, workspace, tmp_path, capsys):
        out = tmp_path / "pairs.bin"
        code = cli.main([
            "synth", "--image", str(workspace / "in.raw"),
            "--rois", str(workspace / "rois.json"),
            "--count", "50", "--out", str(out), "--seed", "5",
        ])
        assert code == 0
        assert len(load_pairs(out)) == 50

    def test_no_artifact_exit_code(self, workspace, tmp_path, capsys):
        save_rois(two_class_rois(0, 3, size=160), tmp_path / "n_only.json")
        code = cli.main([
            "denoise", "--image", str(workspace / "in.raw"),
            "--rois", str(tmp_path / "n_only.json"), "--out", str(tmp_path),
        ])
        assert code == 3

    def test_missing_file_exit_code(self, tmp_path, capsys):
        code = cli.main(["metrics", "--image", str(tmp_path / "nope.raw"),
                         "--region", "0,0,8,8"])
        assert code == 1

    def test_unknown_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["denoise", "--imagee", "x", "--rois", "y"])
        assert exc.value.code == 2

    def test_unknown_command_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transmogrify"])
        assert exc.value.code == 2

import csv
import json

import numpy as np
import pytest

from actionimage import png, run
from actionimage.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from actionimage.ingest import DatasetManifest, SynthSpec, format_jsonl, generate_synthetic

TINY_NET = {"blocks": [{"out_channels": 4}, {"out_channels": 6, "pool": False}], "scales": [12, 8],
            "dtype": "float64"}


def write_config(tmp_path, name="cfg.json", **kw):
    cfg = {
        "synth": {"class_count": 2, "sequences_per_class": 5, "test_per_class": 2, "seed": 3},
        "net": TINY_NET,
        "epochs": 2,
        "batch_size": 4,
        "out_dir": "out",
    }
    cfg.update(kw)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_encode_writes_one_png_per_sequence(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["encode", str(cfg)]) == EXIT_OK
    index = json.loads((tmp_path / "out/images/index.json").read_text())
    assert len(index["images"]) == 10 and not index["failures"]
    names = sorted(p.name for p in (tmp_path / "out/images").glob("*.png"))
    assert names == sorted(e["path"] for e in index["images"])
    assert {"path", "label", "degenerate"} <= set(index["images"][0])


def test_encode_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    main(["encode", str(cfg)])
    first = {p.name: p.read_bytes() for p in (tmp_path / "out/images").iterdir()}
    main(["encode", str(cfg)])
    second = {p.name: p.read_bytes() for p in (tmp_path / "out/images").iterdir()}
    assert first == second


def test_baseline_without_stats_asks_for_stats_run(tmp_path, capsys):
    cfg = write_config(tmp_path, mapping="baseline")
    assert main(["encode", str(cfg)]) == EXIT_CONFIG
    assert "run the 'stats' command first" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_baseline_after_stats(tmp_path):
    cfg = write_config(tmp_path, mapping="baseline")
    assert main(["stats", str(cfg)]) == EXIT_OK
    stats = json.loads((tmp_path / "out/stats.json").read_text())
    assert stats["c_min"] < stats["c_max"]
    assert main(["encode", str(cfg), "--stats", str(tmp_path / "out/stats.json")]) == EXIT_OK


@pytest.mark.parametrize("bad", [
    {"mapping": "linear"}, {"mask": ""}, {"epochs": -1}, {"bogus": 1},
    {"net": {"scales": [64, 2]}}, {"augment": {"rotation_range_deg": 90}},
])
def test_invalid_config_fails_before_touching_disk(tmp_path, bad):
    cfg = write_config(tmp_path, **bad)
    for cmd in ("synth", "encode", "train"):
        assert main([cmd, str(cfg)]) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_bad_arguments_exit_1(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", str(write_config(tmp_path)), "--epochs", "many"])
    assert e.value.code == EXIT_CONFIG


def test_missing_manifest_is_data_error(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"manifest": "nowhere/manifest.json", "out_dir": "out"}))
    assert main(["train", str(cfg)]) == EXIT_DATA


def test_encode_reports_bad_files_and_continues(tmp_path, capsys):
    manifest, seqs = generate_synthetic(SynthSpec(class_count=2, sequences_per_class=2, test_per_class=1))
    data = tmp_path / "data"
    data.mkdir()
    for e, s in zip(manifest.entries, seqs):
        (data / e.path).write_text(format_jsonl(s))
    (data / manifest.entries[1].path).write_text('{"joints": 25, "actors": 1}\n{"actors": []}\n')
    manifest.save(data / "manifest.json")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"manifest": "data/manifest.json", "out_dir": "out"}))
    assert main(["encode", str(cfg)]) == EXIT_DATA
    index = json.loads((tmp_path / "out/images/index.json").read_text())
    assert len(index["images"]) == 3
    assert [f[0] for f in index["failures"]] == [manifest.entries[1].path]
    assert manifest.entries[1].path in capsys.readouterr().err


def test_synth_then_manifest_run_matches_in_memory(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["synth", str(cfg)]) == EXIT_OK
    from_files = write_config(tmp_path, "files.json", synth=None, manifest="out/data/manifest.json",
                              out_dir="files")
    main(["encode", str(cfg)])
    main(["encode", str(from_files)])
    for p in (tmp_path / "out/images").glob("*.png"):
        assert p.read_bytes() == (tmp_path / "files/images" / p.name).read_bytes()


def test_augment_writes_expanded_train_split(tmp_path):
    cfg = write_config(tmp_path, augment={"multiplicity": 2, "seed": 1})
    assert main(["augment", str(cfg)]) == EXIT_OK
    m = DatasetManifest.load(tmp_path / "out/augmented/manifest.json")
    assert len(m.split("train")) == 3 * 6 and len(m.split("test")) == 4


def test_train_zero_epochs(tmp_path):
    cfg = write_config(tmp_path, epochs=0)
    assert main(["train", str(cfg)]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "out/metrics.csv").open()))
    assert rows == [run.METRIC_FIELDS]
    net, state, meta = run.load_checkpoint(tmp_path / "out/model.ckpt")
    fresh = run.MultiScaleNet(net.config)
    assert np.array_equal(net.params, fresh.params) and state.epoch == 0
    assert meta["run"]["epochs"] == 0


def test_train_writes_metrics_per_epoch(tmp_path):
    cfg = write_config(tmp_path, epochs=3)
    assert main(["train", str(cfg)]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "out/metrics.csv").open()))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert all(0 <= float(r["test_acc"]) <= 1 for r in rows)
    assert json.loads((tmp_path / "out/metrics.json").read_text())[2]["epoch"] == 3


def test_flag_override_and_env_default(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    data = json.loads(cfg.read_text())
    del data["out_dir"]
    cfg.write_text(json.dumps(data))
    monkeypatch.setenv(run.OUT_ENV, str(tmp_path / "from_env"))
    assert main(["train", str(cfg), "--epochs", "1"]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "from_env/metrics.csv").open()))
    assert len(rows) == 1


def test_resume_equals_straight_run(tmp_path):
    straight = write_config(tmp_path, "a.json", out_dir="a", epochs=3)
    main(["train", str(straight)])
    split = write_config(tmp_path, "b.json", out_dir="b", epochs=3)
    main(["train", str(split), "--epochs", "1"])
    assert main(["train", str(split), "--resume", str(tmp_path / "b/model.ckpt")]) == EXIT_OK
    net_a, state_a, _ = run.load_checkpoint(tmp_path / "a/model.ckpt")
    net_b, state_b, _ = run.load_checkpoint(tmp_path / "b/model.ckpt")
    assert np.array_equal(net_a.params, net_b.params)
    assert np.array_equal(state_a.velocity, state_b.velocity)
    assert state_a.history == state_b.history
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()


def test_eval_memorized_train_set(tmp_path):
    cfg = write_config(tmp_path, epochs=40, batch_size=2,
                       synth={"class_count": 2, "sequences_per_class": 3, "test_per_class": 1, "seed": 0},
                       optimizer={"lr": 0.05, "constant_epochs": 40})
    assert main(["train", str(cfg)]) == EXIT_OK
    assert main(["eval", str(tmp_path / "out/model.ckpt"), "--split", "train"]) == EXIT_OK
    report = json.loads((tmp_path / "out/eval/report.json").read_text())
    assert report["accuracy"] == 1.0
    assert report["confusion"] == [[2, 0], [0, 2]]
    heat = png.decode((tmp_path / "out/eval/confusion.png").read_bytes())
    assert heat.shape == (32, 32, 3)
    lines = (tmp_path / "out/eval/confusion.csv").read_text().splitlines()
    assert lines[0].split(",")[1:] == report["class_names"]


def test_eval_class_count_mismatch(tmp_path):
    cfg = write_config(tmp_path, epochs=0)
    main(["train", str(cfg)])
    other = write_config(tmp_path, "three.json", out_dir="three",
                         synth={"class_count": 3, "sequences_per_class": 2, "test_per_class": 1})
    main(["synth", str(other)])
    rc = main(["eval", str(tmp_path / "out/model.ckpt"), "--manifest", str(tmp_path / "three/data/manifest.json")])
    assert rc == EXIT_CONFIG


def test_single_correct_sample_report():
    rep = run.evaluation_report([1], [1], ["a", "b", "c"])
    assert rep.confusion == [[0, 0, 0], [0, 1, 0], [0, 0, 0]]
    assert rep.accuracy == 1.0 and rep.per_class_accuracy == [None, 1.0, None]


def test_report_bookkeeping(rng):
    truth = rng.integers(0, 4, size=200)
    pred = np.where(rng.random(200) < 0.7, truth, rng.integers(0, 4, size=200))
    rep = run.evaluation_report(truth, pred, list("abcd"))
    cm = np.array(rep.confusion)
    assert cm.sum(axis=1).tolist() == np.bincount(truth, minlength=4).tolist()
    assert rep.accuracy == pytest.approx(np.trace(cm) / cm.sum())
    assert rep.accuracy == pytest.approx(np.mean(truth == pred))


def test_heatmap_shading():
    img = run.render_heatmap(np.array([[3, 0], [1, 1]]), cell=4)
    assert img.shape == (8, 8, 3)
    assert img[1, 5].tolist() == [255, 255, 255]  # empty cell
    assert img[1, 1].tolist() == [8, 48, 107]  # full row share


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--tolerance", "0"]) == EXIT_NUMERIC


def test_gradcheck_double_beats_single():
    d = run.cmd_gradcheck("double")
    s = run.cmd_gradcheck("single")
    assert d.max_rel_error < 1e-4 <= s.max_rel_error

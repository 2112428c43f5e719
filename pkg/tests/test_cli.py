import json

import numpy as np
import pytest
import yaml

from hierseg.cli import compare_annotators, evaluate_folds, main, read_folds
from hierseg.data import CONDITIONS, load_dataset, synth_generate, SynthConfig
from hierseg.io import read_png_gray, read_png_rgb, write_png
from hierseg.masks import encode_label_mask
from hierseg.metrics import METRICS, REPORT_CLASSES, report_from_rows


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".config.txt")}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["-q", "synth", "--patients", "4", "--size", "32", "--seed", "5", "--out", str(root)]) == 0
    assert main(["-q", "gen-masks", "--data", str(root)]) == 0
    return root


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["-q", "synth", "--patients", "2", "--size", "32", "--seed", "1", "--out",
                     str(tmp_path / name)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b
    assert len(a) == 2 * (2 * 16 + 3)


def test_gen_masks_match_ground_truth(dataset):
    truth = synth_generate(SynthConfig(patients=4, size=32, seed=5))
    for rec in truth:
        for cond in CONDITIONS:
            gray = read_png_gray(dataset / f"patient_{rec.patient_id}" / f"mask_{cond}.png")
            np.testing.assert_array_equal(gray, encode_label_mask(rec.labels[cond]))


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "synth.yaml"
    cfg.write_text(yaml.safe_dump({"patients": 1, "size": 32, "seed": 9}))
    assert main(["-q", "synth", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "d")]) == 0
    record = (tmp_path / "d" / "synth.config.txt").read_text()
    assert "patients=1" in record and "seed=2" in record
    assert len(list((tmp_path / "d").glob("patient_*"))) == 1


def test_input_errors_exit_2(tmp_path, capsys):
    assert main(["-q", "gen-masks", "--data", str(tmp_path / "missing")]) == 2
    assert main(["-q", "synth", "--overlap", "2.0", "--out", str(tmp_path / "x")]) == 2
    assert main(["-q", "synth"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_key: 1\n")
    assert main(["-q", "synth", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert "error=" in capsys.readouterr().err


def test_bad_gray_value_exits_2(tmp_path):
    root = tmp_path / "data"
    assert main(["-q", "synth", "--patients", "2", "--size", "32", "--out", str(root)]) == 0
    bad = np.zeros((32, 32), np.uint8)
    bad[3, 3] = 37
    for cond in CONDITIONS:
        write_png(root / "patient_00" / f"mask_{cond}.png", bad)
        write_png(root / "patient_01" / f"mask_{cond}.png", bad)
    assert main(["-q", "train", "--data", str(root), "--out", str(tmp_path / "run"), "--folds", "2"]) == 2


def test_missing_retest_mask_exits_2(tmp_path):
    root = tmp_path / "data"
    assert main(["-q", "synth", "--patients", "1", "--size", "32", "--out", str(root)]) == 0
    (root / "patient_00" / "ofr_retest.png").unlink()
    assert main(["-q", "gen-masks", "--data", str(root)]) == 2


def test_evaluation_with_perfect_predictor(dataset):
    records = load_dataset(dataset, require_labels=True)
    lookup = {}
    for rec in records:
        for cond in rec.images:
            lookup[rec.images[cond].tobytes()] = rec.labels[cond]

    def oracle(img):
        return lookup[np.round(img * 255).astype(np.uint8).tobytes()]

    folds = {r.patient_id: i % 2 for i, r in enumerate(records)}
    report, _ = evaluate_folds(records, folds, {0: oracle, 1: oracle})
    for cls in REPORT_CLASSES:
        for m in METRICS:
            assert report.summary[cls][m] == (1.0, 0.0)
    assert len(report.to_table().strip().splitlines()) == 13


def test_train_eval_render_pipeline(dataset, tmp_path):
    run = tmp_path / "run"
    assert main(["-q", "train", "--data", str(dataset), "--out", str(run), "--folds", "2", "--epochs", "1",
                 "--fold", "1", "--seed", "3"]) == 0
    assert (run / "fold1.weights").exists() and not (run / "fold0.weights").exists()
    assert len((run / "fold1.log").read_text().splitlines()) == 1
    assert set(read_folds(run / "folds.txt")) == {"00", "01", "02", "03"}

    ev = tmp_path / "eval"
    assert main(["-q", "eval", "--data", str(dataset), "--weights", str(run), "--out", str(ev),
                 "--save-predictions"]) == 0
    table = (ev / "report.txt").read_text().strip().splitlines()
    assert len(table) == 13
    rows = [json.loads(line) for line in (ev / "per_image.jsonl").read_text().splitlines()]
    summary = json.loads((ev / "report.json").read_text())["summary"]
    again = report_from_rows(rows)
    for cls in REPORT_CLASSES:
        for m in METRICS:
            for got, want in zip(again[cls][m], (summary[cls][m]["mean"], summary[cls][m]["mean_std"])):
                assert (got is None and want is None) or abs(got - want) < 1e-9

    preds = ev / "predictions"
    assert len(list(preds.rglob("mask_*.png"))) == 2 * 16
    out = tmp_path / "overlays"
    assert main(["-q", "render", "--pred", str(preds), "--target", str(dataset), "--images", str(dataset),
                 "--out", str(out)]) == 0
    overlays = list(out.rglob("*.overlay.png"))
    assert len(overlays) == 32
    assert read_png_rgb(overlays[0]).shape == (32, 32, 3)


def test_eval_without_weights_exits_2(dataset, tmp_path):
    assert main(["-q", "eval", "--data", str(dataset), "--weights", str(tmp_path), "--out", str(tmp_path)]) == 2


def test_render_colors(tmp_path):
    pred = np.array([[255, 255, 0, 0]], np.uint8)
    target = np.array([[255, 0, 128, 0]], np.uint8)
    write_png(tmp_path / "p.png", pred)
    write_png(tmp_path / "t.png", target)
    assert main(["-q", "render", "--pred", str(tmp_path / "p.png"), "--target", str(tmp_path / "t.png"),
                 "--out", str(tmp_path / "o")]) == 0
    rgb = read_png_rgb(tmp_path / "o" / "p.overlay.png")
    assert [tuple(v) for v in rgb[0]] == [(255, 255, 0), (255, 0, 0), (0, 255, 0), (0, 0, 0)]
    assert main(["-q", "render", "--class", "mtp", "--pred", str(tmp_path / "p.png"), "--target",
                 str(tmp_path / "t.png"), "--out", str(tmp_path / "o2")]) == 0
    rgb = read_png_rgb(tmp_path / "o2" / "p.overlay.png")
    assert [tuple(v) for v in rgb[0]] == [(255, 255, 0), (255, 0, 0), (0, 0, 0), (0, 0, 0)]


def _write_masks(root, masks):
    for name, m in masks.items():
        write_png(root / name, encode_label_mask(m))


def test_compare_identical_and_empty(tmp_path):
    rng = np.random.default_rng(0)
    ref = {f"img{i}.png": (rng.random((8, 8)) < 0.3).astype(np.uint8) * 2 for i in range(3)}
    _write_masks(tmp_path / "ref", ref)
    _write_masks(tmp_path / "ann" / "same", ref)
    _write_masks(tmp_path / "ann" / "empty", {k: np.zeros_like(v) for k, v in ref.items()})
    (tmp_path / "timing.csv").write_text("annotator,image,seconds\nsame,img0,10\nsame,img1,20\n")
    assert main(["-q", "compare", "--reference", str(tmp_path / "ref"), "--annotators", str(tmp_path / "ann"),
                 "--timing", str(tmp_path / "timing.csv"), "--out", str(tmp_path / "o")]) == 0
    table = json.loads((tmp_path / "o" / "compare.json").read_text())
    for m in METRICS:
        assert table["same"][m]["mean"] == 1.0 and table["same"][m]["std"] == 0.0
    assert table["same"]["seconds_per_image"] == 15.0
    assert table["empty"]["Precision"]["mean"] is None
    assert table["empty"]["Recall"]["mean"] == 0.0
    assert "undefined" in (tmp_path / "o" / "compare.txt").read_text()


def test_compare_hand_fixture():
    ref = {"a": np.array([[1, 1, 0, 0]], bool), "b": np.array([[1, 0, 0, 0]], bool)}
    ann = {"x": {"a": np.array([[1, 0, 1, 0]], bool), "b": np.array([[1, 0, 0, 0]], bool)}}
    row = compare_annotators(ref, ann)["x"]
    # image a: tp=1 fp=1 fn=1 -> IoU 1/3, Dice 1/2; image b: perfect
    assert row["IoU"]["mean"] == pytest.approx((1 / 3 + 1) / 2)
    assert row["Dice"]["mean"] == pytest.approx(0.75)
    assert row["Dice"]["std"] == pytest.approx(np.std([0.5, 1.0], ddof=1))
    assert row["Precision"]["mean"] == pytest.approx(0.75)


def test_compare_unmatched_files_exit_2(tmp_path):
    _write_masks(tmp_path / "ref", {"a.png": np.zeros((4, 4), np.uint8)})
    _write_masks(tmp_path / "ann" / "x", {"b.png": np.zeros((4, 4), np.uint8)})
    assert main(["-q", "compare", "--reference", str(tmp_path / "ref"), "--annotators", str(tmp_path / "ann"),
                 "--out", str(tmp_path / "o")]) == 2

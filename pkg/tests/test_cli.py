import csv
import math
import os

import numpy as np
import pytest

from crossbar import cli, data_io, sampling
from conftest import disk

SMALL = ["--image-size", "96", "--diameter-min", "12", "--diameter-max", "30"]


def run(*args):
    return cli.main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def files(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("generate", "--subjects", 3, "--images-per-subject", 2, "--seed", 2, "--out", root, *SMALL) == 0
    return root


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    code = run("train", "--manifest", small_data / "manifest.tsv", "--test-fold", 0, "--rounds", 2,
               "--max-epochs", 1, "--max-patches", 96, "--max-val-patches", 64, "--convergence-epsilon", 0,
               "--seed", 4, "--out", out)
    assert code == 0
    return out


def test_generate_counts_and_folds(tmp_path):
    assert run("generate", "--subjects", 12, "--images-per-subject", 5, "--seed", 7, "--out", tmp_path / "a") == 0
    m = data_io.load_manifest(tmp_path / "a" / "manifest.tsv")
    assert len(m.records) == 60
    assert sorted(len({r.subject_id for r in m.fold(k)}) for k in range(3)) == [4, 4, 4]
    first = files(tmp_path / "a")
    assert run("generate", "--subjects", 12, "--images-per-subject", 5, "--seed", 7, "--out", tmp_path / "a") == 0
    assert files(tmp_path / "a") == first and len(first) == 122  # 60 images, 60 masks, manifest, run.cfg


def test_generate_too_few_subjects(tmp_path, capsys):
    assert run("generate", "--subjects", 2, "--folds", 3, "--out", tmp_path) != 0
    assert "subjects" in capsys.readouterr().err


def test_train_outputs(trained):
    names = sorted(os.listdir(trained))
    assert [n for n in names if n.endswith(".ckpt")] == ["horizontal_1.ckpt", "horizontal_2.ckpt",
                                                         "vertical_1.ckpt", "vertical_2.ckpt"]
    rows = read_csv(trained / "history.csv")
    assert [(r["round"], r["orientation"]) for r in rows] == [("1", "vertical"), ("1", "horizontal"),
                                                              ("2", "vertical"), ("2", "horizontal")]
    cfg = cli.read_config_file(trained / "run.cfg")
    assert cfg["rounds"] == 2 and cfg["max_patches"] == 96 and cfg["seed"] == 4


def test_train_single_round_and_repeat(small_data, trained, tmp_path):
    args = ["train", "--manifest", small_data / "manifest.tsv", "--test-fold", 0, "--max-epochs", 1,
            "--max-patches", 96, "--max-val-patches", 64, "--convergence-epsilon", 0, "--seed", 4]
    assert run(*args, "--rounds", 1, "--out", tmp_path / "one") == 0
    assert sorted(n for n in os.listdir(tmp_path / "one") if n.endswith(".ckpt")) == \
        ["horizontal_1.ckpt", "vertical_1.ckpt"]
    # the first round of a longer run is the same computation
    for n in ("vertical_1.ckpt", "horizontal_1.ckpt"):
        assert open(tmp_path / "one" / n, "rb").read() == open(trained / n, "rb").read()


def test_segment_and_evaluate(small_data, trained, tmp_path):
    out = tmp_path / "seg"
    assert run("segment", "--manifest", small_data / "manifest.tsv", "--test-fold", 0, "--checkpoints", trained,
               "--weights", "1,1.5,1,1.5", "--stride", 2, "--save-scores", "--out", out) == 0
    m = data_io.load_manifest(small_data / "manifest.tsv")
    for rec in m.fold(0):
        pred = data_io.read_mask(out / "pred" / f"{rec.image_id}.pgm")
        assert pred.shape == (96, 96)
        assert (out / "scores" / f"{rec.image_id}.grid").exists()
        for name in ("vertical_1", "vertical_2", "horizontal_1", "horizontal_2"):
            assert (out / "per_model" / name / f"{rec.image_id}.pgm").exists()
    ev = tmp_path / "ev"
    assert run("evaluate", "--manifest", small_data / "manifest.tsv", "--test-fold", 0, "--predictions", out,
               "--out", ev) == 0
    per_model = read_csv(ev / "per_model.csv")
    assert [r["model"] for r in per_model] == ["vertical_1", "vertical_2", "horizontal_1", "horizontal_2",
                                               "ensemble"]
    assert read_csv(ev / "dr_hist.csv")[0].keys() == {"bin_low", "bin_high", "count"}


def test_segment_missing_checkpoint(small_data, trained, tmp_path, capsys):
    ck = tmp_path / "ck"
    ck.mkdir()
    for n in os.listdir(trained):
        if n != "horizontal_2.ckpt":
            (ck / n).write_bytes((trained / n).read_bytes())
    code = run("segment", "--manifest", small_data / "manifest.tsv", "--checkpoints", ck, "--out", tmp_path / "o")
    assert code != 0 and "horizontal_2.ckpt" in capsys.readouterr().err
    (ck / "horizontal_2.ckpt").write_bytes(b"garbage\n")
    code = run("segment", "--manifest", small_data / "manifest.tsv", "--checkpoints", ck, "--out", tmp_path / "o")
    assert code != 0 and "horizontal_2.ckpt" in capsys.readouterr().err


def put_predictions(manifest, fold, root, fn):
    os.makedirs(root / "pred", exist_ok=True)
    for rec in manifest.fold(fold):
        truth = data_io.read_mask(manifest.resolve(rec.mask_path))
        data_io.write_mask(root / "pred" / f"{rec.image_id}.pgm", fn(rec, truth))


def test_evaluate_truth_and_empty(small_data, tmp_path):
    m = data_io.load_manifest(small_data / "manifest.tsv")
    fold = m.records[0].fold
    put_predictions(m, fold, tmp_path / "p", lambda rec, t: t)
    assert run("evaluate", "--manifest", small_data / "manifest.tsv", "--test-fold", fold,
               "--predictions", tmp_path / "p", "--out", tmp_path / "e") == 0
    summ = {r["metric"]: float(r["mean"]) for r in read_csv(tmp_path / "e" / "summary.csv")}
    assert summ == {"dr": 1.0, "tpf": 1.0, "hd": 0.0, "cd": 0.0}

    first = m.fold(fold)[0].image_id
    put_predictions(m, fold, tmp_path / "q",
                    lambda rec, t: np.zeros_like(t) if rec.image_id == first else disk(t.shape, (40, 40), 9))
    assert run("evaluate", "--manifest", small_data / "manifest.tsv", "--test-fold", fold,
               "--predictions", tmp_path / "q", "--out", tmp_path / "f") == 0
    rows = read_csv(tmp_path / "f" / "metrics.csv")
    empty = next(r for r in rows if r["image_id"] == first)
    assert float(empty["dr"]) == 0.0 and float(empty["tpf"]) == 0.0
    summ = {r["metric"]: float(r["mean"]) for r in read_csv(tmp_path / "f" / "summary.csv")}
    for k in ("dr", "tpf", "hd", "cd"):
        vals = [float(r[k]) for r in rows if not math.isnan(float(r[k]))]
        assert summ[k] == pytest.approx(sum(vals) / len(vals), rel=1e-12)


def test_evaluate_dimension_mismatch_continues(small_data, tmp_path, capsys):
    m = data_io.load_manifest(small_data / "manifest.tsv")
    fold = m.records[0].fold
    bad = m.fold(fold)[0].image_id
    put_predictions(m, fold, tmp_path / "p",
                    lambda rec, t: np.zeros((5, 5), bool) if rec.image_id == bad else t)
    code = run("evaluate", "--manifest", small_data / "manifest.tsv", "--test-fold", fold,
               "--predictions", tmp_path / "p", "--out", tmp_path / "e")
    assert code != 0
    assert bad in capsys.readouterr().err
    rows = read_csv(tmp_path / "e" / "metrics.csv")
    assert len(rows) == len(m.fold(fold)) - 1 and all(float(r["dr"]) == 1.0 for r in rows)


def test_inspect_sampling(tmp_path):
    mask = disk((120, 120), (60, 55), 12)
    img = np.where(mask, 0.9, 0.2)
    data_io.write_image(tmp_path / "i.pgm", img)
    data_io.write_mask(tmp_path / "m.pgm", mask)
    args = ["inspect-sampling", "--image", tmp_path / "i.pgm", "--mask", tmp_path / "m.pgm", "--seed", 3]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    for n in ("basic_vertical.csv", "basic_horizontal.csv", "cover_vertical.csv", "cover_horizontal.csv",
              "rings.csv"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    with open(tmp_path / "a" / "basic_vertical.csv") as fh:
        specs = sampling.read_specs_csv(fh)
    assert sum(s.label.value == "tumor" for s in specs) == int(math.floor(mask.sum() / 3 + 0.5))
    stats = sampling.region_stats(mask)
    radii = np.array([float(r["radius"]) for r in read_csv(tmp_path / "a" / "rings.csv")])
    for s in specs:
        if s.label.value == "non_tumor":
            assert np.abs(math.dist(s.center, stats.centroid) - radii).min() <= 1.0
    with open(tmp_path / "a" / "cover_vertical.csv") as fh:
        cover = sampling.read_specs_csv(fh)
    assert cover and all(s.orientation.value == "horizontal" for s in cover)


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nsubjects = 3\nimages-per-subject = 1\nfolds = 3\nimage_size = 64\n"
                   "diameter_max = 20\nseed = 9\n")
    assert run("generate", "--config", cfg, "--subjects", 4, "--out", tmp_path / "g") == 0
    eff = cli.read_config_file(tmp_path / "g" / "run.cfg")
    assert eff["subjects"] == 4 and eff["seed"] == 9 and eff["image_size"] == 64
    assert len(data_io.load_manifest(tmp_path / "g" / "manifest.tsv").records) == 4
    (tmp_path / "bad.cfg").write_text("no_such_key = 1\n")
    assert run("generate", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "h") != 0


def test_defaults_complete():
    cfg = cli.RunConfig()
    assert cfg.rounds == 3 and cfg.learning_rate == 0.0005 and cfg.stride == 1 and cfg.folds == 3

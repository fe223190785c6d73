import numpy as np
import pytest

from strata import parallel
from strata.cli import PipelineConfig, labels_from_image, load_truth, main, read_config
from strata.cluster import LabelMap, render_label_map
from strata.cube_io import load_cube, load_gray
from strata.dimred import load_model
from strata.errors import FormatError


def read_kv(path):
    out = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition(" = ")
        out[key] = value
    return out


@pytest.fixture(scope="module")
def small_phantom(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ph"
    assert main(["-q", "phantom", "--preset", "default", "--size", "64x64",
                 "--bands", "1040", "--out", str(out)]) == 0
    return out


def run_separate(ph, out, *extra):
    return main(["-q", "separate", "--cube", str(ph / "cube.hdr"), "--white",
                 str(ph / "white.hdr"), "--out", str(out), "--k", "4", "--restarts", "2",
                 *extra])


# -- phantom -----------------------------------------------------------------


def test_phantom_layout(small_phantom):
    cube = load_cube(small_phantom / "cube.hdr")
    assert (cube.bands, cube.height, cube.width) == (1040, 64, 64)
    masks = sorted(p.name for p in (small_phantom / "masks").glob("*.pgm"))
    assert masks == ["00_graphite.pgm", "01_red_chalk.pgm", "02_ink.pgm"]
    assert len(list((small_phantom / "scans").glob("step_*.pgm"))) == 4


def test_phantom_from_spec_file(tmp_path):
    spec = tmp_path / "s.toml"
    spec.write_text('width = 16\nheight = 12\nbands = 24\n[[layers]]\nmaterial = "graphite"\n'
                    '[[layers.shapes]]\nkind = "line"\nwidth = 3\npoints = [[2, 6], [13, 6]]\n')
    assert main(["-q", "phantom", "--spec", str(spec), "--out", str(tmp_path / "p"),
                 "--bands", "40"]) == 0
    assert load_cube(tmp_path / "p" / "cube.hdr").bands == 40


# -- separate ----------------------------------------------------------------


@pytest.fixture(scope="module")
def separated(small_phantom, tmp_path_factory):
    out = tmp_path_factory.mktemp("sep") / "run"
    assert run_separate(small_phantom, out) == 0
    return out


def test_separate_artifacts(separated):
    for name in ("normalized.hdr", "normalized.raw", "pca_model.txt", "scores_summary.txt",
                 "labels.pgm", "labels.txt", "manifest.txt"):
        assert (separated / name).is_file(), name
    assert len(list((separated / "layers").glob("cluster_*_mask.pgm"))) == 4
    assert len(list((separated / "layers").glob("cluster_*_inverse.pgm"))) == 4


def test_separate_manifest(separated):
    m = read_kv(separated / "manifest.txt")
    assert m["bands_after_binning"] == "258"
    assert m["trim"] == "4,4" and m["bin"] == "4" and m["k"] == "4"
    k = int(m["pca_components"])
    assert k == load_model(separated / "pca_model.txt").k
    assert len(m["explained_ratio"].split()) == k
    cum = float(m["cumulative_ratio"])
    assert cum >= 0.995
    assert abs(float(m["residual_ratio"]) - (1 - cum)) < 1e-6


def test_labels_sidecar_counts(separated):
    side = read_kv(separated / "labels.txt")
    img = load_gray(separated / "labels.pgm")
    counts = [int(side[f"pixels_{i}"]) for i in range(4)]
    assert sum(counts) == img.pixels.size
    assert side["method"] == "gmm"
    assert len(side["weights"].split()) == 4


def test_layer_masks_partition_the_image(separated):
    masks = [load_gray(p).pixels == 255
             for p in sorted((separated / "layers").glob("cluster_*_mask.pgm"))]
    total = np.sum(masks, axis=0)
    assert (total == 1).all()


def test_config_file_and_flag_precedence(small_phantom, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# pipeline\nk = 3\nmethod = kmeans\npca_k = 2\nbogus = 1\n")
    out = tmp_path / "run"
    assert main(["-q", "separate", "--cube", str(small_phantom / "cube.hdr"),
                 "--out", str(out), "--config", str(cfg), "--restarts", "1"]) == 0
    m = read_kv(out / "manifest.txt")
    assert (m["k"], m["method"], m["pca_components"]) == ("3", "kmeans", "2")
    assert "inertia" in m
    out2 = tmp_path / "run2"
    assert main(["-q", "separate", "--cube", str(small_phantom / "cube.hdr"),
                 "--out", str(out2), "--config", str(cfg), "--k", "2", "--restarts", "1"]) == 0
    assert read_kv(out2 / "manifest.txt")["k"] == "2"


def test_read_config_rejects_bad_values(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("k = four\n")
    with pytest.raises(FormatError):
        read_config(cfg)
    cfg.write_text("trim = 2,2\nvariance = 0.9\n")
    assert read_config(cfg) == {"trim": (2, 2), "variance": 0.9}


def test_config_echo():
    lines = PipelineConfig(k=4).echo()
    assert "trim = 4,4" in lines and "k = 4" in lines


# -- compare -----------------------------------------------------------------


def test_compare_with_truth(small_phantom, tmp_path):
    out = tmp_path / "cmp"
    assert main(["-q", "compare", "--cube", str(small_phantom / "cube.hdr"), "--white",
                 str(small_phantom / "white.hdr"), "--out", str(out), "--k", "4",
                 "--restarts", "2", "--truth", str(small_phantom / "masks")]) == 0
    for method in ("kmeans", "gmm"):
        assert (out / method / "labels.pgm").is_file()
        report = read_kv(out / f"report_{method}.txt")
        metric_keys = [k for k in report if k.startswith("iou_") or k in
                       ("pixel_accuracy", "purity")]
        assert sorted(metric_keys) == ["iou_graphite", "iou_ink", "iou_red_chalk",
                                       "pixel_accuracy", "purity"]
        for key in metric_keys:
            assert 0.0 <= float(report[key]) <= 1.0
    m = read_kv(out / "manifest.txt")
    assert "kmeans.inertia" in m and "gmm.log_likelihood" in m
    assert "method" not in m


def test_compare_without_truth(small_phantom, tmp_path):
    out = tmp_path / "cmp"
    assert main(["-q", "compare", "--cube", str(small_phantom / "cube.hdr"), "--out", str(out),
                 "--k", "3", "--restarts", "1"]) == 0
    assert not list(out.glob("report_*.txt"))
    assert (out / "kmeans" / "labels.txt").is_file()


# -- staged subcommands ------------------------------------------------------


def test_staged_pipeline(small_phantom, tmp_path):
    cube, white = str(small_phantom / "cube.hdr"), str(small_phantom / "white.hdr")
    assert main(["-q", "normalize", "--in", cube, "--white", white,
                 "--out", str(tmp_path / "n.hdr"), "--factors", str(tmp_path / "f.txt")]) == 0
    assert len((tmp_path / "f.txt").read_text().splitlines()) == 1041
    assert main(["-q", "bin", "--in", str(tmp_path / "n.hdr"), "--out",
                 str(tmp_path / "b.hdr")]) == 0
    assert load_cube(tmp_path / "b.hdr").bands == 258
    assert main(["-q", "pca", "--in", str(tmp_path / "b.hdr"), "--k", "3", "--model",
                 str(tmp_path / "m.txt"), "--scores", str(tmp_path / "s.npy")]) == 0
    assert np.load(tmp_path / "s.npy").shape == (64, 64, 3)
    assert main(["-q", "cluster", "--scores", str(tmp_path / "s.npy"), "--method", "kmeans",
                 "--k", "3", "--restarts", "1", "--out", str(tmp_path / "c")]) == 0
    assert read_kv(tmp_path / "c" / "labels.txt")["method"] == "kmeans"


def test_evaluate_round_trip(separated, small_phantom, tmp_path, capsys):
    report = tmp_path / "r.txt"
    assert main(["-q", "evaluate", "--labels", str(separated / "labels.pgm"), "--truth",
                 str(small_phantom / "masks"), "--report", str(report)]) == 0
    assert "pixel_accuracy" in read_kv(report)
    assert main(["-q", "evaluate", "--labels", str(separated / "labels.pgm"), "--truth",
                 str(small_phantom / "masks")]) == 0
    assert capsys.readouterr().out == report.read_text()


def test_labels_from_rendered_image():
    lm = LabelMap(np.array([[0, 2], [1, 2]]), 3)
    back = labels_from_image(render_label_map(lm))
    np.testing.assert_array_equal(back.labels, lm.labels)


def test_load_truth_strips_index(small_phantom):
    truth = load_truth(small_phantom / "masks")
    assert truth.names == ("graphite", "red_chalk", "ink")


# -- exit codes and threads --------------------------------------------------


def test_missing_k_is_usage_error(small_phantom, tmp_path, capsys):
    code = main(["-q", "separate", "--cube", str(small_phantom / "cube.hdr"),
                 "--out", str(tmp_path / "x")])
    assert code == 2
    assert "K is required" in capsys.readouterr().err


def test_argparse_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["separate", "--cube", "a.hdr", "--out", "o", "--k", "2",
              "--pca-k", "2", "--variance", "0.9"])
    assert info.value.code == 2


def test_format_error_exit_three(tmp_path):
    bad = tmp_path / "bad.hdr"
    bad.write_text("not a header\n")
    assert main(["-q", "separate", "--cube", str(bad), "--out", str(tmp_path / "o"),
                 "--k", "2"]) == 3
    assert main(["-q", "separate", "--cube", str(tmp_path / "missing.hdr"),
                 "--out", str(tmp_path / "o"), "--k", "2"]) == 3


def test_numeric_error_exit_four(tmp_path):
    scores = tmp_path / "s.npy"
    np.save(scores, np.zeros((2, 2, 1)))
    assert main(["-q", "cluster", "--scores", str(scores), "--k", "9",
                 "--out", str(tmp_path / "c")]) == 4


def test_threads_flag_after_subcommand(small_phantom, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_separate(small_phantom, a, "--threads", "1") == 0
    assert main(["--threads", "3", "-q", "separate", "--cube", str(small_phantom / "cube.hdr"),
                 "--white", str(small_phantom / "white.hdr"), "--out", str(b), "--k", "4",
                 "--restarts", "2"]) == 0
    for name in ("labels.pgm", "manifest.txt", "pca_model.txt", "normalized.raw"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("STRATA_THREADS", "3")
    assert parallel.resolve_threads() == 3
    assert parallel.resolve_threads(2) == 2
    monkeypatch.delenv("STRATA_THREADS")
    assert parallel.resolve_threads() >= 1

import json
import subprocess
import sys

import numpy as np
import pytest

from camforge.cli import EXIT_CHECK, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from camforge.evalharness import write_synthetic_dataset
from camforge.nn import forward, load_model
from camforge.postproc import read_image, synthetic_image, write_image


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-model", "--seed", "42", "--arch", "tiny", "--out", str(root / "m.camf")]) == EXIT_OK
    write_image(synthetic_image(7), root / "img.pgm")
    write_synthetic_dataset(root / "ds", 6, seed=3)
    return root


def test_gen_model_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-model", "--seed", "42", "--out", str(tmp_path / f"{name}.camf")]) == EXIT_OK
    assert (tmp_path / "a.camf").read_bytes() == (tmp_path / "b.camf").read_bytes()


def test_gen_model_small(tmp_path):
    assert main(["gen-model", "--seed", "1", "--arch", "small", "--out", str(tmp_path / "s.camf")]) == EXIT_OK
    assert load_model(tmp_path / "s.camf").shapes[-4] == (16, 4, 4)


def test_attribute_output_size(work, tmp_path):
    out, ov = tmp_path / "h.pgm", tmp_path / "o.ppm"
    rc = main(["attribute", "--model", str(work / "m.camf"), "--image", str(work / "img.pgm"), "--out", str(out),
               "--overlay", str(ov)])
    assert rc == EXIT_OK
    assert out.read_bytes().startswith(b"P5\n16 16\n255\n")
    assert read_image(out).shape == (1, 16, 16)
    assert read_image(ov).shape == (3, 16, 16)


@pytest.mark.parametrize("method", ["gradcam", "gradcam-plus", "gradcam-pp"])
def test_argmax_equals_explicit_class(work, tmp_path, method):
    m = load_model(work / "m.camf")
    c = int(np.argmax(forward(m, read_image(work / "img.pgm")).pre_softmax))
    base = ["attribute", "--model", str(work / "m.camf"), "--image", str(work / "img.pgm"), "--method", method]
    assert main(base + ["--out", str(tmp_path / "a.pgm")]) == EXIT_OK
    assert main(base + ["--class", str(c), "--out", str(tmp_path / "b.pgm")]) == EXIT_OK
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_explain(work, tmp_path, capsys):
    rc = main(["explain", "--model", str(work / "m.camf"), "--image", str(work / "img.pgm"), "--out",
               str(tmp_path / "h.pgm"), "--explanation", str(tmp_path / "e.pgm"), "--score", "post"])
    assert rc == EXIT_OK
    assert "post-softmax score" in capsys.readouterr().out
    assert np.all(read_image(tmp_path / "e.pgm") <= read_image(work / "img.pgm") + 1 / 255)


def test_evaluate(work, tmp_path, capsys):
    rc = main(["evaluate", "--model", str(work / "m.camf"), "--dataset", str(work / "ds"), "--confidence", "0",
               "--report", str(tmp_path / "r.json")])
    assert rc == EXIT_OK
    reports = json.loads((tmp_path / "r.json").read_text())["reports"]
    assert len(reports) == 3 and all(r["sample_count"] == 6 for r in reports)
    assert capsys.readouterr().out.count("relative performance") == 3


def test_evaluate_empty_set(work, tmp_path):
    rc = main(["evaluate", "--model", str(work / "m.camf"), "--dataset", str(work / "ds"), "--confidence", "1",
               "--report", str(tmp_path / "r.csv")])
    assert rc == EXIT_IO


def test_alpha_stats(work, tmp_path):
    rc = main(["alpha-stats", "--model", str(work / "m.camf"), "--dataset", str(work / "ds"), "--layer", "4",
               "--out", str(tmp_path / "s.json")])
    assert rc == EXIT_OK
    stats = json.loads((tmp_path / "s.json").read_text())["alpha_stats"]
    assert stats["q1"] <= stats["median"] <= stats["q3"]


def test_check_grad(work, tmp_path):
    rc = main(["check-grad", "--model", str(work / "m.camf"), "--out", str(tmp_path / "g.json")])
    assert rc == EXIT_OK
    assert json.loads((tmp_path / "g.json").read_text())["passed"]


def test_check_grad_failure_exit(work):
    assert main(["check-grad", "--model", str(work / "m.camf"), "--tol", "1e-300", "--probes", "5"]) == EXIT_CHECK


def test_check_derivation(tmp_path):
    assert main(["check-derivation", "--out", str(tmp_path / "a.json")]) == EXIT_OK
    report = json.loads((tmp_path / "a.json").read_text())
    assert report["passed"] and report["layer_shape"] == [2, 3, 3]


def test_check_derivation_on_model(work, tmp_path):
    rc = main(["check-derivation", "--model", str(work / "m.camf"), "--families", "5", "--out",
               str(tmp_path / "a.json")])
    assert rc == EXIT_OK


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["gen-model", "--out", "x.camf"],
    ["attribute", "--model", "m", "--image", "i", "--out", "o", "--lambda", "0"],
    ["attribute", "--model", "m", "--image", "i", "--out", "o", "--method", "scorecam"],
    ["check-grad", "--model", "m", "--tol", "-1"],
])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_bad_layer_is_usage_error(work, tmp_path):
    rc = main(["attribute", "--model", str(work / "m.camf"), "--image", str(work / "img.pgm"), "--layer", "5",
               "--out", str(tmp_path / "h.pgm")])
    assert rc == EXIT_USAGE


def test_class_out_of_range(work, tmp_path):
    rc = main(["attribute", "--model", str(work / "m.camf"), "--image", str(work / "img.pgm"), "--class", "10",
               "--out", str(tmp_path / "h.pgm")])
    assert rc == EXIT_USAGE


def test_io_errors(work, tmp_path):
    assert main(["check-grad", "--model", str(tmp_path / "missing.camf")]) == EXIT_IO
    (tmp_path / "bad.camf").write_bytes(b"NOPE")
    assert main(["check-grad", "--model", str(tmp_path / "bad.camf")]) == EXIT_IO
    (tmp_path / "bad.pgm").write_bytes(b"P5 2 2 65535\n")
    rc = main(["attribute", "--model", str(work / "m.camf"), "--image", str(tmp_path / "bad.pgm"), "--out",
               str(tmp_path / "h.pgm")])
    assert rc == EXIT_IO


def test_inputs_not_mutated(work, tmp_path):
    before = (work / "m.camf").read_bytes(), (work / "img.pgm").read_bytes()
    main(["explain", "--model", str(work / "m.camf"), "--image", str(work / "img.pgm"), "--out",
          str(tmp_path / "h.pgm"), "--explanation", str(tmp_path / "e.pgm")])
    assert ((work / "m.camf").read_bytes(), (work / "img.pgm").read_bytes()) == before


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "camforge", "gen-model", "--seed", "3", "--out",
                          str(tmp_path / "m.camf")], capture_output=True)
    assert out.returncode == 0 and (tmp_path / "m.camf").exists()

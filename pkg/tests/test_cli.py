import csv

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from dirnet import data_io
from dirnet.cli import main
from dirnet.network import build, preset_config


@pytest.fixture
def pgm_pair(tmp_path):
    img, mask = data_io.ring_image()
    moving = np.roll(img, 1, axis=1)
    for name, arr in (("f.pgm", img), ("m.pgm", moving), ("fm.pgm", mask), ("mm.pgm", np.roll(mask, 1, axis=1))):
        data_io.save_pgm(tmp_path / name, arr.astype(float))
    return tmp_path


def test_unknown_flag_is_usage_error(capsys):
    assert main(["baseline", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1


def test_missing_input_is_data_error(tmp_path):
    code = main(["baseline", "--fixed", str(tmp_path / "nope.pgm"), "--moving", str(tmp_path / "nope.pgm"),
                 "--out-warped", str(tmp_path / "w.pgm"), "--out-dvf", str(tmp_path / "w.dvf")])
    assert code == 2
    assert not (tmp_path / "w.pgm").exists()


def test_missing_output_directory_is_usage_error(pgm_pair):
    code = main(["baseline", "--fixed", str(pgm_pair / "f.pgm"), "--moving", str(pgm_pair / "m.pgm"),
                 "--out-warped", str(pgm_pair / "no" / "w.pgm"), "--out-dvf", str(pgm_pair / "w.dvf")])
    assert code == 1


def test_corrupt_pgm_is_data_error(pgm_pair):
    (pgm_pair / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    code = main(["baseline", "--fixed", str(pgm_pair / "bad.pgm"), "--moving", str(pgm_pair / "m.pgm"),
                 "--out-warped", str(pgm_pair / "w.pgm"), "--out-dvf", str(pgm_pair / "w.dvf")])
    assert code == 2


def test_baseline_command(pgm_pair):
    args = ["baseline", "--fixed", str(pgm_pair / "f.pgm"), "--moving", str(pgm_pair / "m.pgm"),
            "--iters", "50", "--out-warped", str(pgm_pair / "w.pgm"), "--out-dvf", str(pgm_pair / "w.dvf")]
    assert main(args) == 0
    first = (pgm_pair / "w.dvf").read_bytes()
    assert data_io.load_dvf(pgm_pair / "w.dvf").d.shape == (2, 28, 28)
    assert main(args) == 0
    assert (pgm_pair / "w.dvf").read_bytes() == first


def test_register_command_with_fresh_checkpoint(pgm_pair):
    cfg = preset_config("mnist", kernels_per_layer=4)
    data_io.save_checkpoint(pgm_pair / "net.ckpt", build(cfg, 0), cfg)
    code = main(["register", "--ckpt", str(pgm_pair / "net.ckpt"), "--fixed", str(pgm_pair / "f.pgm"),
                 "--moving", str(pgm_pair / "m.pgm"), "--out-warped", str(pgm_pair / "w.pgm"),
                 "--out-dvf", str(pgm_pair / "w.dvf")])
    assert code == 0
    assert_array_equal(data_io.load_pgm(pgm_pair / "w.pgm"), data_io.load_pgm(pgm_pair / "m.pgm"))
    assert_array_equal(data_io.load_dvf(pgm_pair / "w.dvf").d, 0.0)


def test_evaluate_command(pgm_pair):
    (pgm_pair / "pairs.csv").write_text("fixed,moving,fixed_mask,moving_mask\n"
                                        "f.pgm,m.pgm,fm.pgm,mm.pgm\nf.pgm,f.pgm,,\n")
    code = main(["evaluate", "--pairs", str(pgm_pair / "pairs.csv"), "--iters", "40",
                 "--out-csv", str(pgm_pair / "out.csv"), "--emit-average", str(pgm_pair / "avg.pgm")])
    assert code == 0
    rows = list(csv.DictReader(open(pgm_pair / "out.csv")))
    assert [r["pair_id"] for r in rows] == ["0", "1"]
    assert float(rows[0]["ncc_after"]) > float(rows[0]["ncc_before"])
    assert float(rows[0]["dice"]) > 0.8 and rows[1]["dice"] == ""
    assert data_io.load_pgm(pgm_pair / "avg.pgm").shape == (28, 28)


def test_evaluate_missing_listed_file(pgm_pair):
    (pgm_pair / "pairs.csv").write_text("fixed,moving\nf.pgm,gone.pgm\n")
    assert main(["evaluate", "--pairs", str(pgm_pair / "pairs.csv"), "--out-csv", str(pgm_pair / "o.csv")]) == 2
    assert not (pgm_pair / "o.csv").exists()


def test_gradcheck_command(tmp_path):
    report = tmp_path / "grad.csv"
    assert main(["gradcheck", "--seed", "1", "--seeds-per-op", "1", "--report", str(report)]) == 0
    rows = list(csv.DictReader(open(report)))
    assert {r["op"] for r in rows} >= {"conv2d", "warp", "ncc_loss", "end_to_end"}
    assert all(r["passed"] == "1" for r in rows)


def _train_args(out, *extra):
    return ["train", "--iters", "3", "--batch", "4", "--validation-every", "2", "--seed", "5",
            "--out-ckpt", str(out / "net.ckpt"), "--out-curve", str(out / "curve.csv"), *extra]


def test_train_rings_is_byte_identical_across_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for out in (a, b):
        assert main(_train_args(out, "--dataset", "rings", "--pool-cap", "12")) == 0
    assert (a / "net.ckpt").read_bytes() == (b / "net.ckpt").read_bytes()
    assert (a / "curve.csv").read_bytes() == (b / "curve.csv").read_bytes()
    assert [r[0] for r in data_io.read_curve_csv(a / "curve.csv")] == [0, 2, 3]


def test_train_mnist_needs_digit(tmp_path):
    assert main(_train_args(tmp_path, "--dataset", "mnist")) == 1


def test_train_mnist_smoke(tmp_path, mnist_dir):
    code = main(_train_args(tmp_path, "--dataset", "mnist", "--data-dir", str(mnist_dir), "--digit", "4",
                            "--pool-cap", "30"))
    assert code == 0
    params, cfg = data_io.load_checkpoint(tmp_path / "net.ckpt")
    assert cfg == preset_config("mnist")
    assert np.any(params["out.kernel"].data != 0.0)


def test_train_logs_resolved_config(tmp_path, caplog):
    with caplog.at_level("INFO", logger="dirnet"):
        main(_train_args(tmp_path, "--dataset", "rings", "--pool-cap", "12"))
    text = caplog.text
    assert '"batch_size": 4' in text and '"kernels_per_layer": 16' in text

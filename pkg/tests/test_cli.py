import json

import numpy as np
import pytest

from dbisl.cli import main, roundtrip_case
from dbisl.dtrans import TransformConfig
from dbisl.volio import read_csv, read_json, read_vol, tree_bytes, write_vol

SMALL = {
    "synth": {"size": 24, "n_labeled": 2, "n_unlabeled": 1, "n_test": 1},
    "train": {"max_iterations": 3, "patch_size": 16, "stride": 8, "widths": [4, 8, 16]},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_gen_is_byte_identical(tmp_path, cfg_path):
    assert main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "volumes/vol_003_mask.bvol" in a
    cfg = read_json(tmp_path / "a" / "config.json")
    assert cfg["loss"]["ramp_len"] == 1


def test_transform_modes(tmp_path):
    write_vol(tmp_path / "z.bvol", np.zeros((8, 8, 8), np.float32))
    assert main(["transform", "--in", str(tmp_path / "z.bvol"), "--mode", "r2s",
                 "--out", str(tmp_path / "o.bvol")]) == 0
    assert np.all(read_vol(tmp_path / "o.bvol").data == 0.5)
    m = np.zeros((8, 8, 8), np.uint8)
    m[4, 4, 4] = 1
    write_vol(tmp_path / "m.bvol", m)
    assert main(["transform", "--in", str(tmp_path / "m.bvol"), "--mode", "edt",
                 "--out", str(tmp_path / "e.bvol")]) == 0
    e = read_vol(tmp_path / "e.bvol").data
    assert e[4, 4, 4] == 0 and e[4, 4, 7] == 3
    assert main(["transform", "--in", str(tmp_path / "m.bvol"), "--mode", "s2r",
                 "--out", str(tmp_path / "s.bvol")]) == 0
    assert read_vol(tmp_path / "s.bvol").data[4, 4, 4] < 0


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"bogus": 1}}')
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["transform", "--in", str(tmp_path / "missing.bvol"), "--mode", "edt",
                 "--out", str(tmp_path / "o.bvol")]) == 3
    (tmp_path / "junk.bvol").write_bytes(b"nope")
    assert main(["transform", "--in", str(tmp_path / "junk.bvol"), "--mode", "edt",
                 "--out", str(tmp_path / "o.bvol")]) == 3
    assert main(["gradcheck", "--tol", "1e-30", "--max-coords", "4"]) == 4
    assert main(["frobnicate"]) == 2
    capsys.readouterr()


def test_json_errors(tmp_path, capsys):
    code = main(["--json-errors", "transform", "--in", str(tmp_path / "none.bvol"),
                 "--mode", "edt", "--out", str(tmp_path / "o.bvol")])
    err = json.loads(capsys.readouterr().err.strip())
    assert code == 3 and err["error"] == "io-failure" and err["exit_code"] == 3


def test_roundtrip_report(tmp_path, cfg_path):
    report = tmp_path / "rt.csv"
    assert main(["roundtrip", "--config", str(cfg_path), "--cases", "2",
                 "--mode", "offline-original", "--mode", "online-original",
                 "--report", str(report)]) == 0
    rows = read_csv(report)
    assert len(rows) == 4
    assert {r["mode"] for r in rows} == {"offline-original", "online-original"}
    assert all(float(r["dsc"]) == 1.0 for r in rows if r["mode"] == "offline-original")
    assert main(["roundtrip", "--config", str(cfg_path), "--mode", "sideways"]) == 2


def test_roundtrip_case_exact_on_ball():
    g = np.indices((20, 20, 20))
    m = ((g - 9.5) ** 2).sum(0) <= 36
    dsc, sec = roundtrip_case(m, "offline-original", TransformConfig())
    assert dsc == 1.0 and sec >= 0


def test_train_then_eval(tmp_path, cfg_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(run), "--quiet"]) == 0
    for name in ("config.json", "losses.csv", "report.json", "test_cases.csv",
                 "checkpoint/manifest.json"):
        assert (run / name).exists()
    assert len(read_csv(run / "losses.csv")) == 3
    assert main(["eval", "--run", str(run)]) == 0
    ev = read_json(run / "eval.json")
    rep = read_json(run / "report.json")
    assert ev["test"]["dice"] == pytest.approx(rep["test"]["dice"], abs=1e-12)


def test_bench_report(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--sizes", "16", "--rates", "1,0.5", "--cases", "1",
                 "--report", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 2 and all(float(r["spearman"]) > 0.9 for r in rows)

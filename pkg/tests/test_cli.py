import json

import numpy as np
import pytest

from fedsim.cli import main

from idx_fixtures import serialize_idx_images
from test_harness import small_config_dict


def write_config(tmp_path, **overrides):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(small_config_dict(**overrides)))
    return p


def test_run_subcommand(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["run", "--config", str(cfg),
                 "--out-dir", str(tmp_path / "out"), "--quiet"])
    assert code == 0
    assert (tmp_path / "out" / "metrics.csv").exists()
    assert (tmp_path / "out" / "summary.json").exists()


def test_run_seed_override(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--out-dir",
                 str(tmp_path / "out"), "--seed-override", "5,6",
                 "--quiet"]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["seeds"] == [5, 6]


def test_run_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"rounds": 0}))
    code = main(["run", "--config", str(p), "--out-dir", str(tmp_path)])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_run_missing_file_exit_code(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "nope.json"),
                 "--out-dir", str(tmp_path)])
    assert code == 2


def test_ablate_prints_pair(tmp_path, capsys):
    cfg = write_config(tmp_path, rounds=2, report_last=1)
    code = main(["ablate", "--config", str(cfg),
                 "--out-dir", str(tmp_path / "ab"), "--quiet"])
    assert code == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l]
    assert lines[0].startswith("with augmentation:")
    assert lines[1].startswith("without augmentation:")
    assert lines[2].startswith("delta:")
    assert (tmp_path / "ab" / "aug" / "metrics.csv").exists()
    assert (tmp_path / "ab" / "noaug" / "metrics.csv").exists()


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--trials", "2", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out and "OK" in out


def test_inspect_idx(tmp_path, capsys):
    imgs = np.arange(18, dtype=np.uint8).reshape(2, 3, 3)
    p = tmp_path / "sample.idx"
    p.write_bytes(serialize_idx_images(imgs))
    assert main(["inspect-idx", str(p)]) == 0
    header = json.loads(capsys.readouterr().out)
    assert header == {"kind": "images", "magic": "0x00000803",
                      "count": 2, "rows": 3, "cols": 3}


def test_inspect_idx_bad_file(tmp_path, capsys):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x00\x00\x00\x99junk")
    assert main(["inspect-idx", str(p)]) == 2
    assert "error" in capsys.readouterr().err

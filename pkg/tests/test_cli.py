import json
import subprocess
import sys

import numpy as np
import pytest

from reid3d.cli import main
from reid3d.config import parse_run_config
from reid3d.errors import ConfigError
from reid3d.evaluation import write_labels
from reid3d.tensor import make_rng, read_tensor, write_tensor

from oracles import cmc_map_oracle

SMALL_RUN = {
    "seed": 0,
    "steps": 12,
    "model": {"stem_channels": 4, "stem_spatial_kernel": 3, "embedding_dim": 16, "n_identities": 4,
              "stages": [{"n_blocks": 1, "channels": 4}, {"n_blocks": 1, "channels": 8, "stride": 2}],
              "nonlocal_placement": [[0], [0]]},
    "sampler": {"P": 2, "K": 2, "track_len": 4, "window": 8},
    "schedule": {"lr0": 0.003},
    "data": {"n_ids": 4, "seqs_per_id": 2, "seq_len": 8, "height": 8, "width": 8},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL_RUN))
    return path


@pytest.fixture
def trained(tmp_path, config_file):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    return out


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "7", "--tol", "1e-4"]) == 0
    first = capsys.readouterr().out
    assert "all passed" in first
    main(["gradcheck", "--seed", "7", "--tol", "1e-4"])
    assert capsys.readouterr().out == first


def test_gradcheck_unknown_op():
    with pytest.raises(SystemExit) as exc:
        main(["gradcheck", "--op", "nosuch"])
    assert exc.value.code == 2


def test_gradcheck_failure_exit_code():
    assert main(["gradcheck", "--op", "linear", "--tol", "0"]) == 1


def test_train_outputs_and_determinism(tmp_path, config_file, trained):
    resolved = json.loads((trained / "resolved_config.json").read_text())
    assert resolved["schedule"]["decay_rate"] == 0.001  # defaults are echoed
    assert resolved["optimizer"]["weight_decay"] == 0.0005
    assert parse_run_config(resolved).model.digest() == parse_run_config(SMALL_RUN).model.digest()
    csv = (trained / "loss_history.csv").read_text()
    assert len(csv.splitlines()) == 13
    assert (trained / "checkpoint.rckp").exists()
    again = tmp_path / "again"
    assert main(["train", "--config", str(config_file), "--out", str(again)]) == 0
    assert (again / "loss_history.csv").read_bytes() == csv.encode()
    assert (again / "checkpoint.rckp").read_bytes() == (trained / "checkpoint.rckp").read_bytes()
    # resolved config alone reproduces the run
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", str(trained / "resolved_config.json"), "--out", str(rerun)]) == 0
    assert (rerun / "loss_history.csv").read_text() == csv


def test_train_unknown_key_names_path(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**SMALL_RUN, "lr_warmup": 5}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "lr_warmup" in capsys.readouterr().err
    nested = tmp_path / "nested.json"
    nested.write_text(json.dumps({**SMALL_RUN, "model": {**SMALL_RUN["model"], "depth": 50}}))
    assert main(["train", "--config", str(nested), "--out", str(tmp_path / "o")]) == 2
    assert "model.depth" in capsys.readouterr().err


def test_config_errors_carry_paths():
    with pytest.raises(ConfigError) as exc:
        parse_run_config({"sampler": {"P": "four"}})
    assert exc.value.path == "sampler.P"
    with pytest.raises(ConfigError):
        parse_run_config({"model": {"nonlocal_placement": [[5], [0]]}})


def test_train_io_failure(tmp_path, config_file):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["train", "--config", str(config_file), "--out", str(blocker / "sub")]) == 1


def test_pipeline_end_to_end(tmp_path, config_file, trained, capsys):
    s = tmp_path / "synth"
    ck = str(trained / "checkpoint.rckp")
    assert main(["synth", "--config", str(config_file), "--out", str(s)]) == 0
    assert main(["extract", "--checkpoint", ck, "--input", str(s / "query_tracks.tnsr"),
                 "--output", str(tmp_path / "q.tnsr"), "--config", str(config_file)]) == 0
    assert main(["extract", "--checkpoint", ck, "--input", str(s / "gallery_tracks.tnsr"),
                 "--output", str(tmp_path / "g.tnsr")]) == 0
    q = read_tensor(tmp_path / "q.tnsr")
    assert q.shape == (4, 16)
    assert main(["extract", "--checkpoint", ck, "--input", str(s / "query_tracks.tnsr"),
                 "--output", str(tmp_path / "q2.tnsr")]) == 0
    assert (tmp_path / "q2.tnsr").read_bytes() == (tmp_path / "q.tnsr").read_bytes()
    assert main(["distances", "--query", str(tmp_path / "q.tnsr"), "--gallery", str(tmp_path / "g.tnsr"),
                 "--output", str(tmp_path / "d.tnsr")]) == 0
    capsys.readouterr()
    args = ["evaluate", "--distances", str(tmp_path / "d.tnsr"), "--query-ids", str(s / "query_ids.txt"),
            "--gallery-ids", str(s / "gallery_ids.txt"), "--query-cams", str(s / "query_cams.txt"),
            "--gallery-cams", str(s / "gallery_cams.txt"), "--ranks", "1,5", "--output", str(tmp_path / "r.csv")]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert out.startswith("rank,cmc\n1,") and "map," in out
    assert (tmp_path / "r.csv").read_text() == out


def test_extract_single_track_rows_and_empty_input(tmp_path, trained):
    ck = str(trained / "checkpoint.rckp")
    x = make_rng(0).standard_normal((3, 3, 4, 8, 8)).astype(np.float32)
    write_tensor(x, tmp_path / "x.tnsr")
    assert main(["extract", "--checkpoint", ck, "--input", str(tmp_path / "x.tnsr"),
                 "--output", str(tmp_path / "f.tnsr")]) == 0
    batch = read_tensor(tmp_path / "f.tnsr")
    for k in range(3):
        write_tensor(x[k : k + 1], tmp_path / "one.tnsr")
        assert main(["extract", "--checkpoint", ck, "--input", str(tmp_path / "one.tnsr"),
                     "--output", str(tmp_path / "one_f.tnsr")]) == 0
        np.testing.assert_allclose(read_tensor(tmp_path / "one_f.tnsr")[0], batch[k], atol=1e-6, rtol=0)
    write_tensor(np.zeros((0, 3, 4, 8, 8), np.float32), tmp_path / "empty.tnsr")
    assert main(["extract", "--checkpoint", ck, "--input", str(tmp_path / "empty.tnsr"),
                 "--output", str(tmp_path / "e.tnsr")]) == 0
    assert read_tensor(tmp_path / "e.tnsr").shape == (0, 16)


def test_extract_errors(tmp_path, trained, config_file):
    ck = str(trained / "checkpoint.rckp")
    x = tmp_path / "x.tnsr"
    write_tensor(np.zeros((1, 3, 4, 8, 8), np.float32), x)
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL_RUN, "model": {**SMALL_RUN["model"], "embedding_dim": 8}}))
    assert main(["extract", "--checkpoint", ck, "--input", str(x), "--output", str(tmp_path / "o"),
                 "--config", str(other)]) == 2
    bad = tmp_path / "bad.tnsr"
    bad.write_bytes(b"XXXX" + x.read_bytes()[4:])
    assert main(["extract", "--checkpoint", ck, "--input", str(bad), "--output", str(tmp_path / "o")]) == 2
    truncated = tmp_path / "ck.rckp"
    truncated.write_bytes((trained / "checkpoint.rckp").read_bytes()[:100])
    assert main(["extract", "--checkpoint", str(truncated), "--input", str(x), "--output", str(tmp_path / "o")]) == 2


def write_protocol(tmp_path, dist, q, g, qc=None, gc=None):
    write_tensor(dist, tmp_path / "d.tnsr")
    write_labels(q, tmp_path / "q.txt")
    write_labels(g, tmp_path / "g.txt")
    args = ["evaluate", "--distances", str(tmp_path / "d.tnsr"), "--query-ids", str(tmp_path / "q.txt"),
            "--gallery-ids", str(tmp_path / "g.txt")]
    if qc is not None:
        write_labels(qc, tmp_path / "qc.txt")
        write_labels(gc, tmp_path / "gc.txt")
        args += ["--query-cams", str(tmp_path / "qc.txt"), "--gallery-cams", str(tmp_path / "gc.txt")]
    return args


def test_evaluate_perfect_fixture(tmp_path, capsys):
    args = write_protocol(tmp_path, np.array([[0.1, 0.9], [0.8, 0.2]]), [0, 1], [0, 1])
    assert main(args + ["--ranks", "1,2"]) == 0
    assert capsys.readouterr().out == "rank,cmc\n1,1\n2,1\nmap,1,n_valid,2\n"


def test_evaluate_matches_oracle_fixture(tmp_path, capsys):
    rng = make_rng(4)
    d = rng.uniform(0, 3, (6, 10))
    q, g = rng.integers(0, 3, 6), rng.integers(0, 3, 10)
    qc, gc = rng.integers(0, 2, 6), rng.integers(0, 2, 10)
    ref_cmc, ref_map, n = cmc_map_oracle(d, q, g, qc, gc, 10)
    assert main(write_protocol(tmp_path, d, q, g, qc, gc) + ["--ranks", "1,3,10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1:4] == [f"{r},{ref_cmc[r - 1]:.9g}" for r in (1, 3, 10)]
    assert lines[4] == f"map,{ref_map:.9g},n_valid,{n}"


def test_evaluate_label_count_mismatch(tmp_path):
    assert main(write_protocol(tmp_path, np.zeros((2, 3)), [0, 1], [0, 1])) == 2
    with pytest.raises(SystemExit) as exc:
        main(write_protocol(tmp_path, np.zeros((2, 2)), [0, 1], [0, 1]) + ["--ranks", "0"])
    assert exc.value.code == 2


def test_inspect(tmp_path, capsys, trained):
    t = make_rng(0).standard_normal((2, 3, 5)).astype(np.float32)
    write_tensor(t, tmp_path / "t.tnsr")
    assert main(["inspect", "--file", str(tmp_path / "t.tnsr")]) == 0
    out = capsys.readouterr().out
    assert "shape: (2, 3, 5)" in out and "dtype: float32" in out

    x = make_rng(1).standard_normal((2, 3, 4, 8, 8)).astype(np.float32)
    write_tensor(x, tmp_path / "x.tnsr")
    att = tmp_path / "att"
    assert main(["inspect", "--file", str(tmp_path / "x.tnsr"), "--attention", "--checkpoint",
                 str(trained / "checkpoint.rckp"), "--input", str(tmp_path / "x.tnsr"), "--out-dir", str(att)]) == 0
    maps = sorted(att.glob("*.tnsr"))
    assert len(maps) == 2  # one per configured non-local block
    for path in maps:
        a = read_tensor(path)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)

    (tmp_path / "bad.tnsr").write_bytes(b"TNSR\x01")
    assert main(["inspect", "--file", str(tmp_path / "bad.tnsr")]) == 2
    assert main(["inspect", "--file", str(tmp_path / "t.tnsr"), "--attention"]) == 2


def test_module_entry_point_exit_codes():
    ok = subprocess.run([sys.executable, "-m", "reid3d", "gradcheck", "--op", "linear"], capture_output=True)
    assert ok.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "reid3d", "gradcheck", "--op", "nosuch"], capture_output=True)
    assert bad.returncode == 2

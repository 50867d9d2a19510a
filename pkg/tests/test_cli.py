"""Command-line interface: subcommand round trip, output formats, exit
codes, and environment overrides."""

import numpy as np
import pytest

from panoloc.cli import EXIT_OK, EXIT_USAGE, main
from panoloc.io import load_gray_image, load_intrinsics, load_point_cloud, load_trajectory
from panoloc.mapdb import load_database


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Small synthetic dataset generated through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["synth", "--out", str(data), "--seed", "1",
               "--poses", "4", "--queries", "3", "--extent", "12",
               "--walls", "6", "--density", "300",
               "--jitter-trans", "0.2", "--jitter-rot", "2.0"])
    assert rc == EXIT_OK
    return data


@pytest.fixture(scope="module")
def db_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("db") / "db"
    rc = main(["build-db", str(dataset / "map.ply"), str(dataset / "traj.txt"),
               str(out)])
    assert rc == EXIT_OK
    return out


def test_synth_writes_expected_files(dataset):
    assert (dataset / "map.ply").exists()
    assert (dataset / "traj.txt").exists()
    assert (dataset / "intrinsics.cfg").exists()
    assert (dataset / "gt.txt").exists()
    queries = sorted((dataset / "queries").glob("query_*.pgm"))
    assert len(queries) == 3
    cloud = load_point_cloud(dataset / "map.ply")
    assert len(cloud) > 1000
    traj = load_trajectory(dataset / "traj.txt")
    assert len(traj) == 4
    gt = load_trajectory(dataset / "gt.txt")
    assert len(gt) == 3
    K = load_intrinsics(dataset / "intrinsics.cfg")
    img = load_gray_image(queries[0])
    assert img.shape == (K.height, K.width)


def test_build_db_persists_database(db_dir):
    db = load_database(db_dir)
    assert len(db.images) == 4


def test_retrieve_output_format(dataset, db_dir, capsys):
    q = sorted((dataset / "queries").glob("*.pgm"))[0]
    rc = main(["retrieve", str(db_dir), str(q)])
    assert rc == EXIT_OK
    lines = [l for l in capsys.readouterr().out.splitlines() if l and not l.startswith("#")]
    assert lines
    for line in lines:
        image_id, patch, score, label = line.split()
        assert 0 <= int(image_id) < 4
        assert 0 <= int(patch) < 4
        assert -1.0 <= float(score) <= 1.0
        int(label)


def test_retrieve_multiple_queries_have_headers(dataset, db_dir, capsys):
    qs = [str(p) for p in sorted((dataset / "queries").glob("*.pgm"))]
    rc = main(["retrieve", str(db_dir)] + qs)
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    for q in ("query_0000", "query_0001", "query_0002"):
        assert f"# query {q}" in out


@pytest.fixture(scope="module")
def reloc_output(dataset, db_dir, tmp_path_factory):
    import io
    import contextlib
    qs = [str(p) for p in sorted((dataset / "queries").glob("*.pgm"))]
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = main(["relocalize", str(db_dir), str(dataset / "intrinsics.cfg")] + qs)
    assert rc == EXIT_OK
    results = tmp_path_factory.mktemp("res") / "results.txt"
    results.write_text(buf.getvalue())
    return results, buf.getvalue()


def test_relocalize_line_format(reloc_output):
    _, text = reloc_output
    lines = [l for l in text.splitlines() if l.strip()]
    assert len(lines) == 3
    for line in lines:
        tokens = line.split("#", 1)[0].split()
        assert tokens[0].startswith("query_")
        assert tokens[1] in ("OK", "FAILED")
        assert len(tokens) == 12  # name status tx ty tz qx qy qz qw inl ratio err
        if tokens[1] == "OK":
            q = np.array([float(v) for v in tokens[5:9]])
            assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-6)
            assert int(tokens[9]) >= 4  # inliers
    assert any("OK" in l for l in lines)


def test_evaluate_round_trip(reloc_output, dataset, tmp_path, capsys):
    results, _ = reloc_output
    tsv = tmp_path / "report.tsv"
    rc = main(["evaluate", str(results), str(dataset / "gt.txt"),
               "--out-tsv", str(tsv)])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "queries: 3" in out
    assert "RR(0.5m/1.0deg):" in out
    header, row = tsv.read_text().strip().splitlines()
    cols = header.split("\t")
    vals = row.split("\t")
    assert len(cols) == len(vals) == 7  # 3 RR gates + 4 error stats
    for name, val in zip(cols, vals):
        if name.startswith("RR"):
            assert 0.0 <= float(val) <= 1.0


def test_evaluate_id_mismatch_is_usage_error(reloc_output, tmp_path, capsys):
    results, _ = reloc_output
    bad_gt = tmp_path / "gt.txt"
    bad_gt.write_text("0 0 0 0 0 0 0 1\n")  # only one query
    rc = main(["evaluate", str(results), str(bad_gt)])
    assert rc == EXIT_USAGE
    assert "mismatch" in capsys.readouterr().err


def test_evaluate_missing_results_file(dataset, capsys):
    rc = main(["evaluate", "/nonexistent/results.txt", str(dataset / "gt.txt")])
    assert rc == EXIT_USAGE


def test_render_pano_writes_image(dataset, tmp_path):
    out = tmp_path / "pano.pgm"
    rc = main(["render-pano", str(dataset / "map.ply"), str(dataset / "traj.txt"),
               "--index", "0", "--out", str(out)])
    assert rc == EXIT_OK
    img = load_gray_image(out)
    assert img.shape == (480, 1920)
    assert img.max() > 0


def test_render_pano_index_out_of_range(dataset, capsys):
    rc = main(["render-pano", str(dataset / "map.ply"), str(dataset / "traj.txt"),
               "--index", "99", "--out", "/tmp/unused.pgm"])
    assert rc == EXIT_USAGE
    assert "out of range" in capsys.readouterr().err


def test_missing_input_file_is_usage_error(tmp_path, capsys):
    rc = main(["build-db", "/nonexistent/map.ply", "/nonexistent/traj.txt",
               str(tmp_path / "db")])
    assert rc == EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_unknown_set_key_is_usage_error(dataset, tmp_path, capsys):
    rc = main(["build-db", str(dataset / "map.ply"), str(dataset / "traj.txt"),
               str(tmp_path / "db"), "--set", "bogus.key=1"])
    assert rc == EXIT_USAGE
    assert "unknown config key" in capsys.readouterr().err


def test_malformed_set_is_usage_error(dataset, tmp_path, capsys):
    rc = main(["build-db", str(dataset / "map.ply"), str(dataset / "traj.txt"),
               str(tmp_path / "db"), "--set", "novalue"])
    assert rc == EXIT_USAGE


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE


def test_reloc_seed_env_overrides_config(dataset, db_dir, monkeypatch, capsys):
    # an invalid seed value proves the variable is consumed
    monkeypatch.setenv("RELOC_SEED", "not-a-number")
    q = sorted((dataset / "queries").glob("*.pgm"))[0]
    rc = main(["relocalize", str(db_dir), str(dataset / "intrinsics.cfg"), str(q)])
    assert rc == EXIT_USAGE
    capsys.readouterr()


def test_reloc_seed_env_applied(dataset, db_dir, monkeypatch, capsys):
    monkeypatch.setenv("RELOC_SEED", "7")
    q = sorted((dataset / "queries").glob("*.pgm"))[0]
    rc = main(["relocalize", str(db_dir), str(dataset / "intrinsics.cfg"), str(q)])
    assert rc == EXIT_OK
    out1 = capsys.readouterr().out
    rc = main(["relocalize", str(db_dir), str(dataset / "intrinsics.cfg"), str(q)])
    assert rc == EXIT_OK
    out2 = capsys.readouterr().out
    assert out1 == out2  # same seed, identical output


def test_config_file_flag(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("mapping.sample_interval_m = 2.0\n")
    out = tmp_path / "db2"
    rc = main(["build-db", str(dataset / "map.ply"), str(dataset / "traj.txt"),
               str(out), "--config", str(cfg)])
    assert rc == EXIT_OK
    capsys.readouterr()
    db = load_database(out)
    # poses 1 m apart sampled at 2 m keep every other pose
    assert len(db.images) == 2

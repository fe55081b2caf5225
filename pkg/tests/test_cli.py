import json

import numpy as np
import pytest

from shapesync.cli import main
from shapesync.fmap import FunctionalMap
from shapesync.formats import read_csv, read_fmat, read_index_map, read_json, write_fmat, write_index_map
from shapesync.mesh import save_off
from shapesync.pipeline import PipelineConfig
from shapesync.primitives import blob, tetrahedron


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.json"
    PipelineConfig(k_lb=10, k_elastic=6, wks_dim=16, steps=3, rate=0.01).save(path)
    return path


@pytest.fixture
def collection(tmp_path):
    d = tmp_path / "shapes"
    d.mkdir()
    m = blob(20, seed=0)
    rng = np.random.default_rng(1)
    for t in range(3):
        save_off(m if t == 0 else m.permuted(rng.permutation(20)), d / f"s{t}.off")
    return d


def test_match_pair_tetrahedron(tmp_path, capsys):
    save_off(tetrahedron(), tmp_path / "tet.off")
    out = tmp_path / "o"
    code, stdout, _ = run(capsys, "match-pair", tmp_path / "tet.off", tmp_path / "tet.off", "--out", out)
    assert code == 0 and json.loads(stdout)["k_lb"] == 3
    idx = read_index_map(out / "tet__tet.map.txt")
    assert np.array_equal(idx, np.arange(4))
    C = FunctionalMap.load(out / "tet__tet.fmap")
    assert np.allclose(C.c11, np.eye(3), atol=1e-8)
    code, _, _ = run(capsys, "evaluate", out / "tet__tet.map.txt", out / "tet__tet.map.txt", tmp_path / "tet.off",
                     "--out", out)
    assert code == 0
    assert float(read_csv(out / "summary.csv")[0]["mean_geo_x100"]) == 0.0


def test_match_collection_cycle_deviation(tmp_path, capsys, collection, small_config):
    out = tmp_path / "mc"
    code, stdout, _ = run(capsys, "match-collection", collection, "--config", small_config, "--out", out)
    assert code == 0
    rows = read_csv(out / "cycle_deviation.csv")
    assert len(rows) == 6 and all(float(r["mean_geo_x100"]) == 0.0 for r in rows)
    assert read_json(out / "summary.json")["universe_size"] == 20
    U = read_fmat(out / "universe" / "s1.soft.fmat")
    assert U.shape == (20, 20) and np.allclose(U.sum(axis=1), 1, atol=1e-6)
    assert read_index_map(out / "maps" / "s0__s2.txt").shape == (20,)


def test_warm_cache_bit_identical(tmp_path, capsys, collection, small_config):
    cache = tmp_path / "cache"
    outs = []
    for name in ("cold", "warm"):
        out = tmp_path / name
        assert run(capsys, "match-collection", collection, "--config", small_config, "--cache", cache,
                   "--out", out)[0] == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_precompute(tmp_path, capsys, collection, small_config):
    cache = tmp_path / "cache"
    code, stdout, _ = run(capsys, "precompute", *sorted(collection.iterdir()), "--config", small_config,
                          "--cache", cache, "--jobs", 2)
    assert code == 0 and len(json.loads(stdout)["shapes"]) == 3
    assert len(list(cache.iterdir())) == 3
    code, stdout2, _ = run(capsys, "precompute", *sorted(collection.iterdir()), "--config", small_config,
                           "--cache", cache)
    assert code == 0 and stdout2 == stdout and len(list(cache.iterdir())) == 3


def test_optimize_and_losses(tmp_path, capsys, collection, small_config):
    out = tmp_path / "opt"
    code, stdout, _ = run(capsys, "optimize", collection, "--config", small_config, "--out", out, "--steps", 2)
    assert code == 0
    trace = read_csv(out / "trace.csv")
    assert len(trace) == 3 and list(trace[0]) == ["step", "bij", "orth", "couple", "cycle", "total"]
    assert read_fmat(out / "universe" / "s0.logits.fmat").shape == (20, 20)
    code, stdout, _ = run(capsys, "losses", collection, "--config", small_config, "--out", out, "-v",
                          "--variant", "cosine")
    report = json.loads(stdout)
    assert code == 0 and "couple_transposed" in report
    assert len(read_csv(out / "losses.csv")) == 6


def test_verify_theorem1(tmp_path, capsys):
    rng = np.random.default_rng(0)
    A0 = rng.standard_normal((4, 6))
    paths = []
    for t in range(3):
        p = tmp_path / f"A{t}.fmat"
        write_fmat(p, (rng.standard_normal((4, 4)) + 2 * np.eye(4)) @ A0)
        paths.append(p)
    code, stdout, _ = run(capsys, "verify-theorem1", *paths, "--out", tmp_path / "v")
    assert code == 0 and json.loads(stdout)["pass"] is True
    assert read_json(tmp_path / "v" / "theorem1.json")["n_cycles"] == 6


def test_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.off").write_text("NOPE\n")
    code, _, err = run(capsys, "match-pair", tmp_path / "bad.off", tmp_path / "bad.off", "--out", tmp_path)
    assert code == 2 and json.loads(err)["error"] == "ParseError"
    code, _, err = run(capsys, "match-pair", tmp_path / "missing.off", tmp_path / "missing.off", "--out", tmp_path)
    assert code == 2
    (tmp_path / "cfg.json").write_text('{"tau": -1}')
    save_off(tetrahedron(), tmp_path / "tet.off")
    code, _, err = run(capsys, "match-pair", tmp_path / "tet.off", tmp_path / "tet.off", "--config",
                       tmp_path / "cfg.json", "--out", tmp_path)
    assert code == 1 and json.loads(err)["exit_code"] == 1
    rank_def = tmp_path / "r.fmat"
    write_fmat(rank_def, np.ones((3, 5)))
    code, _, err = run(capsys, "verify-theorem1", rank_def, rank_def, "--out", tmp_path)
    assert code == 3 and json.loads(err)["error"] == "RankDeficient"
    write_index_map(tmp_path / "p.txt", [0, 1, 2])
    write_index_map(tmp_path / "g.txt", [0, 1, 2, 3])
    code, _, _ = run(capsys, "evaluate", tmp_path / "p.txt", tmp_path / "g.txt", tmp_path / "tet.off",
                     "--out", tmp_path)
    assert code == 1

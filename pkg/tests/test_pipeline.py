import numpy as np
import pytest

from shapesync.errors import ConfigError
from shapesync.evaluation import cycle_deviation, geodesic_error
from shapesync.pipeline import (PipelineConfig, ShapeCache, active_pairs, build_collection_state, effective_k,
                                match_collection, match_pair, pad_logits, parse_universe_policy, prepare_collection,
                                prepare_shape, select_reference, universe_size_sweep)
from shapesync.primitives import blob, tetrahedron

SMALL = PipelineConfig(k_lb=20, k_elastic=8, wks_dim=32)


def test_config_json_round_trip(tmp_path):
    cfg = PipelineConfig(k_lb=12, tau=0.1, universe="ref:cat", weights={"cycle": 2.0}, cache_dir="x")
    cfg.save(tmp_path / "c.json")
    assert PipelineConfig.load(tmp_path / "c.json") == cfg
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [{"k_lb": 0}, {"tau": 0.0}, {"weights": {"bij": -1}}, {"universe": "huge"},
                                 {"cycle_variant": "l1"}, {"nope": 1}, {"k_elastic": 2.5}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(bad)


def test_config_load_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "list.json")


def test_universe_policy():
    assert parse_universe_policy("max") == ("max", None)
    assert parse_universe_policy("ref:dog") == ("ref", "dog")
    assert parse_universe_policy(64) == ("size", 64)
    shapes = prepare_collection([blob(20, seed=1, name="a"), blob(30, seed=2, name="b"), blob(30, seed=3, name="c")],
                                PipelineConfig(k_lb=6, k_elastic=4, features="xyz"))
    assert select_reference(shapes, "max") == (1, 30)
    assert select_reference(shapes, "ref:a") == (0, 20)
    assert select_reference(shapes, "40") == (1, 40)
    with pytest.raises(ConfigError):
        select_reference(shapes, "ref:zzz")


def test_effective_k_clamps():
    assert effective_k(PipelineConfig(), 4) == (3, 3)
    assert effective_k(PipelineConfig(), 1000) == (160, 40)


def test_tetrahedron_falls_back_to_xyz(tet):
    s = prepare_shape(tet)
    assert s.features.provenance.value == "xyz" and s.basis.k_lb == 3


def test_mixed_provenance_uses_xyz():
    shapes = prepare_collection([tetrahedron(), blob(60)], SMALL)
    assert {s.features.provenance.value for s in shapes} == {"xyz"}


def test_cache_warm_equals_cold(tmp_path, blob200):
    cfg = SMALL.replace(cache_dir=str(tmp_path / "cache"))
    cold = prepare_shape(blob200, cfg)
    entries = list((tmp_path / "cache").iterdir())
    assert len(entries) == 1
    warm = prepare_shape(blob200, cfg)
    for a, b in ((cold.basis.lb.functions, warm.basis.lb.functions),
                 (cold.basis.elastic.eigenvalues, warm.basis.elastic.eigenvalues),
                 (cold.features.values, warm.features.values)):
        assert np.array_equal(a, b)
    # a config change relevant to the basis gets its own entry; a loss weight does not
    prepare_shape(blob200, cfg.replace(weights={"cycle": 5.0}))
    assert len(list((tmp_path / "cache").iterdir())) == 1
    prepare_shape(blob200, cfg.replace(wks_dim=16))
    assert len(list((tmp_path / "cache").iterdir())) == 2


def test_cache_ignores_partial_entries(tmp_path, blob200):
    cache = ShapeCache(tmp_path)
    (tmp_path / "deadbeef").mkdir()
    assert cache.load("deadbeef", blob200) is None


def test_match_pair_self_is_identity(ico):
    res = match_pair(ico, ico, SMALL)
    assert geodesic_error(res.indices, np.arange(ico.n_vertices), ico).mean_geo_x100 < 1.0


def test_match_pair_tetrahedron(tet):
    res = match_pair(tet, tet)
    assert np.array_equal(res.indices, np.arange(4))


def test_collection_cycle_consistent(blob200):
    rng = np.random.default_rng(3)
    meshes = [blob200] + [blob200.permuted(rng.permutation(200)) for _ in range(2)]
    res = match_collection(meshes, SMALL)
    cycles = [(0, 1, 2), (1, 2, 0), (2, 1, 0)]
    assert cycle_deviation(res.maps, cycles, meshes) == [0.0, 0.0, 0.0]
    assert res.universe_size == 200
    for a in res.assignments:
        a.check()


def test_collection_jobs_deterministic(blob200):
    meshes = [blob(60, seed=s) for s in range(3)]
    a = match_collection(meshes, SMALL, jobs=1)
    b = match_collection(meshes, SMALL, jobs=3)
    for key in a.maps:
        assert np.array_equal(a.maps[key].weights, b.maps[key].weights)


def test_active_pairs():
    assert len(active_pairs(4, "auto")) == 12
    with pytest.raises(ConfigError):
        active_pairs(20, "graph")


def test_state_and_padding(toy_shapes):
    cfg = PipelineConfig(k_lb=6, k_elastic=4)
    state = build_collection_state(toy_shapes, cfg, universe_size=8)
    assert all(L.shape == (20, 8) for L in state.logits)
    padded = pad_logits(state.logits, 12)
    assert np.array_equal(padded[0][:, :8], state.logits[0])
    assert np.all(padded[0][:, 8:] == state.logits[0].min(axis=1, keepdims=True))
    with pytest.raises(ConfigError):
        pad_logits(state.logits, 4)


def test_universe_size_sweep_mechanics(toy_shapes):
    rows = universe_size_sweep(toy_shapes, [24, 20], PipelineConfig(k_lb=6, k_elastic=4), steps=3, rate=0.01)
    assert [r["c"] for r in rows] == [20, 24]
    assert all(r["cycle"] >= 0 for r in rows)

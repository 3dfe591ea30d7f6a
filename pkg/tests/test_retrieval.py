import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locembed.contrastive import init_checkpoint
from locembed.retrieval import (CandidateGrid, QueryError, embed_query, similarity_field, topk, write_exports)
from locembed.text_embedding import EmbeddingStore


def _grid_with(emb):
    g = CandidateGrid(np.column_stack([np.arange(len(emb)), np.zeros(len(emb))]))
    g.set_embeddings(emb)
    return g


def _unit(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_query_equal_to_candidate_ranks_first(rng):
    emb = _unit(rng, 50, 8)
    res = topk(emb[17], _grid_with(emb), 3)
    assert res.indices[0] == 17 and res.scores[0] == pytest.approx(1.0)


def test_full_ranking_sorted(rng):
    emb = _unit(rng, 30, 4)
    res = topk(emb[0], _grid_with(emb), 30)
    assert sorted(res.indices.tolist()) == list(range(30))
    assert np.all(np.diff(res.scores) <= 0)


def test_ties_prefer_lower_index():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    res = topk([1.0, 0.0], _grid_with(emb), 3)
    assert res.indices.tolist() == [0, 2, 3]


def test_constant_field_returns_first_k():
    emb = np.tile([0.6, 0.8], (10, 1))
    assert topk([0.6, 0.8], _grid_with(emb), 4).indices.tolist() == [0, 1, 2, 3]


def test_k_bounds(rng):
    g = _grid_with(_unit(rng, 5, 3))
    with pytest.raises(ValueError, match="outside"):
        topk(np.ones(3) / np.sqrt(3), g, 6)
    with pytest.raises(ValueError):
        topk(np.ones(3) / np.sqrt(3), g, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 20))
def test_topk_prefix_property(seed, k):
    rng = np.random.default_rng(seed)
    emb = _unit(rng, 20, 5)
    q = _unit(rng, 1, 5)[0]
    g = _grid_with(emb)
    full = topk(q, g, 20).indices
    np.testing.assert_array_equal(topk(q, g, k).indices, full[:k])


def test_rotation_invariance(rng):
    emb = _unit(rng, 40, 6)
    q = _unit(rng, 1, 6)[0]
    rot, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = topk(q, _grid_with(emb), 5)
    b = topk(q @ rot, _grid_with(emb @ rot), 5)
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)


def test_regular_grid_layout():
    g = CandidateGrid.regular((0, 0, 4, 2), 4, 2)
    assert len(g) == 8 and g.shape == (2, 4)
    np.testing.assert_allclose(g.coords[0], [0.5, 1.5])   # north-west cell first
    np.testing.assert_allclose(g.coords[-1], [3.5, 0.5])
    assert g.cell_of([[0.1, 1.9], [3.9, 0.1]]).tolist() == [0, 7]
    np.testing.assert_array_equal(g.cell_of(g.coords), np.arange(8))
    with pytest.raises(ValueError):
        CandidateGrid.regular((0, 0, 1, 1), 0, 3)


def _ckpt(tiny_config, text_dim=16):
    return init_checkpoint(tiny_config, text_dim, [0.0, 0.0, 1.0, 1.0])


def test_embed_query_paths(tiny_config, rng):
    ck = _ckpt(tiny_config)
    store = EmbeddingStore(("cafe",), rng.normal(size=(1, 20)))
    via_key = embed_query("cafe", ck, store)
    np.testing.assert_allclose(via_key, embed_query(store["cafe"], ck))
    assert np.linalg.norm(embed_query("a quiet park", ck)) == pytest.approx(1.0)
    with pytest.raises(QueryError):
        embed_query("unknown", ck, store, allow_fallback=False)
    with pytest.raises(QueryError, match="dim"):
        embed_query(np.ones(4), ck)


def test_checkpoint_field_and_exports(tiny_config, tmp_path):
    ck = _ckpt(tiny_config)
    grid = CandidateGrid.for_checkpoint(ck, 6, 4)
    q = embed_query("A place of Parks, a type of Leisure.", ck)
    top = topk(q, grid, 5, ck, query="parks & <green>")
    fld = similarity_field(q, grid, ck, query="parks & <green>")
    assert fld.raster.shape == (4, 6)
    np.testing.assert_allclose(fld.scores[top.indices], top.scores)
    paths = write_exports(tmp_path, fld, top, svg=True)
    assert [p.name for p in paths] == ["retrieval_topk.geojson", "retrieval_field.geojson", "retrieval_field.csv",
                                       "retrieval_heatmap.svg"]
    gj = json.loads(paths[0].read_text())
    assert len(gj["features"]) == 5
    assert [f["properties"]["rank"] for f in gj["features"]] == [1, 2, 3, 4, 5]
    assert len(json.loads(paths[1].read_text())["features"]) == 24
    assert len(paths[2].read_text().splitlines()) == 25
    svg = ET.parse(paths[3]).getroot()
    assert svg.tag.endswith("svg")
    assert sum(1 for e in svg if e.tag.endswith("rect")) == 24
    assert sum(1 for e in svg if e.tag.endswith("circle")) == 5


def test_scores_within_unit_interval(tiny_config, rng):
    ck = _ckpt(tiny_config)
    grid = CandidateGrid.for_checkpoint(ck, 10, 10)
    fld = similarity_field(embed_query(rng.normal(size=16), ck), grid, ck)
    assert np.all(np.abs(fld.scores) <= 1.0)


def test_missing_embeddings_error(rng):
    g = CandidateGrid(rng.uniform(size=(4, 2)))
    with pytest.raises(ValueError, match="checkpoint"):
        topk(np.ones(2), g, 1)

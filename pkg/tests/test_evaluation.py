import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import precision_recall_fscore_support

from locembed.contrastive import TrainConfig, init_checkpoint
from locembed.evaluation import (EvalReport, ProbeClassifier, ProbeRegressor, ablation_table, distribution_metrics,
                                 macro_prf, region_embeddings, run_ablation, run_luc, run_sdm, train_probe,
                                 write_report)
from locembed.poi_data import LucSample, render_description
from locembed.text_embedding import fallback_store


def test_macro_prf_all_one_class():
    labels = [0, 1, 2, 0, 1, 2]
    p, r, f = macro_prf([0] * 6, labels, 3)
    assert p == pytest.approx(1 / 9) and r == pytest.approx(1 / 3)
    assert f == pytest.approx((2 * (1 / 3) * 1 / (1 / 3 + 1)) / 3)


def test_macro_prf_perfect():
    assert macro_prf([2, 0, 1], [2, 0, 1], 3) == (1.0, 1.0, 1.0)


def _prf_oracle(pred, true, c):
    ps, rs, fs = [], [], []
    for k in range(c):
        tp = sum(1 for a, b in zip(pred, true) if a == k and b == k)
        npred, ntrue = list(pred).count(k), list(true).count(k)
        p = tp / npred if npred else 0.0
        r = tp / ntrue if ntrue else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(2 * p * r / (p + r) if p + r else 0.0)
    return sum(ps) / c, sum(rs) / c, sum(fs) / c


@pytest.mark.parametrize("c, max_n", [(1, 6), (2, 6), (3, 4)])
def test_macro_prf_exhaustive(c, max_n):
    for n in range(1, max_n + 1):
        for pred in itertools.product(range(c), repeat=n):
            for true in itertools.product(range(c), repeat=n):
                np.testing.assert_allclose(macro_prf(pred, true, c), _prf_oracle(pred, true, c), atol=1e-12)


def test_macro_prf_matches_sklearn(rng):
    for _ in range(30):
        c = int(rng.integers(2, 6))
        pred, true = rng.integers(0, c, 25), rng.integers(0, c, 25)
        want = precision_recall_fscore_support(true, pred, labels=list(range(c)), average="macro",
                                               zero_division=0)[:3]
        np.testing.assert_allclose(macro_prf(pred, true, c), want, atol=1e-12)


def test_macro_prf_errors():
    with pytest.raises(ValueError):
        macro_prf([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        macro_prf([0], [0, 1], 3)


def test_kl_frozen_value():
    # floor at 1e-10, renormalize, then sum q ln(q/p); reference at 40 digits
    assert distribution_metrics([0.5, 0.5], [1.0, 0.0])[2] == pytest.approx(0.69314717815736021666, rel=1e-12)
    assert distribution_metrics([1.0, 0.0], [0.5, 0.5])[2] == pytest.approx(10.819778284510283111, rel=1e-12)


def test_distribution_metrics_simple():
    l1, cheb, kl = distribution_metrics([0.2, 0.3, 0.5], [0.2, 0.3, 0.5])
    assert l1 == 0 and cheb == 0 and abs(kl) < 1e-15
    l1, cheb, _ = distribution_metrics([0.1, 0.9], [0.6, 0.4])
    assert l1 == pytest.approx(1.0) and cheb == pytest.approx(0.5)
    with pytest.raises(ValueError):
        distribution_metrics([0.5, 0.5], [1.0, 0.0, 0.0])


simplex = st.lists(st.floats(0, 1), min_size=3, max_size=3).filter(lambda v: sum(v) > 1e-3).map(
    lambda v: np.array(v) / sum(v))


@settings(max_examples=100)
@given(simplex, simplex)
def test_distribution_metric_bounds(p, q):
    l1, cheb, kl = distribution_metrics(p, q)
    assert 0 <= cheb <= l1 <= 2 + 1e-12
    assert kl >= -1e-12


def test_kl_direction_switch():
    p, q = [0.2, 0.8], [0.6, 0.4]
    assert distribution_metrics(p, q, kl_direction="predicted_to_target")[2] == \
        pytest.approx(distribution_metrics(q, p)[2])
    with pytest.raises(ValueError):
        distribution_metrics(p, q, kl_direction="sideways")


def _blobs(rng, n=200):
    y = rng.integers(0, 3, n)
    X = rng.normal(scale=0.1, size=(n, 4))
    X[np.arange(n), y] += 2.0
    return X, y


@pytest.mark.parametrize("head", ["linear", "mlp"])
def test_probe_separable(head, rng):
    X, y = _blobs(rng)
    clf = ProbeClassifier(head=head, hidden_dim=16, random_state=0).fit(X[:150], y[:150])
    assert macro_prf(clf.predict(X[150:]), y[150:], 3)[2] == 1.0


def test_xor_needs_hidden_layer(rng):
    X = rng.uniform(-1, 1, (400, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    lin = ProbeClassifier(head="linear", random_state=0, max_epochs=200).fit(X[:300], y[:300])
    mlp = ProbeClassifier(head="mlp", hidden_dim=32, random_state=0, learning_rate=1e-2,
                          max_epochs=300).fit(X[:300], y[:300])
    assert lin.score(X[300:], y[300:]) < 0.75
    assert mlp.score(X[300:], y[300:]) > 0.9


def test_regressor_constant_target(rng):
    X = rng.normal(size=(100, 3))
    Y = np.tile([0.1, 0.2, 0.7], (100, 1))
    reg = ProbeRegressor(head="linear", random_state=0, learning_rate=1e-2).fit(X, Y)
    assert distribution_metrics(reg.predict(X), Y)[2] < 1e-3
    np.testing.assert_allclose(reg.predict(X).sum(axis=1), 1.0)


def test_probe_reports_missing_classes(rng):
    X, y = _blobs(rng, 60)
    y = np.where(y == 2, 0, y)
    clf = ProbeClassifier(n_classes=4, random_state=0, max_epochs=20).fit(X, y)
    assert clf.missing_classes_ == [2, 3]
    assert clf.predict_proba(X).shape == (60, 4)


def test_train_probe_split_is_seeded(rng):
    X, y = _blobs(rng, 100)
    a = train_probe(X, y, seed=3, max_epochs=5)
    b = train_probe(X, y, seed=3, max_epochs=5)
    np.testing.assert_array_equal(a.test_idx, b.test_idx)
    assert len(a.test_idx) == 20
    assert not set(a.train_idx) & set(a.test_idx)
    # stratified: every class present in the test portion
    assert set(y[a.test_idx]) == {0, 1, 2}


def test_report_single_seed_std_zero():
    rep = EvalReport("luc", ("precision", "recall", "f1"), [0])
    rep.add("linear", {"precision": 0.5, "recall": 0.25, "f1": 0.3})
    assert rep.std("linear", "f1") == 0.0
    assert "30.00 ± 0.00" in rep.to_csv()


def test_report_round_trip(tmp_path):
    rep = EvalReport("sdm", ("l1", "chebyshev", "kl"), [0, 1], config_hash="abc")
    rep.add("mlp", {"l1": 0.1, "chebyshev": 0.05, "kl": 0.02})
    rep.add("mlp", {"l1": 0.3, "chebyshev": 0.15, "kl": 0.04})
    jp, cp = write_report(rep, tmp_path)
    again = EvalReport.from_dict(json.loads(jp.read_text()))
    assert again.values == rep.values
    assert rep.mean("mlp", "kl") == pytest.approx(0.03)
    assert rep.std("mlp", "kl") == pytest.approx(0.01)
    header = cp.read_text().splitlines()[0].split(",")
    assert header[:3] == ["task", "head", "n_seeds"] and "kl_mean" in header


def test_run_luc_and_sdm_shapes(small_city, tiny_config):
    ck = init_checkpoint(tiny_config, 64, _bbox(small_city))
    luc = run_luc(ck, small_city.luc_samples, seeds=2, max_epochs=5, n_classes=4)
    assert luc.heads == ["linear", "mlp"] and len(luc.values["mlp"]["f1"]) == 2
    sdm = run_sdm(ck, small_city.sdm_regions, heads=["linear"], seeds=[7], max_epochs=5)
    assert sdm.seeds == [7] and 0 <= sdm.mean("linear", "l1") <= 2


def _bbox(city):
    ll = np.array([[r.lon, r.lat] for r in city.records] + [[s.lon, s.lat] for s in city.luc_samples])
    return np.concatenate([ll.min(0) - 0.01, ll.max(0) + 0.01])


def test_run_luc_rejects_outside_points(small_city, tiny_config):
    ck = init_checkpoint(tiny_config, 64, _bbox(small_city))
    far = [LucSample(179.0, 80.0, 0)] * 10
    with pytest.raises(ValueError, match="outside"):
        run_luc(ck, far, seeds=1)


def test_region_embedding_modes(small_city, tiny_config):
    ck = init_checkpoint(tiny_config, 64, _bbox(small_city))
    regs = small_city.sdm_regions[:5]
    c = region_embeddings(ck, regs)
    j0 = region_embeddings(ck, regs, "jitter_mean", radius=0.0)
    np.testing.assert_allclose(c, j0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(region_embeddings(ck, regs, "jitter_mean", radius=1e-3), axis=1), 1)
    with pytest.raises(ValueError):
        region_embeddings(ck, regs, "median")


def test_ablation_cardinality_and_identical_stores(small_city, tiny_config):
    recs = small_city.records
    stores = {}
    for v in ("name_and_type", "name_only", "type_only"):
        stores[(v, "hash")] = fallback_store([r.id for r in recs], [render_description(r).text for r in recs], 64, 0)
    rows = run_ablation(recs, stores, tiny_config, small_city.luc_samples, small_city.sdm_regions, heads=["linear"],
                        seeds=2, max_epochs=5)
    assert len(rows) == 3
    table = ablation_table(rows).splitlines()
    assert table[0] == "variant,task,metric,mean,std,store,head"
    assert len(table) == 1 + 3 * 2
    # identical text for every variant: only the variant label differs
    a, b = rows[0], rows[1]
    assert a.luc.values == b.luc.values and a.sdm.values == b.sdm.values


def test_ablation_truncates_wide_stores(small_city, tiny_config):
    recs = small_city.records
    wide = fallback_store([r.id for r in recs], [render_description(r).text for r in recs], 96, 0)
    rows = run_ablation(recs, {("type_only", "wide"): wide}, tiny_config, small_city.luc_samples, heads=["linear"],
                        seeds=1, truncate_to=64, max_epochs=3)
    assert rows[0].checkpoint.text_dim == 64 and rows[0].sdm is None
    with pytest.raises(ValueError):
        run_ablation(recs, {}, tiny_config)


def test_macro_prf_batched_matches_rows(rng):
    pred, true = rng.integers(0, 4, (3, 5, 12)), rng.integers(0, 4, (3, 5, 12))
    p, r, f = macro_prf(pred, true, 4)
    assert p.shape == (3, 5)
    for i, j in itertools.product(range(3), range(5)):
        assert (p[i, j], r[i, j], f[i, j]) == macro_prf(pred[i, j], true[i, j], 4)

"""Downstream probes on frozen location embeddings, their metrics, and multi-seed reports.

Two probe families, each as linear or one-hidden-layer MLP heads:

* :class:`ProbeClassifier` for land-use classification (softmax + cross-entropy),
* :class:`ProbeRegressor` for socioeconomic distributions (softmax + KL to the target).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted

from .contrastive import Checkpoint, TrainConfig, encode_locations, train
from .neural import AdamState, adam_step, linear_backward, log_softmax_rows, relu, relu_backward, softmax_rows, \
    uniform_init
from .poi_data import LucSample, PoiRecord, SdmRegion, Variant
from .text_embedding import EmbeddingStore, truncate_dims

KL_EPS = 1e-10
LUC_METRICS = ("precision", "recall", "f1")
SDM_METRICS = ("l1", "chebyshev", "kl")
HEADS = ("linear", "mlp")


# --- metrics -------------------------------------------------------------


def macro_prf(predictions, labels, n_classes: int):
    """Macro-averaged precision, recall and F1 over all ``n_classes`` classes.

    A class with no predictions (or no support) scores 0 for the undefined
    ratio, so absent classes pull the average down rather than being skipped.
    Leading axes are batch axes: 1-d inputs give a tuple of floats, ``(..., n)``
    inputs a tuple of ``(...)`` arrays.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim == 0:
        raise ValueError("predictions and labels differ in length")
    if pred.size and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= n_classes):
        raise ValueError(f"class index outside [0, {n_classes})")
    batch = pred.shape[:-1]
    c2 = n_classes * n_classes
    pred, true = pred.reshape(-1, pred.shape[-1]), true.reshape(-1, true.shape[-1])
    offsets = (np.arange(len(pred)) * c2)[:, None]
    conf = np.bincount((offsets + true * n_classes + pred).ravel(), minlength=len(pred) * c2)
    conf = conf.reshape(len(pred), n_classes, n_classes)
    tp = conf.diagonal(axis1=1, axis2=2).astype(np.float64)
    # 0/0 ratios are defined as 0
    p = tp / np.maximum(conf.sum(axis=1), 1)
    r = tp / np.maximum(conf.sum(axis=2), 1)
    denom = p + r
    f = 2 * p * r / np.where(denom > 0, denom, 1.0)
    out = tuple(v.mean(axis=1).reshape(batch) for v in (p, r, f))
    if not batch:
        return tuple(float(v) for v in out)
    return out


def _floor(p: np.ndarray, eps: float) -> np.ndarray:
    p = np.maximum(p, eps)
    return p / p.sum(axis=-1, keepdims=True)


def distribution_metrics(predicted, target, *, eps: float = KL_EPS,
                         kl_direction: str = "target_to_predicted") -> tuple[float, float, float]:
    """``(L1, Chebyshev, KL)``; for 2-d inputs each is the mean over rows.

    KL is ``sum q ln(q/p)`` with ``q`` the target, after flooring both vectors
    at ``eps`` and renormalizing. ``kl_direction="predicted_to_target"`` swaps
    the roles.
    """
    p = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    q = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    diff = np.abs(p - q)
    l1 = diff.sum(axis=1)
    cheb = diff.max(axis=1)
    pf, qf = _floor(p, eps), _floor(q, eps)
    if kl_direction == "predicted_to_target":
        pf, qf = qf, pf
    elif kl_direction != "target_to_predicted":
        raise ValueError(f"unknown kl_direction {kl_direction!r}")
    kl = np.sum(qf * (np.log(qf) - np.log(pf)), axis=1)
    return float(l1.mean()), float(cheb.mean()), float(kl.mean())


# --- probes --------------------------------------------------------------


class _SoftmaxProbe(BaseEstimator):
    """Shared machinery: softmax head trained with Adam and held-out early stopping."""

    def __init__(self, head: str = "linear", hidden_dim: int = 256, learning_rate: float = 1e-3,
                 batch_size: int = 64, max_epochs: int = 500, patience: int = 20, holdout_fraction: float = 0.1,
                 random_state: int = 0):
        self.head = head
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.holdout_fraction = holdout_fraction
        self.random_state = random_state

    def _init(self, rng, n_in: int, n_out: int) -> dict:
        if self.head == "linear":
            return {"W": uniform_init(rng, n_in, (n_in, n_out)), "b": np.zeros(n_out)}
        if self.head == "mlp":
            h = self.hidden_dim
            return {"W1": uniform_init(rng, n_in, (n_in, h)), "b1": np.zeros(h),
                    "W2": uniform_init(rng, h, (h, n_out)), "b2": np.zeros(n_out)}
        raise ValueError(f"unknown probe head {self.head!r}; expected 'linear' or 'mlp'")

    def _logits(self, params, X, cache=False):
        if self.head == "linear":
            out = X @ params["W"] + params["b"]
            return (out, None) if cache else out
        pre = X @ params["W1"] + params["b1"]
        hid = relu(pre)
        out = hid @ params["W2"] + params["b2"]
        return (out, (pre, hid)) if cache else out

    def _grads(self, params, X, d_logits, cache) -> dict:
        if self.head == "linear":
            _, dW, db = linear_backward(d_logits, X, params["W"])
            return {"W": dW, "b": db}
        pre, hid = cache
        dh, dW2, db2 = linear_backward(d_logits, hid, params["W2"])
        _, dW1, db1 = linear_backward(relu_backward(dh, pre), X, params["W1"])
        return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}

    def _loss(self, logits, target):
        # cross-entropy against a target distribution; for one-hot targets this
        # equals KL up to the target entropy, so both probe types share it
        logp = log_softmax_rows(logits)
        return float(-np.sum(target * logp) / len(target))

    def _fit_targets(self, X, T):
        rng = np.random.default_rng(self.random_state)
        n = len(X)
        perm = rng.permutation(n)
        n_hold = int(round(self.holdout_fraction * n)) if n >= 10 else 0
        hold, fit_idx = perm[:n_hold], perm[n_hold:]
        params = self._init(rng, X.shape[1], T.shape[1])
        opt = AdamState.for_params(params, learning_rate=self.learning_rate)
        best, best_params, since = math.inf, params, 0
        bs = min(self.batch_size, len(fit_idx))
        self.n_epochs_ = 0
        for epoch in range(self.max_epochs):
            order = fit_idx[rng.permutation(len(fit_idx))]
            for i in range(0, len(order), bs):
                b = order[i:i + bs]
                logits, cache = self._logits(params, X[b], cache=True)
                d_logits = (softmax_rows(logits) - T[b]) / len(b)
                params, opt = adam_step(params, self._grads(params, X[b], d_logits, cache), opt)
            self.n_epochs_ = epoch + 1
            monitor = hold if n_hold else fit_idx
            loss = self._loss(self._logits(params, X[monitor]), T[monitor])
            if loss < best - 1e-12:
                best, best_params, since = loss, params, 0
            else:
                since += 1
                if since >= self.patience:
                    break
        self.params_ = best_params
        self.holdout_loss_ = best
        self.n_features_in_ = X.shape[1]
        return self

    def _proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return softmax_rows(self._logits(self.params_, X))


class ProbeClassifier(ClassifierMixin, _SoftmaxProbe):
    """Softmax classifier over integer labels ``0..n_classes-1``."""

    def __init__(self, head="linear", hidden_dim=256, learning_rate=1e-3, batch_size=64, max_epochs=500,
                 patience=20, holdout_fraction=0.1, random_state=0, n_classes=None):
        super().__init__(head, hidden_dim, learning_rate, batch_size, max_epochs, patience, holdout_fraction,
                         random_state)
        self.n_classes = n_classes

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64).ravel()
        if len(y) != len(X):
            raise ValueError("X and y differ in length")
        c = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        if c < 2:
            raise ValueError("classification needs at least 2 classes")
        self.classes_ = np.arange(c)
        self.missing_classes_ = sorted(set(range(c)) - set(np.unique(y).tolist()))
        return self._fit_targets(X, np.eye(c)[y])

    def predict_proba(self, X):
        return self._proba(X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class ProbeRegressor(RegressorMixin, _SoftmaxProbe):
    """Predicts a probability vector; trained by minimizing KL(target || prediction)."""

    def fit(self, X, Y):
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.float64)
        if len(Y) != len(X):
            raise ValueError("X and Y differ in length")
        if Y.shape[1] < 2:
            raise ValueError("distribution targets need K >= 2")
        if np.any(Y < 0) or np.any(np.abs(Y.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("targets must be probability vectors")
        return self._fit_targets(X, Y)

    def predict(self, X):
        return self._proba(X)

    def score(self, X, y, sample_weight=None):
        return -distribution_metrics(self.predict(X), y)[2]


@dataclass
class ProbeRun:
    probe: _SoftmaxProbe
    train_idx: np.ndarray
    test_idx: np.ndarray


def train_probe(embeddings, targets, head: str = "linear", task: str = "classify", seed: int = 0,
                test_fraction: float = 0.2, n_classes: int | None = None, **probe_kw) -> ProbeRun:
    """Seeded 80/20 split, then fit a probe on the 80%."""
    X = check_array(embeddings, dtype=np.float64)
    idx = np.arange(len(X))
    if task == "classify":
        y = np.asarray(targets, dtype=np.int64).ravel()
        counts = np.bincount(y)
        strat = y if counts[counts > 0].min() >= 2 else None
        tr, te = train_test_split(idx, test_size=test_fraction, random_state=seed, stratify=strat)
        probe = ProbeClassifier(head=head, random_state=seed, n_classes=n_classes, **probe_kw)
        probe.fit(X[tr], y[tr])
    elif task == "distribution":
        Y = check_array(targets, dtype=np.float64)
        tr, te = train_test_split(idx, test_size=test_fraction, random_state=seed)
        probe = ProbeRegressor(head=head, random_state=seed, **probe_kw)
        probe.fit(X[tr], Y[tr])
    else:
        raise ValueError(f"unknown probe task {task!r}")
    return ProbeRun(probe, np.sort(tr), np.sort(te))


# --- reports -------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-seed metric values for each probe head of one task."""

    task: str
    metric_names: tuple[str, ...]
    seeds: list[int]
    values: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    config_hash: str = ""
    variant: str | None = None
    notes: list[str] = field(default_factory=list)

    def add(self, head: str, metrics: Mapping[str, float]) -> None:
        slot = self.values.setdefault(head, {m: [] for m in self.metric_names})
        for m in self.metric_names:
            slot[m].append(float(metrics[m]))

    def mean(self, head: str, metric: str) -> float:
        return float(np.mean(self.values[head][metric]))

    def std(self, head: str, metric: str) -> float:
        # population std: a single seed reports 0
        return float(np.std(self.values[head][metric]))

    @property
    def heads(self) -> list[str]:
        return list(self.values)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "variant": self.variant, "config_hash": self.config_hash, "seeds": self.seeds,
            "metrics": list(self.metric_names), "notes": self.notes,
            "heads": {h: {m: {"values": v, "mean": self.mean(h, m), "std": self.std(h, m)}
                          for m, v in ms.items()} for h, ms in self.values.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        rep = cls(d["task"], tuple(d["metrics"]), list(d["seeds"]), config_hash=d.get("config_hash", ""),
                  variant=d.get("variant"), notes=list(d.get("notes", [])))
        for h, ms in d["heads"].items():
            rep.values[h] = {m: list(ms[m]["values"]) for m in rep.metric_names}
        return rep

    def to_csv(self, scale: float = 100.0) -> str:
        """One row per head; metric columns in table order, means and stds multiplied by ``scale``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["task", "head", "n_seeds"]
        for m in self.metric_names:
            cols += [f"{m}_mean", f"{m}_std", m]
        w.writerow(cols)
        for h in self.heads:
            row = [self.task, h, len(self.seeds)]
            for m in self.metric_names:
                mu, sd = scale * self.mean(h, m), scale * self.std(h, m)
                row += [f"{mu:.4f}", f"{sd:.4f}", f"{mu:.2f} ± {sd:.2f}"]
            w.writerow(row)
        return buf.getvalue()


def _seed_list(seeds: int | Sequence[int]) -> list[int]:
    return list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]


def _check_in_bounds(checkpoint: Checkpoint, lonlat: np.ndarray, what: str) -> None:
    norm = checkpoint.normalizer.transform(lonlat)
    bad = np.flatnonzero(np.any(np.abs(norm) > 1.0 + 1e-9, axis=1))
    if bad.size:
        raise ValueError(f"{what} {int(bad[0])} at {lonlat[bad[0]].tolist()} lies outside the "
                         f"checkpoint's bounding box")


def run_luc(checkpoint: Checkpoint, samples: Sequence[LucSample], heads: Iterable[str] = HEADS,
            seeds: int | Sequence[int] = 5, n_classes: int | None = None, **probe_kw) -> EvalReport:
    lonlat = np.array([[s.lon, s.lat] for s in samples], dtype=np.float64).reshape(-1, 2)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    _check_in_bounds(checkpoint, lonlat, "LUC sample")
    emb = encode_locations(checkpoint, lonlat)
    c = n_classes if n_classes is not None else int(labels.max()) + 1
    seeds = _seed_list(seeds)
    report = EvalReport("luc", LUC_METRICS, seeds, config_hash=checkpoint.config_hash,
                        variant=checkpoint.config.description_variant)
    for head in heads:
        for seed in seeds:
            run = train_probe(emb, labels, head=head, task="classify", seed=seed, n_classes=c, **probe_kw)
            if run.probe.missing_classes_:
                report.notes.append(f"{head}/seed {seed}: classes {run.probe.missing_classes_} absent from "
                                    f"training portion")
            pred = run.probe.predict(emb[run.test_idx])
            p, r, f = macro_prf(pred, labels[run.test_idx], c)
            report.add(head, {"precision": p, "recall": r, "f1": f})
    return report


def region_embeddings(checkpoint: Checkpoint, regions: Sequence[SdmRegion], mode: str = "centroid",
                      radius: float = 0.0, n_points: int = 16, seed: int = 0) -> np.ndarray:
    """Centroid embedding, or the renormalized mean over points jittered within ``radius`` degrees."""
    lonlat = np.array([[r.lon, r.lat] for r in regions], dtype=np.float64).reshape(-1, 2)
    if mode == "centroid":
        return encode_locations(checkpoint, lonlat)
    if mode != "jitter_mean":
        raise ValueError(f"unknown region embedding mode {mode!r}")
    rng = np.random.default_rng(seed)
    lo, hi = checkpoint.bbox[:2], checkpoint.bbox[2:]
    pts = lonlat[:, None, :] + rng.uniform(-radius, radius, size=(len(lonlat), n_points, 2))
    pts = np.clip(pts, lo, hi)
    emb = encode_locations(checkpoint, pts.reshape(-1, 2)).reshape(len(lonlat), n_points, -1).mean(axis=1)
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def run_sdm(checkpoint: Checkpoint, regions: Sequence[SdmRegion], heads: Iterable[str] = HEADS,
            seeds: int | Sequence[int] = 5, region_mode: str = "centroid", kl_direction: str = "target_to_predicted",
            **probe_kw) -> EvalReport:
    lonlat = np.array([[r.lon, r.lat] for r in regions], dtype=np.float64).reshape(-1, 2)
    _check_in_bounds(checkpoint, lonlat, "SDM region")
    targets = np.array([r.target for r in regions], dtype=np.float64)
    emb = region_embeddings(checkpoint, regions, region_mode)
    seeds = _seed_list(seeds)
    report = EvalReport("sdm", SDM_METRICS, seeds, config_hash=checkpoint.config_hash,
                        variant=checkpoint.config.description_variant)
    for head in heads:
        for seed in seeds:
            run = train_probe(emb, targets, head=head, task="distribution", seed=seed, **probe_kw)
            pred = run.probe.predict(emb[run.test_idx])
            l1, cheb, kl = distribution_metrics(pred, targets[run.test_idx], kl_direction=kl_direction)
            report.add(head, {"l1": l1, "chebyshev": cheb, "kl": kl})
    return report


@dataclass
class AblationRow:
    variant: str
    store_tag: str
    checkpoint: Checkpoint
    luc: EvalReport | None = None
    sdm: EvalReport | None = None


def run_ablation(records: Sequence[PoiRecord], stores: Mapping[tuple[str, str], EmbeddingStore],
                 base_config: TrainConfig, luc_samples: Sequence[LucSample] | None = None,
                 sdm_regions: Sequence[SdmRegion] | None = None, heads: Iterable[str] = HEADS,
                 seeds: int | Sequence[int] = 5, truncate_to: int = 384, **probe_kw) -> list[AblationRow]:
    """Train and evaluate one model per ``(variant, store_tag)`` entry of ``stores``.

    Each store holds text vectors for the descriptions rendered with that
    variant. Stores wider than ``truncate_to`` keep only their leading
    components, which is how an alternate, larger text encoder is compared.
    """
    if luc_samples is None and sdm_regions is None:
        raise ValueError("ablation needs LUC samples, SDM regions, or both")
    heads = list(heads)
    rows = []
    for (variant, tag), store in stores.items():
        variant = Variant.parse(variant).value
        if store.dim > truncate_to:
            store = truncate_dims(store, truncate_to)
        cfg = TrainConfig.from_dict({**base_config.to_dict(), "description_variant": variant})
        ckpt = train(records, store, cfg).checkpoint
        row = AblationRow(variant, tag, ckpt)
        if luc_samples is not None:
            row.luc = run_luc(ckpt, luc_samples, heads, seeds, **probe_kw)
        if sdm_regions is not None:
            row.sdm = run_sdm(ckpt, sdm_regions, heads, seeds, **probe_kw)
        rows.append(row)
    return rows


def ablation_table(rows: Sequence[AblationRow], scale: float = 100.0) -> str:
    """Combined CSV ``variant,task,metric,mean,std,store,head`` with LUC F1 and SDM KL rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "task", "metric", "mean", "std", "store", "head"])
    for row in rows:
        for rep, metric in ((row.luc, "f1"), (row.sdm, "kl")):
            if rep is None:
                continue
            for h in rep.heads:
                w.writerow([row.variant, rep.task, metric, f"{scale * rep.mean(h, metric):.4f}",
                            f"{scale * rep.std(h, metric):.4f}", row.store_tag, h])
    return buf.getvalue()


def write_report(report: EvalReport, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{report.task}_report"
    jp, cp = out / f"{stem}.json", out / f"{stem}.csv"
    jp.write_text(report.to_json(), encoding="utf-8")
    cp.write_text(report.to_csv(), encoding="utf-8")
    return jp, cp

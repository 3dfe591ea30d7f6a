"""Contrastive alignment of location embeddings with projected text embeddings.

The objective is the symmetric InfoNCE loss over in-batch pairs: with
``S = Z_s Z_p^T / tau`` (rows of both inputs unit-norm),

    L = -(1/2N) * sum_i [ log softmax_row(S)_ii + log softmax_col(S)_ii ]

Text vectors reach the shared space through a bias-free linear map ``W_t``
followed by L2 normalization; the location side normalizes inside
:func:`locembed.spatial.forward`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import spatial
from .neural import AdamState, Params, adam_step, l2_normalize_backward, l2_normalize_rows, logsumexp_rows, \
    softmax_rows, uniform_init
from .poi_data import CoordNormalizer, PoiRecord, Variant, records_lonlat, split_dataset
from .text_embedding import EmbeddingStore, truncate_dims

log = logging.getLogger(__name__)

PROJ = "projection.W"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    temperature: float = 0.07
    max_epochs: int = 100
    early_stop_patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    description_variant: str = Variant.NAME_AND_TYPE.value
    num_scales: int = 16
    lambda_min: float = 1e-3
    lambda_max: float = 2.0
    hidden_dim: int = 256
    num_residual_blocks: int = 2
    embedding_dim: int = 128
    spatial_projection: bool = False
    normalize_text: bool = False
    text_dim: int | None = None
    weight_decay: float = 0.0
    clip_norm: float | None = None
    bbox_margin: float = 0.01
    restore_best: bool = True

    def errors(self) -> list[str]:
        """Every validation problem, not just the first."""
        errs = []
        if not self.temperature > 0:
            errs.append("temperature must be positive")
        if self.batch_size < 2:
            errs.append("batch_size must be at least 2")
        if not self.learning_rate > 0:
            errs.append("learning_rate must be positive")
        if self.max_epochs < 1:
            errs.append("max_epochs must be at least 1")
        if self.early_stop_patience < 1:
            errs.append("early_stop_patience must be at least 1")
        if not 0.0 < self.val_fraction < 1.0:
            errs.append("val_fraction must lie strictly between 0 and 1")
        if self.num_scales < 1:
            errs.append("num_scales must be at least 1")
        if not 0.0 < self.lambda_min < self.lambda_max:
            errs.append("need 0 < lambda_min < lambda_max")
        if self.hidden_dim < 1 or self.embedding_dim < 1 or self.num_residual_blocks < 0:
            errs.append("encoder dimensions must be positive")
        if self.text_dim is not None and self.text_dim < 1:
            errs.append("text_dim must be positive")
        if self.weight_decay < 0:
            errs.append("weight_decay must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            errs.append("clip_norm must be positive")
        try:
            Variant.parse(self.description_variant)
        except ValueError as exc:
            errs.append(str(exc))
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**dict(d))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def grid(self) -> spatial.GridEncodingConfig:
        return spatial.GridEncodingConfig(self.num_scales, self.lambda_min, self.lambda_max)

    @property
    def dims(self) -> spatial.EncoderDims:
        return spatial.EncoderDims(4 * self.num_scales, self.hidden_dim, self.num_residual_blocks,
                                   self.embedding_dim, self.spatial_projection)


# --- loss and projection ---------------------------------------------------


def _similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # elementwise products summed over the last axis: swapping the arguments
    # yields exactly the transpose, which BLAS matmul does not promise
    return np.sum(a[:, None, :] * b[None, :, :], axis=2)


def infonce_loss(z_s: np.ndarray, z_p: np.ndarray, temperature: float = 0.07, *, unit_tol: float = 1e-4):
    """Symmetric InfoNCE. Returns ``(loss, d_loss/d_z_s, d_loss/d_z_p)``."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z_s = np.asarray(z_s, dtype=np.float64)
    z_p = np.asarray(z_p, dtype=np.float64)
    if z_s.shape != z_p.shape or z_s.ndim != 2 or z_s.shape[0] < 1:
        raise ValueError(f"need two equal-shape non-empty batches, got {z_s.shape} and {z_p.shape}")
    for name, z in (("Z_s", z_s), ("Z_p", z_p)):
        dev = np.abs(np.sqrt(np.sum(z * z, axis=1)) - 1.0)
        if np.any(dev > unit_tol):
            raise ValueError(f"{name} row {int(np.argmax(dev))} is not unit-norm")
    n = z_s.shape[0]
    logits = _similarity(z_s, z_p) / temperature
    logits_t = np.ascontiguousarray(logits.T)
    diag = np.diagonal(logits)
    s2p = np.sum(logsumexp_rows(logits) - diag)
    p2s = np.sum(logsumexp_rows(logits_t) - diag)
    loss = (s2p + p2s) / (2 * n)

    eye = np.eye(n)
    d_logits = (softmax_rows(logits) - eye + softmax_rows(logits_t).T - eye) / (2 * n)
    d_zs = d_logits @ z_p / temperature
    d_zp = d_logits.T @ z_s / temperature
    return float(loss), d_zs, d_zp


def project_text(proj_w: np.ndarray, text: np.ndarray, *, normalize_input: bool = False):
    """Project raw text vectors with ``W_t`` and L2-normalize. Returns ``(z_p, cache)``."""
    t = np.asarray(text, dtype=np.float64)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape[1] != proj_w.shape[0]:
        raise ValueError(f"text vector length {t.shape[1]} != projection input {proj_w.shape[0]}")
    t_norms = None
    if normalize_input:
        t, t_norms = l2_normalize_rows(t, "text vector")
    q = t @ proj_w
    z, norms = l2_normalize_rows(q, "projected text vector")
    return z, {"t": t, "z": z, "norms": norms, "t_norms": t_norms}


def project_text_backward(proj_w: np.ndarray, cache: dict, grad_z: np.ndarray):
    """Returns ``(d W_t, d text)``."""
    dq = l2_normalize_backward(grad_z, cache["z"], cache["norms"])
    dw = cache["t"].T @ dq
    dt = dq @ proj_w.T
    if cache["t_norms"] is not None:
        dt = l2_normalize_backward(dt, cache["t"], cache["t_norms"])
    return dw, dt


def loss_and_grads(params: Mapping[str, np.ndarray], enc: np.ndarray, text: np.ndarray,
                   dims: spatial.EncoderDims, temperature: float, normalize_text: bool = False):
    """Full objective on one batch: encoder + projection + InfoNCE. Returns ``(loss, grads)``."""
    z_s, s_cache = spatial.forward(params, enc, dims)
    z_p, p_cache = project_text(params[PROJ], text, normalize_input=normalize_text)
    loss, d_zs, d_zp = infonce_loss(z_s, z_p, temperature)
    grads, _ = spatial.backward(params, s_cache, d_zs, dims)
    grads[PROJ], _ = project_text_backward(params[PROJ], p_cache, d_zp)
    return loss, grads


def batch_loss(params, enc, text, dims, temperature, normalize_text=False) -> float:
    z_s, _ = spatial.forward(params, enc, dims, keep_cache=False)
    z_p, _ = project_text(params[PROJ], text, normalize_input=normalize_text)
    return infonce_loss(z_s, z_p, temperature)[0]


# --- checkpoint ----------------------------------------------------------


@dataclass
class Checkpoint:
    params: Params
    config: TrainConfig
    bbox: np.ndarray
    text_dim: int
    epoch: int = 0
    best_val_loss: float = math.inf
    optimizer: AdamState | None = None

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    @property
    def dims(self) -> spatial.EncoderDims:
        return self.config.dims

    @property
    def grid(self) -> spatial.GridEncodingConfig:
        return self.config.grid

    @property
    def normalizer(self) -> CoordNormalizer:
        return CoordNormalizer.from_bbox(self.bbox, self.config.bbox_margin)

    @property
    def encoder_params(self) -> Params:
        return {k: self.params[k] for k in spatial.param_order(self.dims)}

    @property
    def projection(self) -> np.ndarray:
        return self.params[PROJ]

    def _order(self) -> list[str]:
        return spatial.param_order(self.dims) + [PROJ]

    def save(self, path: str | Path) -> None:
        order = self._order()
        header = {
            "format": "locembed-checkpoint",
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "dims": spatial.dims_to_dict(self.dims),
            "grid": asdict(self.grid),
            "bbox": [float(v) for v in self.bbox],
            "text_dim": self.text_dim,
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss if math.isfinite(self.best_val_loss) else None,
        }
        arrays = [(k, self.params[k]) for k in order]
        if self.optimizer is not None:
            opt = self.optimizer
            header["optimizer"] = {"step": opt.step, "learning_rate": opt.learning_rate, "beta1": opt.beta1,
                                   "beta2": opt.beta2, "eps": opt.eps, "weight_decay": opt.weight_decay,
                                   "clip_norm": opt.clip_norm}
            arrays += [(f"adam.m.{k}", opt.m[k]) for k in order]
            arrays += [(f"adam.v.{k}", opt.v[k]) for k in order]
        spatial.write_param_file(path, header, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        header, arrays = spatial.read_param_file(path)
        if header.get("format") != "locembed-checkpoint":
            raise ValueError(f"{path}: not a location-encoder checkpoint")
        config = TrainConfig.from_dict(header["config"])
        if config.config_hash() != header["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch")
        order = spatial.param_order(config.dims) + [PROJ]
        params = {k: arrays[k] for k in order}
        opt = None
        if "optimizer" in header:
            o = header["optimizer"]
            opt = AdamState(learning_rate=o["learning_rate"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                            step=o["step"], weight_decay=o["weight_decay"], clip_norm=o["clip_norm"],
                            m={k: arrays[f"adam.m.{k}"] for k in order}, v={k: arrays[f"adam.v.{k}"] for k in order})
        best = header["best_val_loss"]
        return cls(params=params, config=config, bbox=np.asarray(header["bbox"], dtype=np.float64),
                   text_dim=int(header["text_dim"]), epoch=int(header["epoch"]),
                   best_val_loss=math.inf if best is None else float(best), optimizer=opt)


def init_checkpoint(config: TrainConfig, text_dim: int, bbox) -> Checkpoint:
    """Untrained model: encoder and projection drawn from the config seed."""
    enc_seed, proj_seed, _ = np.random.SeedSequence(config.seed).spawn(3)
    params = spatial.init_params(config.dims, seed=np.random.default_rng(enc_seed).integers(2**63))
    rng = np.random.default_rng(proj_seed)
    params[PROJ] = uniform_init(rng, text_dim, (text_dim, config.embedding_dim))
    return Checkpoint(params=params, config=config, bbox=np.asarray(bbox, dtype=np.float64), text_dim=text_dim)


# --- training loop --------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog] = field(default_factory=list)
    stopped_early: bool = False

    def log_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e.epoch},{e.train_loss!r},{e.val_loss!r}" for e in self.log]
        return "\n".join(lines) + "\n"


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order) - size + 1, size)]


def fit_arrays(lonlat: np.ndarray, text: np.ndarray, config: TrainConfig, ids: Sequence[str] | None = None,
               bbox=None, split=None) -> TrainResult:
    """Train on aligned arrays of coordinates and raw text vectors."""
    config.validate()
    lonlat = check_array(lonlat, dtype=np.float64)
    text = check_array(text, dtype=np.float64)
    if len(lonlat) != len(text):
        raise ValueError(f"{len(lonlat)} coordinates but {len(text)} text vectors")
    if config.text_dim is not None and text.shape[1] != config.text_dim:
        if text.shape[1] < config.text_dim:
            raise ValueError(f"text vectors have dim {text.shape[1]} < configured text_dim {config.text_dim}")
        text = text[:, :config.text_dim]
    ids = list(ids) if ids is not None else [str(i) for i in range(len(lonlat))]
    if bbox is None:
        bbox = CoordNormalizer(config.bbox_margin).fit(lonlat).bbox_
    ckpt = init_checkpoint(config, text.shape[1], bbox)
    enc = spatial.grid_encode(ckpt.normalizer.transform(lonlat), config.grid)

    if split is None:
        stub = [_IdOnly(i) for i in ids]
        split = split_dataset(stub, config.val_fraction, config.seed)
    pos = {k: i for i, k in enumerate(ids)}
    train_idx = np.array([pos[k] for k in split.train_ids], dtype=np.int64)
    val_idx = np.array([pos[k] for k in split.val_ids], dtype=np.int64)
    n = config.batch_size
    if len(train_idx) < n:
        raise ValueError(f"training portion has {len(train_idx)} samples, fewer than batch_size {n}")
    val_batches = _batches(val_idx, n) or [val_idx]
    if len(val_batches[0]) < 1:
        raise ValueError("empty validation portion")

    dims, tau, norm_text = config.dims, config.temperature, config.normalize_text
    _, _, shuffle_seed = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    params = ckpt.params
    opt = AdamState.for_params(params, learning_rate=config.learning_rate, weight_decay=config.weight_decay,
                               clip_norm=config.clip_norm)

    result = TrainResult(checkpoint=ckpt)
    best_val, since_best = math.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for b, batch in enumerate(_batches(train_idx[shuffle_rng.permutation(len(train_idx))], n)):
            loss, grads = loss_and_grads(params, enc[batch], text[batch], dims, tau, norm_text)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b} "
                                    f"(learning_rate={config.learning_rate}, temperature={tau})")
            params, opt = adam_step(params, grads, opt)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val_loss = float(np.mean([batch_loss(params, enc[vb], text[vb], dims, tau, norm_text) for vb in val_batches]))
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        result.log.append(EpochLog(epoch, train_loss, val_loss))
        log.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        improved = val_loss < best_val
        if improved:
            best_val, since_best = val_loss, 0
        else:
            since_best += 1
        if improved or not config.restore_best:
            result.checkpoint = Checkpoint(params={k: v.copy() for k, v in params.items()}, config=config,
                                           bbox=ckpt.bbox, text_dim=ckpt.text_dim, epoch=epoch,
                                           best_val_loss=best_val, optimizer=opt.copy())
        if since_best >= config.early_stop_patience:
            result.stopped_early = True
            break
    return result


@dataclass(frozen=True)
class _IdOnly:
    id: str


def train(records: Sequence[PoiRecord], store: EmbeddingStore, config: TrainConfig) -> TrainResult:
    """Train on POI records whose ids key into ``store``."""
    config.validate()
    if config.text_dim is not None and store.dim > config.text_dim:
        store = truncate_dims(store, config.text_dim)
    ids = [r.id for r in records]
    text = store.lookup(ids)
    split = split_dataset(records, config.val_fraction, config.seed)
    return fit_arrays(records_lonlat(records), text, config, ids=ids, split=split)


def encode_locations(checkpoint: Checkpoint, lonlat, *, normalized: bool = False, chunk: int = 8192) -> np.ndarray:
    """Unit-norm location embeddings for lon/lat rows (or already-normalized rows)."""
    c = np.asarray(lonlat, dtype=np.float64).reshape(-1, 2)
    if not normalized:
        c = checkpoint.normalizer.transform(c)
    params = checkpoint.encoder_params
    out = np.empty((len(c), checkpoint.config.embedding_dim))
    for i in range(0, len(c), chunk):
        enc = spatial.grid_encode(c[i:i + chunk], checkpoint.grid)
        out[i:i + chunk], _ = spatial.forward(params, enc, checkpoint.dims, keep_cache=False)
    return out


def embed_text(checkpoint: Checkpoint, text) -> np.ndarray:
    t = np.asarray(text, dtype=np.float64)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape[1] > checkpoint.text_dim:
        t = t[:, :checkpoint.text_dim]
    z, _ = project_text(checkpoint.projection, t, normalize_input=checkpoint.config.normalize_text)
    return z


class ContrastiveLocationEncoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(lonlat, text_vectors)``, ``transform(lonlat)``.

    Constructor arguments mirror :class:`TrainConfig`.
    """

    def __init__(self, batch_size=128, learning_rate=1e-4, temperature=0.07, max_epochs=100,
                 early_stop_patience=10, val_fraction=0.1, seed=0, num_scales=16, lambda_min=1e-3,
                 lambda_max=2.0, hidden_dim=256, num_residual_blocks=2, embedding_dim=128,
                 spatial_projection=False, normalize_text=False, text_dim=None, restore_best=True):
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.seed = seed
        self.num_scales = num_scales
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max
        self.hidden_dim = hidden_dim
        self.num_residual_blocks = num_residual_blocks
        self.embedding_dim = embedding_dim
        self.spatial_projection = spatial_projection
        self.normalize_text = normalize_text
        self.text_dim = text_dim
        self.restore_best = restore_best

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X, y):
        result = fit_arrays(X, y, self._config())
        self.checkpoint_ = result.checkpoint
        self.history_ = result.log
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "checkpoint_")
        X = check_array(X, dtype=np.float64)
        return encode_locations(self.checkpoint_, X)

    def embed_text(self, T):
        check_is_fitted(self, "checkpoint_")
        return embed_text(self.checkpoint_, check_array(T, dtype=np.float64))

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "ContrastiveLocationEncoder":
        cfg = checkpoint.config.to_dict()
        est = cls(**{k: cfg[k] for k in cls().get_params()})
        est.checkpoint_ = checkpoint
        est.history_ = []
        est.n_features_in_ = 2
        return est

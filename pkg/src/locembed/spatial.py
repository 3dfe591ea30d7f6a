"""Location encoder: multi-scale sinusoidal grid encoding followed by a residual MLP.

Forward pass for a batch of normalized coordinates ``X`` (n x 2)::

    E  = grid_encode(X)                       # n x 4S
    h  = relu(E @ W_in + b_in)
    h  = relu(h + relu(h @ W1 + b1) @ W2 + b2)   # per residual block
    u  = h @ W_out + b_out  [@ W_sp]          # optional extra spatial projection
    z  = u / |u|                              # rows on the unit sphere

Parameter arrays live in a flat dict; :func:`param_order` gives the canonical
order used by checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .neural import (Params, l2_normalize_backward, l2_normalize_rows, linear_backward, relu,
                     relu_backward, uniform_init)


@dataclass(frozen=True)
class GridEncodingConfig:
    num_scales: int = 16
    lambda_min: float = 1e-3
    lambda_max: float = 2.0

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if not 0.0 < self.lambda_min < self.lambda_max:
            raise ValueError("need 0 < lambda_min < lambda_max")

    @property
    def output_dim(self) -> int:
        return 4 * self.num_scales

    def wavelengths(self) -> np.ndarray:
        if self.num_scales == 1:
            return np.array([self.lambda_min])
        s = np.arange(self.num_scales) / (self.num_scales - 1)
        return self.lambda_min * (self.lambda_max / self.lambda_min) ** s


def grid_encode(coords, cfg: GridEncodingConfig = GridEncodingConfig()) -> np.ndarray:
    """Encode ``(n, 2)`` normalized coordinates (or a single pair) as ``(n, 4S)`` features.

    Per scale ``s`` the block is ``[sin(x/l_s), cos(x/l_s), sin(y/l_s), cos(y/l_s)]``.
    """
    c = np.asarray(coords, dtype=np.float64)
    single = c.ndim == 1
    c = c.reshape(-1, 2)
    lam = cfg.wavelengths()
    ax = c[:, 0:1] / lam
    ay = c[:, 1:2] / lam
    out = np.stack([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=2).reshape(len(c), -1)
    return out[0] if single else out


class GridEncoder(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`grid_encode`; stateless."""

    def __init__(self, num_scales: int = 16, lambda_min: float = 1e-3, lambda_max: float = 2.0):
        self.num_scales = num_scales
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max

    def fit(self, X=None, y=None):
        self._config()
        return self

    def _config(self) -> GridEncodingConfig:
        return GridEncodingConfig(self.num_scales, self.lambda_min, self.lambda_max)

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 coordinate columns, got {X.shape[1]}")
        return grid_encode(X, self._config())


@dataclass(frozen=True)
class EncoderDims:
    input_dim: int = 64
    hidden_dim: int = 256
    num_residual_blocks: int = 2
    output_dim: int = 128
    spatial_projection: bool = False

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1 or self.num_residual_blocks < 0:
            raise ValueError(f"invalid encoder dimensions {self}")


def param_order(dims: EncoderDims) -> list[str]:
    names = ["input.W", "input.b"]
    for k in range(dims.num_residual_blocks):
        names += [f"block{k}.W1", f"block{k}.b1", f"block{k}.W2", f"block{k}.b2"]
    names += ["output.W", "output.b"]
    if dims.spatial_projection:
        names.append("spatial_proj.W")
    return names


def param_shapes(dims: EncoderDims) -> dict[str, tuple[int, ...]]:
    h = dims.hidden_dim
    shapes = {"input.W": (dims.input_dim, h), "input.b": (h,)}
    for k in range(dims.num_residual_blocks):
        shapes.update({f"block{k}.W1": (h, h), f"block{k}.b1": (h,), f"block{k}.W2": (h, h), f"block{k}.b2": (h,)})
    shapes.update({"output.W": (h, dims.output_dim), "output.b": (dims.output_dim,)})
    if dims.spatial_projection:
        shapes["spatial_proj.W"] = (dims.output_dim, dims.output_dim)
    return shapes


def init_params(dims: EncoderDims, seed: int = 0) -> Params:
    """Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(dims).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = uniform_init(rng, shape[0], shape)
    return params


def _check_params(params: Mapping[str, np.ndarray], dims: EncoderDims) -> None:
    for name, shape in param_shapes(dims).items():
        if name not in params:
            raise KeyError(f"missing parameter {name!r}")
        if params[name].shape != shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


def forward(params: Mapping[str, np.ndarray], enc: np.ndarray, dims: EncoderDims, *, keep_cache: bool = True):
    """Encoded coordinates -> unit-norm embeddings. Returns ``(z, cache)``."""
    enc = np.asarray(enc, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[0] == 0:
        raise ValueError("forward expects a non-empty 2-d batch")
    if enc.shape[1] != dims.input_dim:
        raise ValueError(f"encoding length {enc.shape[1]} != input_dim {dims.input_dim}")
    _check_params(params, dims)

    pre0 = enc @ params["input.W"] + params["input.b"]
    h = relu(pre0)
    blocks = []
    for k in range(dims.num_residual_blocks):
        pre_a = h @ params[f"block{k}.W1"] + params[f"block{k}.b1"]
        a = relu(pre_a)
        pre_out = h + a @ params[f"block{k}.W2"] + params[f"block{k}.b2"]
        blocks.append((h, pre_a, a, pre_out))
        h = relu(pre_out)
    u = h @ params["output.W"] + params["output.b"]
    u_pre_sp = u
    if dims.spatial_projection:
        u = u @ params["spatial_proj.W"]
    z, norms = l2_normalize_rows(u)
    cache = None
    if keep_cache:
        cache = {"enc": enc, "pre0": pre0, "blocks": blocks, "h_last": h, "u_pre_sp": u_pre_sp,
                 "z": z, "norms": norms}
    return z, cache


def backward(params: Mapping[str, np.ndarray], cache: dict | None, grad_z: np.ndarray, dims: EncoderDims):
    """Reverse-mode pass through :func:`forward`. Returns ``(param_grads, grad_enc)``."""
    if cache is None:
        raise ValueError("backward needs the cache from forward(..., keep_cache=True)")
    grads: Params = {}
    du = l2_normalize_backward(np.asarray(grad_z, dtype=np.float64), cache["z"], cache["norms"])
    if dims.spatial_projection:
        du, grads["spatial_proj.W"], _ = linear_backward(du, cache["u_pre_sp"], params["spatial_proj.W"])
    dh, grads["output.W"], grads["output.b"] = linear_backward(du, cache["h_last"], params["output.W"])
    for k in reversed(range(dims.num_residual_blocks)):
        h_in, pre_a, a, pre_out = cache["blocks"][k]
        d_pre_out = relu_backward(dh, pre_out)
        da, grads[f"block{k}.W2"], grads[f"block{k}.b2"] = linear_backward(d_pre_out, a, params[f"block{k}.W2"])
        d_pre_a = relu_backward(da, pre_a)
        dh_branch, grads[f"block{k}.W1"], grads[f"block{k}.b1"] = linear_backward(
            d_pre_a, h_in, params[f"block{k}.W1"])
        dh = d_pre_out + dh_branch
    d_pre0 = relu_backward(dh, cache["pre0"])
    d_enc, grads["input.W"], grads["input.b"] = linear_backward(d_pre0, cache["enc"], params["input.W"])
    return {k: grads[k] for k in param_order(dims)}, d_enc


# --- checkpoint container ---------------------------------------------------
#
# b"LECK" | u32 version=1 | u64 header length | UTF-8 JSON header | float64 LE payload
#
# The header lists ("arrays") every stored array as [name, shape] in payload
# order. Header JSON is written with sorted keys so equal content gives equal
# bytes.

CKPT_MAGIC = b"LECK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


def write_param_file(path: str | Path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["arrays"] = [[name, list(a.shape)] for name, a in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_param_file(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_HEAD.size
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise ValueError(f"{path}: truncated payload in array {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def dims_to_dict(dims: EncoderDims) -> dict:
    return asdict(dims)

"""Dense-layer math shared by the location encoder, the text projection and the probes.

Everything works on row-major ``float64`` arrays. Parameters are passed around as
plain ``dict[str, np.ndarray]`` so that optimizers, checkpoints and gradient
checks can walk them in a fixed key order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, pre: np.ndarray) -> np.ndarray:
    return grad_out * (pre > 0.0)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform weights with variance ``1/fan_in`` (bound ``sqrt(3/fan_in)``)."""
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = x @ w
    if b is not None:
        out = out + b
    return out


def linear_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Return ``(dx, dw, db)`` for ``y = x @ w + b``."""
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def l2_normalize_rows(u: np.ndarray, what: str = "embedding") -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to unit length; returns ``(z, norms)``.

    Raises ``ValueError`` if any row has zero norm.
    """
    norms = np.sqrt(np.sum(u * u, axis=1))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"zero-norm {what} at row {int(bad[0])}")
    return u / norms[:, None], norms


def l2_normalize_backward(grad_z: np.ndarray, z: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(u/|u|) = (I - z z^T) / |u|; the result is tangent to the unit sphere at z
    radial = np.sum(grad_z * z, axis=1, keepdims=True)
    return (grad_z - z * radial) / norms[:, None]


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    shift = np.max(a, axis=1, keepdims=True)
    return (shift + np.log(np.sum(np.exp(a - shift), axis=1, keepdims=True)))[:, 0]


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with a max shift, so ``[1000, 0]`` does not overflow."""
    a = np.asarray(a, dtype=np.float64)
    shifted = a - np.max(a, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def log_softmax_rows(a: np.ndarray) -> np.ndarray:
    return a - logsumexp_rows(a)[:, None]


@dataclass
class AdamState:
    """Moment estimates for one parameter dict.

    ``weight_decay`` (L2 penalty folded into the gradient) and ``clip_norm``
    (global gradient-norm clip) are both off by default.
    """

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    weight_decay: float = 0.0
    clip_norm: float | None = None

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state

    def copy(self) -> "AdamState":
        return AdamState(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            step=self.step,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient component in parameter {name!r}")

    grads = dict(grads)
    if state.weight_decay:
        grads = {k: g + state.weight_decay * params[k] for k, g in grads.items()}
    if state.clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > state.clip_norm:
            grads = {k: g * (state.clip_norm / total) for k, g in grads.items()}

    new = state.copy()
    new.step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** new.step
    corr2 = 1.0 - b2 ** new.step
    out: Params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p.copy()
            continue
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * (g * g)
        new.m[name], new.v[name] = m, v
        out[name] = p - state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return out, new


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    max_abs_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_diff_check(loss_fn: Callable[[Params], tuple[float, Params]], params: Mapping[str, np.ndarray],
                      h: float = 1e-5, tolerance: float = 1e-4,
                      value_fn: Callable[[Params], float] | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``loss_fn(params)`` must return ``(loss, grads)``. The relative error of a
    parameter is ``|g_a - g_fd| / max(|g_a|, |g_fd|)`` in Euclidean norm over
    that parameter's entries, which keeps round-off on near-zero entries from
    dominating. ``value_fn``, if given, returns the loss alone and is used for
    the perturbed evaluations to skip the backward pass.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if value_fn is None:
        def value_fn(q):
            return loss_fn(q)[0]
    loss0, analytic = loss_fn(params)
    if not np.isfinite(loss0):
        raise FloatingPointError("loss is not finite at the check point")

    per_param: dict[str, float] = {}
    max_abs = 0.0
    for name, p in params.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = value_fn(params)
            flat[i] = orig - h
            lm = value_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"loss not finite while perturbing {name}[{i}]")
            num_flat[i] = (lp - lm) / (2.0 * h)
        a = np.asarray(analytic.get(name, np.zeros_like(p)), dtype=np.float64)
        diff = float(np.linalg.norm(a - numeric))
        scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(numeric)))
        per_param[name] = 0.0 if scale == 0.0 else diff / scale
        max_abs = max(max_abs, float(np.max(np.abs(a - numeric))) if p.size else 0.0)
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_error=worst, per_param=per_param, max_abs_error=max_abs, tolerance=tolerance)

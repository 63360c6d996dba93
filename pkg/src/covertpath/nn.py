"""Minimal dense neural machinery sized for ~100-dim states and <=9 actions.

Fixed-architecture MLPs with hand-derived reverse-mode gradients (checked
against central finite differences in the test suite), a masked softmax head,
and bias-corrected Adam.  Everything is float64 and deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

_ACTIVATIONS = ("relu", "tanh")

_BLAS_LIMITER = None


def limit_blas_threads(n: int = 1) -> None:
    """Pin BLAS thread pools; multi-threaded BLAS thrashes on the small
    matrices used here.  Safe to call repeatedly; no-op without threadpoolctl."""
    global _BLAS_LIMITER
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - depends on environment
        return
    _BLAS_LIMITER = threadpool_limits(limits=n)


class NonFiniteGradError(RuntimeError):
    """An update was rejected because gradients contained NaN or Inf."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths input -> hidden... -> output, with the hidden activation.

    The output layer is always linear.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"widths must be positive: {self.layer_widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def param_count(self) -> int:
        return sum(
            i * o + o for i, o in zip(self.layer_widths, self.layer_widths[1:])
        )


class ParamSet:
    """All weights of one MLP in a single flat vector.

    Per-layer (W, b) are views into the flat vector, so optimizer updates on
    the flat array are immediately visible to forward/backward.  float64 is
    the default; training code may opt into float32 for speed (gradient
    correctness is checked in float64, the math is dtype-agnostic).
    """

    def __init__(self, spec: MlpSpec, flat: np.ndarray | None = None, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        if flat is None:
            flat = np.zeros(spec.param_count, dtype=self.dtype)
        flat = np.ascontiguousarray(flat, dtype=self.dtype)
        if flat.shape != (spec.param_count,):
            raise ValueError(
                f"flat parameter vector must have shape ({spec.param_count},), "
                f"got {flat.shape}"
            )
        self.flat = flat
        self.layers: list[tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for n_in, n_out in zip(spec.layer_widths, spec.layer_widths[1:]):
            w = self.flat[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = self.flat[offset : offset + n_out]
            offset += n_out
            self.layers.append((w, b))

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, self.flat.copy(), dtype=self.dtype)


def init_params(
    spec: MlpSpec,
    rng: np.random.Generator,
    output_scale: float = 1.0,
    dtype=np.float64,
) -> ParamSet:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer; the
    output layer is optionally scaled down for stable early training."""
    params = ParamSet(spec, dtype=dtype)
    for i, (w, b) in enumerate(params.layers):
        bound = 1.0 / math.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
        if i == len(params.layers) - 1 and output_scale != 1.0:
            w *= output_scale
            b *= output_scale
    return params


def forward(
    params: ParamSet, x: np.ndarray, with_cache: bool = False
):
    """Run the MLP. Accepts a single vector or a (batch, dim) matrix.

    With with_cache=True also returns the activation stack that backward
    needs; the cache is only valid for this exact (params, x) pair.
    """
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != params.spec.layer_widths[0]:
        raise ValueError(
            f"input width {a.shape[1]} != spec input {params.spec.layer_widths[0]}"
        )
    activations = [a]
    n_layers = len(params.layers)
    tanh = params.spec.activation == "tanh"
    for i, (w, b) in enumerate(params.layers):
        z = a @ w
        z += b
        if i < n_layers - 1:
            a = np.tanh(z, out=z) if tanh else np.maximum(z, 0.0, out=z)
        else:
            a = z
        activations.append(a)
    out = a[0] if single else a
    if with_cache:
        return out, activations
    return out


def backward(
    params: ParamSet, cache: list[np.ndarray], grad_out: np.ndarray
) -> tuple[ParamSet, np.ndarray]:
    """Exact reverse-mode gradients for a cached forward pass.

    grad_out is dLoss/d(output) per sample; parameter gradients are summed
    over the batch (the caller scales for means).  Returns (param gradients
    as a ParamSet, dLoss/d(input)).
    """
    grad_out = np.asarray(grad_out, dtype=params.dtype)
    single = grad_out.ndim == 1
    g = grad_out[None, :] if single else grad_out
    if len(cache) != len(params.layers) + 1:
        raise ValueError("cache does not match the network architecture")
    if g.shape != cache[-1].shape:
        raise ValueError(
            f"grad_out shape {g.shape} != forward output shape {cache[-1].shape}"
        )

    grads = ParamSet(params.spec, dtype=params.dtype)
    tanh = params.spec.activation == "tanh"
    for i in range(len(params.layers) - 1, -1, -1):
        w, _b = params.layers[i]
        gw, gb = grads.layers[i]
        a_prev = cache[i]
        np.matmul(a_prev.T, g, out=gw)
        g.sum(axis=0, out=gb)
        g = g @ w.T
        if i > 0:
            a = cache[i]  # post-activation of the previous layer
            if tanh:
                g *= 1.0 - a * a
            else:
                g *= a > 0.0
    return grads, (g[0] if single else g)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax restricted to unmasked entries; masked entries are exactly 0.

    Max-subtraction keeps extreme logits finite.  Every row must have at
    least one unmasked entry.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ValueError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax needs at least one unmasked entry per row")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AdamState:
    """Moment estimates and step counter for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    scratch_a: np.ndarray
    scratch_b: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 3e-4) -> "AdamState":
        n = params.flat.shape[0]
        z = lambda: np.zeros(n, dtype=params.dtype)
        return cls(m=z(), v=z(), scratch_a=z(), scratch_b=z(), lr=lr)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState) -> None:
    """Standard bias-corrected Adam update, in place.

    Non-finite gradients reject the whole update; parameters stay finite.
    """
    g = grads.flat
    if not np.isfinite(g).all():
        bad = int(np.size(g) - np.isfinite(g).sum())
        raise NonFiniteGradError(f"{bad} non-finite gradient entries; update rejected")
    state.step += 1
    m, v, ta, tb = state.m, state.v, state.scratch_a, state.scratch_b
    np.multiply(g, 1.0 - state.beta1, out=ta)
    m *= state.beta1
    m += ta
    np.multiply(g, g, out=ta)
    ta *= 1.0 - state.beta2
    v *= state.beta2
    v += ta
    np.divide(v, 1.0 - state.beta2**state.step, out=ta)
    np.sqrt(ta, out=ta)
    ta += state.eps
    np.divide(m, ta, out=tb)
    tb *= state.lr / (1.0 - state.beta1**state.step)
    params.flat -= tb


def polyak_update(target: ParamSet, online: ParamSet, rho: float) -> None:
    """target <- (1 - rho) * target + rho * online, in place."""
    target.flat += rho * (online.flat - target.flat)


@dataclass
class ScalarAdam:
    """Adam for a single scalar (the entropy temperature's log)."""

    lr: float = 3e-4
    m: float = 0.0
    v: float = 0.0
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def update(self, value: float, grad: float) -> float:
        if not math.isfinite(grad):
            raise NonFiniteGradError("non-finite scalar gradient; update rejected")
        self.step += 1
        self.m += (1.0 - self.beta1) * (grad - self.m)
        self.v += (1.0 - self.beta2) * (grad * grad - self.v)
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        return value - self.lr * m_hat / (math.sqrt(v_hat) + self.eps)


def sinusoidal_embedding(t: int, dim: int = 16) -> np.ndarray:
    """Transformer-style timestep embedding: interleaved sin/cos bands."""
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


# --- checkpoint container ----------------------------------------------------

CHECKPOINT_VERSION = "1"


def checkpoint_payload(
    params: dict[str, ParamSet],
    scalars: dict[str, float] | None = None,
    meta: dict | None = None,
) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "params": {
            name: {
                "layer_widths": list(p.spec.layer_widths),
                "activation": p.spec.activation,
                "values": p.flat.tolist(),
            }
            for name, p in params.items()
        },
        "scalars": dict(scalars or {}),
        "meta": dict(meta or {}),
    }


def payload_params(payload: dict) -> dict[str, ParamSet]:
    out = {}
    for name, entry in payload["params"].items():
        spec = MlpSpec(tuple(entry["layer_widths"]), entry["activation"])
        out[name] = ParamSet(spec, np.array(entry["values"], dtype=np.float64))
    return out


def save_checkpoint(path, payload: dict) -> None:
    """JSON container; float64 values round-trip exactly via repr."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    return payload


# --- finite differences -------------------------------------------------------


def finite_difference_grad(f, params: ParamSet, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over params.flat."""
    flat = params.flat
    grad = np.zeros_like(flat)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6
) -> float:
    """Elementwise |a-n| / max(|a|, |n|); pairs both below the floor count as
    agreeing.  Central differences at h=1e-5 carry ~1e-10 absolute rounding
    noise for O(10) function values, so entries below the floor are
    noise-dominated and say nothing about gradient correctness."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(scale > floor, err / np.maximum(scale, floor), 0.0)
    return float(rel.max()) if rel.size else 0.0

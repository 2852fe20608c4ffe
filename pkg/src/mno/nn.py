"""Parameter containers and the shared neural building blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .autograd import Tensor, as_tensor, gelu, layer_norm, linear, softmax

__all__ = [
    "ParamSet",
    "MlpSpec",
    "init_affine",
    "init_mlp",
    "init_layer_norm",
    "init_msa",
    "mlp_forward",
    "msa_forward",
    "apply_layer_norm",
    "backward",
    "softmax",
    "resolve_dtype",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    """Map a precision tag ('float32'/'float64') or dtype to a numpy dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(_DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


class ParamSet:
    """Named learnable tensors addressed by dotted paths like ``block.0.local.w_k``.

    ``scope(prefix)`` returns a view onto the parameters under ``prefix``;
    views share the underlying tensors with their parent.
    """

    def __init__(self, tensors: Mapping[str, Tensor] | None = None, dtype="float32"):
        self.dtype = resolve_dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self._prefix = ""
        for name, t in (tensors or {}).items():
            self.add(name, t)

    # mapping protocol --------------------------------------------------

    def _full(self, name: str) -> str:
        return f"{self._prefix}{name}"

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[self._full(name)]
        except KeyError:
            raise KeyError(f"no parameter {self._full(name)!r}") from None

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self.names())

    def names(self) -> list[str]:
        n = len(self._prefix)
        return [k[n:] for k in self._tensors if k.startswith(self._prefix)]

    def items(self) -> list[tuple[str, Tensor]]:
        return [(name, self[name]) for name in self.names()]

    def add(self, name: str, value) -> Tensor:
        full = self._full(name)
        if full in self._tensors:
            raise ValueError(f"duplicate parameter {full!r}")
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=True, name=full)
        self._tensors[full] = t
        return t

    def scope(self, prefix: str) -> "ParamSet":
        view = ParamSet.__new__(ParamSet)
        view.dtype = self.dtype
        view._tensors = self._tensors
        view._prefix = f"{self._prefix}{prefix}."
        return view

    # bulk helpers ------------------------------------------------------

    def num_values(self) -> int:
        return sum(t.size for _, t in self.items())

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter array, keyed by name."""
        return {name: t.data.copy() for name, t in self.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for name, t in self.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({name: t.data for name, t in self.items()}, dtype=dtype)

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None


def backward(loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every parameter.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    params.zero_grad()
    loss.backward()
    grads = {}
    for name, t in params.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "gelu"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"MLP widths must be positive: {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


_ACTIVATIONS = {"gelu": gelu}


def init_affine(params: ParamSet, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bias: bool = True) -> None:
    """Add ``{name}.w`` (fan_in x fan_out) and ``{name}.b``, uniform in +-sqrt(1/fan_in)."""
    bound = math.sqrt(1.0 / fan_in)
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    if bias:
        params.add(f"{name}.b", rng.uniform(-bound, bound, size=(fan_out,)))


def init_mlp(params: ParamSet, prefix: str, spec: MlpSpec, rng: np.random.Generator) -> None:
    for i in range(spec.n_layers):
        init_affine(params, f"{prefix}.{i}", spec.widths[i], spec.widths[i + 1], rng, spec.bias)


def init_layer_norm(params: ParamSet, prefix: str, width: int) -> None:
    params.add(f"{prefix}.gamma", np.ones(width))
    params.add(f"{prefix}.beta", np.zeros(width))


def init_msa(params: ParamSet, prefix: str, dim: int, rng: np.random.Generator) -> None:
    for proj in ("q", "k", "v", "o"):
        init_affine(params, f"{prefix}.{proj}", dim, dim, rng)


def _affine(params: ParamSet, name: str, x: Tensor) -> Tensor:
    b = params[f"{name}.b"] if f"{name}.b" in params else None
    return linear(x, params[f"{name}.w"], b)


def mlp_forward(spec: MlpSpec, params: ParamSet, x) -> Tensor:
    """Affine layers with the activation between them (none after the last)."""
    x = as_tensor(x, params.dtype)
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"MLP expects last dim {spec.widths[0]}, got {x.shape[-1]}")
    act = _ACTIVATIONS[spec.activation]
    for i in range(spec.n_layers):
        x = _affine(params, str(i), x)
        if i < spec.n_layers - 1:
            x = act(x)
    return x


def apply_layer_norm(params: ParamSet, x: Tensor) -> Tensor:
    return layer_norm(x, params["gamma"], params["beta"])


def msa_forward(params: ParamSet, tokens, heads: int, return_weights: bool = False):
    """Multi-head self-attention over tokens of shape (..., M, D).

    Scaled dot-product attention per head followed by an output projection.
    With ``return_weights`` the per-head weights (..., heads, M, M) are
    returned as a second value.
    """
    tokens = as_tensor(tokens, params.dtype)
    *lead, m, d = tokens.shape
    if heads < 1 or d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    if m < 1:
        raise ValueError("attention needs at least one token")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        # (..., M, D) -> (..., H, M, dh)
        nl = len(lead)
        t = t.reshape(*lead, m, heads, dh)
        return t.transpose(*range(nl), nl + 1, nl, nl + 2)

    q = split(_affine(params, "q", tokens))
    k = split(_affine(params, "k", tokens))
    v = split(_affine(params, "v", tokens))
    nl = len(lead)
    kt = k.transpose(*range(nl + 1), nl + 2, nl + 1)
    scores = (q @ kt) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = weights @ v  # (..., H, M, dh)
    ctx = ctx.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, m, d)
    out = _affine(params, "o", ctx)
    if return_weights:
        return out, weights.data
    return out

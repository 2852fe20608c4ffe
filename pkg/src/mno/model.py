"""Encoder, multiscale blocks and decoder of the point-cloud neural operator.

Each block runs up to three modules side by side on the layer-normalized
latent tokens and adds their outputs to the residual stream:

* global: tokens are softly pooled into a few modes, mixed by multi-head
  self-attention, and scattered back;
* local: per-channel (vector) attention over each point's k-NN graph;
* micro: a per-point scalar score, softmax-normalized over the sample,
  rescales each token.

A pre-norm feed-forward layer with its own residual closes the block.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .autograd import (
    Tensor,
    as_tensor,
    concat,
    gather_rows,
    scatter_matrix,
    softmax,
    softmax_weighted_sum,
    stack,
)
from .geometry import NeighborGraph, NormStats, PointSample, batch_pack, Batch
from .nn import (
    MlpSpec,
    ParamSet,
    apply_layer_norm,
    init_affine,
    init_layer_norm,
    init_mlp,
    init_msa,
    mlp_forward,
    msa_forward,
    resolve_dtype,
    _affine,
)

__all__ = [
    "ModuleMask",
    "MnoConfig",
    "MnoModel",
    "init_model",
    "encode",
    "global_attention",
    "local_attention",
    "micro_attention",
    "mno_block",
    "decode",
    "forward",
    "forward_batch",
    "TABLE3_MASKS",
]

Bounds = Sequence[tuple[int, int]] | None

# centres per block in local attention; keeps (rows, k, D) temporaries near L2 size
LOCAL_CHUNK = 512

_LETTERS = {"G": "Global", "L": "Local", "M": "Micro"}


@dataclass(frozen=True)
class ModuleMask:
    use_global: bool = True
    use_local: bool = True
    use_micro: bool = True

    def __post_init__(self):
        if not (self.use_global or self.use_local or self.use_micro):
            raise ValueError("module mask must enable at least one module")

    @classmethod
    def parse(cls, text: str) -> "ModuleMask":
        """Accepts 'GLM', 'GL', 'L', 'Global+Local', 'global,micro', ..."""
        raw = text.strip()
        if not raw:
            raise ValueError("empty module mask")
        words = [w for w in raw.replace(",", "+").split("+") if w]
        if len(words) == 1 and set(words[0].upper()) <= set("GLM"):
            letters = set(words[0].upper())
        else:
            letters = set()
            for w in words:
                key = w.strip().lower()
                match = [c for c, full in _LETTERS.items() if full.lower() == key]
                if not match:
                    raise ValueError(f"unknown module {w!r} in mask {text!r}")
                letters.add(match[0])
        return cls("G" in letters, "L" in letters, "M" in letters)

    @property
    def code(self) -> str:
        return "".join(c for c, on in zip("GLM", self._flags()) if on)

    @property
    def label(self) -> str:
        return "+".join(_LETTERS[c] for c in self.code)

    def _flags(self) -> tuple[bool, bool, bool]:
        return (self.use_global, self.use_local, self.use_micro)

    def __str__(self) -> str:
        return self.code


# Row order of the module ablation table.
TABLE3_MASKS = tuple(ModuleMask.parse(c) for c in ("G", "L", "M", "LM", "GM", "GL", "GLM"))


@dataclass(frozen=True)
class MnoConfig:
    in_features: int = 0
    out_features: int = 1
    blocks: int = 4
    dim: int = 128
    modes: int = 256
    heads: int = 8
    k: int = 16
    mask: ModuleMask = field(default_factory=ModuleMask)

    def __post_init__(self):
        if isinstance(self.mask, str):
            object.__setattr__(self, "mask", ModuleMask.parse(self.mask))
        for name in ("blocks", "dim", "modes", "heads", "k", "out_features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.in_features < 0:
            raise ValueError("in_features must be >= 0")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    def with_mask(self, mask) -> "MnoConfig":
        return replace(self, mask=ModuleMask.parse(mask) if isinstance(mask, str) else mask)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            out[f.name] = str(getattr(self, f.name))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MnoConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = d[f.name] if f.name == "mask" else int(d[f.name])
        return cls(**kw)

    # MLP shapes; every MLP has one hidden layer of width ``dim``.
    def encoder_spec(self) -> MlpSpec:
        return MlpSpec((3 + self.in_features, self.dim, self.dim))

    def decoder_spec(self) -> MlpSpec:
        return MlpSpec((self.dim, self.dim, self.out_features))

    def projector_spec(self) -> MlpSpec:
        return MlpSpec((self.dim, self.dim, self.modes))

    def pos_spec(self) -> MlpSpec:
        return MlpSpec((3, self.dim, self.dim))

    def square_spec(self) -> MlpSpec:
        return MlpSpec((self.dim, self.dim, self.dim))

    def score_spec(self) -> MlpSpec:
        return MlpSpec((self.dim, self.dim, 1))


@dataclass
class MnoModel:
    config: MnoConfig
    params: ParamSet
    stats: NormStats | None = None

    @property
    def dtype(self):
        return self.params.dtype

    def block(self, i: int) -> ParamSet:
        return self.params.scope(f"block.{i}")

    def active_parameter_names(self) -> list[str]:
        """Parameters the forward pass can reach under the current mask."""
        off = []
        mask = self.config.mask
        if not mask.use_global:
            off.append(".global.")
        if not mask.use_local:
            off.append(".local.")
        if not mask.use_micro:
            off.append(".micro.")
        return [n for n in self.params.names() if not any(tag in n for tag in off)]

    def num_parameters(self) -> int:
        return self.params.num_values()


def init_model(config: MnoConfig, seed: int = 0, precision="float32",
               stats: NormStats | None = None) -> MnoModel:
    """Seeded initialization; every module gets parameters regardless of the mask."""
    rng = np.random.default_rng(seed)
    dtype = resolve_dtype(precision)
    params = ParamSet(dtype=dtype)
    d = config.dim
    init_mlp(params, "encoder", config.encoder_spec(), rng)
    for i in range(config.blocks):
        b = f"block.{i}"
        init_layer_norm(params, f"{b}.norm1", d)
        init_mlp(params, f"{b}.global.p_mlp", config.projector_spec(), rng)
        init_mlp(params, f"{b}.global.q_mlp", config.projector_spec(), rng)
        init_msa(params, f"{b}.global.msa", d, rng)
        for proj in ("q", "k", "v"):
            init_affine(params, f"{b}.local.{proj}", d, d, rng)
        init_mlp(params, f"{b}.local.pos_mlp", config.pos_spec(), rng)
        init_mlp(params, f"{b}.local.kernel_mlp", config.square_spec(), rng)
        init_mlp(params, f"{b}.micro.score_mlp", config.score_spec(), rng)
        init_layer_norm(params, f"{b}.norm2", d)
        init_mlp(params, f"{b}.ffn", config.square_spec(), rng)
    init_mlp(params, "decoder", config.decoder_spec(), rng)
    return MnoModel(config, params, stats)


# -- stages ---------------------------------------------------------------


def encode(pos, features, model: MnoModel) -> Tensor:
    """Latent tokens from concatenated coordinates and auxiliary features."""
    cfg = model.config
    pos = np.asarray(pos)
    feats = np.asarray(features).reshape(pos.shape[0], -1)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must be (N, 3), got {pos.shape}")
    if feats.shape[1] != cfg.in_features:
        raise ValueError(f"expected {cfg.in_features} features, got {feats.shape[1]}")
    x = np.concatenate([pos, feats], axis=1).astype(model.dtype)
    return mlp_forward(cfg.encoder_spec(), model.params.scope("encoder"), x)


def _segments(x: Tensor, bounds: Bounds) -> list[Tensor]:
    if bounds is None or len(bounds) == 1:
        return [x]
    return [x[a:b] for a, b in bounds]


def global_attention(x: Tensor, params: ParamSet, heads: int, bounds: Bounds = None,
                     return_maps: bool = False):
    """Pool points into modes, self-attend among modes, scatter back.

    ``P = softmax over points of p_mlp(x)`` pools, ``Q = softmax over
    modes of q_mlp(x)`` scatters: ``out = Q @ MSA(P^T @ x)``.  Softmax over
    points never crosses a sample boundary in ``bounds``.
    """
    x = as_tensor(x, params.dtype)
    d = x.shape[-1]
    modes = params["p_mlp.1.w"].shape[1]
    spec = MlpSpec((d, d, modes))
    p_logits = mlp_forward(spec, params.scope("p_mlp"), x)
    q = softmax(mlp_forward(spec, params.scope("q_mlp"), x), axis=1)
    xs = _segments(x, bounds)
    ps = [softmax(seg, axis=0) for seg in _segments(p_logits, bounds)]
    pooled = stack([p.T @ xb for p, xb in zip(ps, xs)])  # (B, M, D)
    mixed = msa_forward(params.scope("msa"), pooled, heads)
    qs = _segments(q, bounds)
    out = concat([qb @ mixed[i] for i, qb in enumerate(qs)], axis=0)
    if return_maps:
        return out, {"P": concat(ps, axis=0).data, "Q": q.data, "pooled": pooled.data}
    return out


def local_attention(x: Tensor, graph: NeighborGraph, params: ParamSet) -> Tensor:
    """Vector attention over each point's neighbours.

    For centre i and neighbour j (rel = pos_mlp(offset_ij)):
    ``w_ij = softmax_j kernel_mlp(q_i - k_j + rel)`` per channel and
    ``out_i = sum_j w_ij * (v_j + rel)``.
    """
    x = as_tensor(x, params.dtype)
    n, d = x.shape
    if graph.n_points != n:
        raise ValueError(f"graph has {graph.n_points} points, latents have {n}")
    q = _affine(params, "q", x)
    k = _affine(params, "k", x)
    v = _affine(params, "v", x)
    if n <= LOCAL_CHUNK:
        return _local_rows(q, k, v, graph, params, 0, n)
    # (rows, k, D) intermediates are processed in cache-sized row blocks
    parts = []
    for start in range(0, n, LOCAL_CHUNK):
        stop = min(start + LOCAL_CHUNK, n)
        q_rows = gather_rows(q, np.arange(start, stop), _row_picker(n, start, stop, x.dtype))
        parts.append(_local_rows(q_rows, k, v, graph, params, start, stop))
    return concat(parts, axis=0)


def _row_picker(n: int, start: int, stop: int, dtype):
    return scatter_matrix(np.arange(start, stop), n, dtype=dtype)


def _local_rows(q: Tensor, k: Tensor, v: Tensor, graph: NeighborGraph, params: ParamSet,
                start: int, stop: int) -> Tensor:
    """Local attention output for centres ``start:stop``; ``q`` holds just those rows."""
    d = k.shape[1]
    idx = graph.indices[start:stop]
    scatter = graph.scatter(k.dtype, start, stop)
    k_nbr = gather_rows(k, idx, scatter)
    v_nbr = gather_rows(v, idx, scatter)
    rel = mlp_forward(MlpSpec((3, d, d)), params.scope("pos_mlp"),
                      graph.offsets[start:stop].astype(k.dtype))
    logits = mlp_forward(MlpSpec((d, d, d)), params.scope("kernel_mlp"),
                         q.reshape(stop - start, 1, d) - k_nbr + rel)
    return softmax_weighted_sum(logits, v_nbr + rel, axis=1)


def micro_attention(x: Tensor, params: ParamSet, bounds: Bounds = None,
                    return_scores: bool = False):
    """``x + s * x`` with ``s`` a softmax over the sample's points of score_mlp(x)."""
    x = as_tensor(x, params.dtype)
    d = x.shape[-1]
    logits = mlp_forward(MlpSpec((d, d, 1)), params.scope("score_mlp"), x)
    score = concat([softmax(seg, axis=0) for seg in _segments(logits, bounds)], axis=0)
    out = x + score * x
    if return_scores:
        return out, score.data
    return out


def mno_block(x: Tensor, graph: NeighborGraph, params: ParamSet, config: MnoConfig,
              bounds: Bounds = None, mask: ModuleMask | None = None) -> Tensor:
    mask = mask or config.mask
    if not (mask.use_global or mask.use_local or mask.use_micro):
        raise ValueError("block needs at least one enabled module")
    xn = apply_layer_norm(params.scope("norm1"), x)
    y = x
    if mask.use_global:
        y = y + global_attention(xn, params.scope("global"), config.heads, bounds)
    if mask.use_local:
        y = y + local_attention(xn, graph, params.scope("local"))
    if mask.use_micro:
        y = y + micro_attention(xn, params.scope("micro"), bounds)
    h = apply_layer_norm(params.scope("norm2"), y)
    return y + mlp_forward(config.square_spec(), params.scope("ffn"), h)


def decode(x: Tensor, model: MnoModel) -> Tensor:
    x = as_tensor(x, model.dtype)
    if x.shape[-1] != model.config.dim:
        raise ValueError(f"decoder expects width {model.config.dim}, got {x.shape[-1]}")
    return mlp_forward(model.config.decoder_spec(), model.params.scope("decoder"), x)


def _run(model: MnoModel, pos, features, graph: NeighborGraph, bounds: Bounds) -> Tensor:
    if graph.k != model.config.k:
        raise ValueError(f"graph has k={graph.k}, model expects k={model.config.k}")
    x = encode(pos, features, model)
    for i in range(model.config.blocks):
        x = mno_block(x, graph, model.block(i), model.config, bounds)
    return decode(x, model)


def forward(model: MnoModel, sample: PointSample, graph: NeighborGraph) -> Tensor:
    """Predicted (normalized) targets for one sample, shape (N, O)."""
    if graph.n_points != sample.n_points:
        raise ValueError("graph and sample sizes differ")
    return _run(model, sample.positions, sample.features, graph, None)


def forward_batch(model: MnoModel, batch: Batch) -> Tensor:
    """Forward on packed samples; per-sample results are independent of packing."""
    return _run(model, batch.positions, batch.features, batch.graph, batch.bounds)


def pack(model: MnoModel, samples: Sequence[PointSample],
         graphs: Sequence[NeighborGraph] | None = None) -> Batch:
    return batch_pack(samples, model.config.k, graphs)

"""Losses, metrics, the training loop, evaluation, ablations and gradient checks."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import NumericError, Tensor, concat, l2_norm, no_grad
from .geometry import (
    NeighborGraph,
    NormStats,
    PointSample,
    batch_pack,
    knn_graph,
    normalize_sample,
)
from .io import file_sha256, read_checkpoint, write_checkpoint, write_keyvalue
from .model import MnoConfig, MnoModel, ModuleMask, forward, forward_batch, init_model
from .nn import backward
from .optim import OneCycle, OptimizerState, adamw_step

log = logging.getLogger(__name__)

__all__ = [
    "Field",
    "parse_fields",
    "format_fields",
    "SPHERE_FLOW_FIELDS",
    "rl2",
    "mae",
    "TrainConfig",
    "TrainingAborted",
    "TrainResult",
    "MetricsReport",
    "train",
    "evaluate",
    "predict",
    "sample_loss",
    "ablate",
    "AblationResult",
    "gradient_check",
    "GradCheckReport",
    "save_model",
    "load_model",
]


# -- field grouping ------------------------------------------------------


@dataclass(frozen=True)
class Field:
    """Output channels that form one physical field for loss and metrics.

    ``region="surface"`` restricts the field to points whose first input
    feature (signed distance) is exactly zero.  ``steps > 1`` splits the
    channels into equal consecutive groups, one per time step.
    """

    name: str
    channels: tuple[int, ...]
    region: str = "all"
    steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ValueError(f"field {self.name!r} has no channels")
        if self.region not in ("all", "surface"):
            raise ValueError(f"field {self.name!r}: unknown region {self.region!r}")
        if self.steps < 1 or len(self.channels) % self.steps:
            raise ValueError(f"field {self.name!r}: {len(self.channels)} channels not divisible into {self.steps} steps")

    def step_channels(self) -> list[tuple[int, ...]]:
        w = len(self.channels) // self.steps
        return [self.channels[i * w:(i + 1) * w] for i in range(self.steps)]


SPHERE_FLOW_FIELDS = (Field("velocity", (0, 1, 2)), Field("pressure", (3,), "surface"))


def parse_fields(text: str | None, n_outputs: int | None = None) -> tuple[Field, ...] | None:
    """Parse ``"velocity:0-2,pressure:3@surface,x:0-11/4"``.

    ``a-b`` is an inclusive channel range, ``@surface`` restricts the
    region and ``/n`` declares n time steps.
    """
    if text is None or not text.strip() or text.strip() == "all":
        return None
    if text.strip() == "sphere-flow":
        return SPHERE_FLOW_FIELDS
    out = []
    for item in text.split(","):
        name, _, rest = item.strip().partition(":")
        if not rest:
            raise ValueError(f"bad field spec {item!r}; expected name:channels")
        steps = 1
        if "/" in rest:
            rest, s = rest.split("/", 1)
            steps = int(s)
        region = "all"
        if "@" in rest:
            rest, region = rest.split("@", 1)
        chans = []
        for part in rest.split("+"):
            lo, _, hi = part.partition("-")
            chans.extend(range(int(lo), int(hi or lo) + 1))
        out.append(Field(name.strip(), tuple(chans), region, steps))
    fields_ = tuple(out)
    if n_outputs is not None:
        check_fields(fields_, n_outputs)
    return fields_


def format_fields(fields_: Sequence[Field] | None) -> str:
    if not fields_:
        return "all"
    parts = []
    for f in fields_:
        chans = "+".join(str(c) for c in f.channels)
        s = f"{f.name}:{chans}"
        if f.region != "all":
            s += f"@{f.region}"
        if f.steps > 1:
            s += f"/{f.steps}"
        parts.append(s)
    return ",".join(parts)


def check_fields(fields_: Sequence[Field], n_outputs: int) -> None:
    for f in fields_:
        bad = [c for c in f.channels if not 0 <= c < n_outputs]
        if bad:
            raise ValueError(f"field {f.name!r} references missing channels {bad} (have {n_outputs})")


def _resolve_fields(fields_, n_outputs: int) -> tuple[Field, ...]:
    if not fields_:
        return (Field("out", tuple(range(n_outputs))),)
    check_fields(fields_, n_outputs)
    return tuple(fields_)


def _region_rows(sample: PointSample, region: str) -> np.ndarray | None:
    if region == "all":
        return None
    if sample.n_features < 1:
        raise ValueError("surface region needs a signed-distance feature")
    rows = np.flatnonzero(sample.features[:, 0] == 0)
    if rows.size == 0:
        raise ValueError(f"{sample.name or 'sample'}: no surface points")
    return rows


# -- metrics -------------------------------------------------------------


def rl2(pred, truth) -> float:
    """Relative L2 error ``||pred - truth|| / ||truth||`` over all entries."""
    # contiguous copies keep the summation order independent of strides
    pred = np.ascontiguousarray(pred, dtype=np.float64)
    truth = np.ascontiguousarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise NumericError("rl2: truth has zero norm")
    return float(np.linalg.norm(pred - truth) / denom)


def mae(pred, truth) -> float:
    """Mean absolute deviation over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def _rl2_tensor(pred: Tensor, truth: np.ndarray) -> Tensor:
    denom = float(np.linalg.norm(truth.astype(np.float64)))
    if denom == 0:
        raise NumericError("rl2: truth has zero norm")
    return l2_norm(pred - truth.astype(pred.dtype)) * (1.0 / denom)


# -- prepared samples ----------------------------------------------------


@dataclass
class _Prepared:
    raw: PointSample
    norm: PointSample
    graph: NeighborGraph
    selections: list[tuple[np.ndarray | None, list[int]]]
    truths: list[np.ndarray]


def _prepare(model: MnoModel, sample: PointSample, fields_: Sequence[Field]) -> _Prepared:
    cfg = model.config
    if sample.n_features != cfg.in_features or sample.n_outputs != cfg.out_features:
        raise ValueError(
            f"{sample.name or 'sample'}: channels ({sample.n_features}, {sample.n_outputs}) "
            f"do not match model ({cfg.in_features}, {cfg.out_features})"
        )
    stats = model.stats or NormStats.identity(cfg.in_features, cfg.out_features)
    norm, _ = normalize_sample(sample, stats, dtype=model.dtype)
    graph = knn_graph(norm.positions, cfg.k)
    selections, truths = [], []
    for f in fields_:
        rows = _region_rows(sample, f.region)
        cols = list(f.channels)
        t = sample.targets[:, cols] if rows is None else sample.targets[np.ix_(rows, cols)]
        selections.append((rows, cols))
        truths.append(t.astype(np.float64))
    return _Prepared(sample, norm, graph, selections, truths)


def _denormalized(model: MnoModel, out: Tensor) -> Tensor:
    stats = model.stats
    if stats is None:
        return out
    std = stats.targets.std.astype(model.dtype)
    mean = stats.targets.mean.astype(model.dtype)
    return out * std + mean


def _loss_terms(pred_phys: Tensor, prep: _Prepared) -> Tensor:
    terms = []
    for (rows, cols), truth in zip(prep.selections, prep.truths):
        sel = pred_phys[:, cols] if rows is None else pred_phys[np.ix_(rows, cols)]
        terms.append(_rl2_tensor(sel, truth))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def sample_loss(model: MnoModel, sample: PointSample, fields_=None) -> float:
    """The training objective (mean per-field RL2) for one sample, no gradients."""
    fields_ = _resolve_fields(fields_, model.config.out_features)
    prep = _prepare(model, sample, fields_)
    with no_grad():
        out = forward(model, prep.norm, prep.graph)
        return _loss_terms(_denormalized(model, out), prep).item()


def predict(model: MnoModel, sample: PointSample) -> np.ndarray:
    """Physical-unit predictions (N, O) for a raw sample."""
    cfg = model.config
    prep = _prepare(model, sample, ())
    with no_grad():
        out = _denormalized(model, forward(model, prep.norm, prep.graph))
    return out.data.astype(np.float64)


# -- configuration -------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    max_lr: float = 1e-3
    seed: int = 0
    precision: str = "float32"
    loss: str = "rl2"
    fields: str = "all"
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pct_start: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_lr < 0:
            raise ValueError("max_lr must be >= 0")
        if self.loss != "rl2":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = type(f.default)(d[f.name])
        return cls(**kw)

    def field_groups(self, n_outputs: int) -> tuple[Field, ...]:
        return _resolve_fields(parse_fields(self.fields, n_outputs), n_outputs)


def fingerprint(*dicts: dict) -> str:
    items = sorted((k, str(v)) for d in dicts for k, v in d.items())
    text = "\n".join(f"{k}={v}" for k, v in items)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


class TrainingAborted(NumericError):
    """Training hit a non-finite loss."""


@dataclass
class TrainResult:
    model: MnoModel
    history: list[dict]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    steps: int
    wall_time: float
    artifacts: dict[str, Path] = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [h["train_loss"] for h in self.history]


def _split(dataset: list[PointSample], val, fraction: float):
    if val is not None:
        return dataset, list(val)
    n_val = int(len(dataset) * fraction)
    if n_val == 0:
        return dataset, []
    return dataset[:-n_val], dataset[-n_val:]


def train(model: MnoModel, dataset: Sequence[PointSample], cfg: TrainConfig,
          val: Sequence[PointSample] | None = None, out_dir=None,
          step_callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit ``model`` in place with AdamW and a one-cycle schedule.

    The loss of a batch is the mean over its samples of the per-sample mean
    per-field RL2, in physical units.  Normalization statistics are taken
    from the training split when the model has none.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    train_set, val_set = _split(dataset, val, cfg.val_fraction)
    fields_ = cfg.field_groups(model.config.out_features)
    if model.stats is None:
        model.stats = NormStats.from_samples(train_set)
    prepared = [_prepare(model, s, fields_) for s in train_set]
    val_prepared = [_prepare(model, s, fields_) for s in val_set]

    n = len(prepared)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    schedule = OneCycle(total, cfg.max_lr, cfg.pct_start, cfg.div_start, cfg.div_final) if cfg.max_lr > 0 else None
    opt = OptimizerState(lr=cfg.max_lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                         weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best_score, best_epoch, best_state = math.inf, -1, model.params.state()
    step = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        lr = 0.0
        for lo in range(0, n, cfg.batch_size):
            items = [prepared[i] for i in order[lo:lo + cfg.batch_size]]
            lr = schedule(step) if schedule else 0.0
            loss = _batch_loss(model, items)
            grads = backward(loss, model.params)
            adamw_step(opt, model.params, grads, lr)
            epoch_losses.append(loss.item())
            if step_callback is not None:
                step_callback(step, loss.item())
            step += 1
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(epoch_losses))}
        if val_prepared:
            row["val_rl2"] = float(np.mean([_eval_loss(model, p) for p in val_prepared]))
        history.append(row)
        score = row.get("val_rl2", row["train_loss"])
        if score < best_score:
            best_score, best_epoch, best_state = score, epoch, model.params.state()
        log.debug("epoch %d lr %.3g loss %.5f", epoch, lr, row["train_loss"])

    result = TrainResult(model, history, best_state, best_epoch, step, time.perf_counter() - t0)
    if out_dir is not None:
        result.artifacts = _write_run(Path(out_dir), result, cfg)
    return result


def _batch_loss(model: MnoModel, items: list[_Prepared]) -> Tensor:
    names = ", ".join(p.raw.name or "?" for p in items)
    batch = batch_pack([p.norm for p in items], model.config.k, [p.graph for p in items])
    try:
        out = _denormalized(model, forward_batch(model, batch))
        terms = []
        for (a, b), prep in zip(batch.bounds, items):
            term = _loss_terms(out[a:b], prep)
            if not np.isfinite(term.data):
                raise TrainingAborted(f"non-finite loss on sample {prep.raw.name or '?'}")
            terms.append(term)
    except TrainingAborted:
        raise
    except NumericError as exc:
        raise TrainingAborted(f"{exc} (batch: {names})") from exc
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _eval_loss(model: MnoModel, prep: _Prepared) -> float:
    with no_grad():
        out = _denormalized(model, forward(model, prep.norm, prep.graph))
        return _loss_terms(out, prep).item()


# -- checkpoints ----------------------------------------------------------


def save_model(model: MnoModel, path, manifest: dict | None = None,
               state: dict[str, np.ndarray] | None = None) -> None:
    arrays = dict(state if state is not None else model.params.state())
    header = {f"config.{k}": v for k, v in model.config.to_dict().items()}
    header["precision"] = str(model.dtype)
    if model.stats is not None:
        # full float64 text so reloaded predictions match exactly
        for key, values in _stats_fields(model.stats).items():
            header[f"norm.{key}"] = ",".join(repr(float(v)) for v in values)
    for k, v in (manifest or {}).items():
        header[f"manifest.{k}"] = v
    write_checkpoint(path, arrays, header)


def _stats_fields(stats: NormStats) -> dict[str, np.ndarray]:
    return {
        "feature_mean": stats.features.mean,
        "feature_std": stats.features.std,
        "target_mean": stats.targets.mean,
        "target_std": stats.targets.std,
    }


def load_model(path, precision=None) -> tuple[MnoModel, dict[str, str]]:
    """Model plus the manifest stored alongside its parameters."""
    from .geometry import ChannelStats

    header, arrays = read_checkpoint(path)
    cfg = MnoConfig.from_dict({k[7:]: v for k, v in header.items() if k.startswith("config.")})
    model = init_model(cfg, precision=precision or header.get("precision", "float32"))
    model.params.load_state(arrays)
    if "norm.target_mean" in header:
        def vec(key):
            text = header[f"norm.{key}"]
            return np.array([float(v) for v in text.split(",")] if text else [], dtype=np.float64)

        model.stats = NormStats(
            ChannelStats(vec("feature_mean"), vec("feature_std")),
            ChannelStats(vec("target_mean"), vec("target_std")),
        )
    manifest = {k[9:]: v for k, v in header.items() if k.startswith("manifest.")}
    return model, manifest


def run_manifest(model: MnoModel, cfg: TrainConfig) -> dict[str, str]:
    out = dict(model.config.to_dict())
    out.update(cfg.to_dict())
    out["fingerprint"] = fingerprint(model.config.to_dict(), cfg.to_dict())
    return out


def _write_run(out: Path, result: TrainResult, cfg: TrainConfig) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    model = result.model
    manifest = run_manifest(model, cfg)
    paths = {
        "final": out / "final.ckpt",
        "best": out / "best.ckpt",
        "history": out / "history.csv",
    }
    save_model(model, paths["final"], manifest)
    save_model(model, paths["best"], {**manifest, "best_epoch": result.best_epoch},
               state=result.best_state)
    write_history(result.history, paths["history"])
    for key in ("final", "best"):
        m = dict(manifest)
        m["checkpoint"] = paths[key].name
        m["sha256"] = file_sha256(paths[key])
        p = paths[key].with_suffix(".manifest")
        write_keyvalue(m, p)
        paths[f"{key}_manifest"] = p
    return paths


def write_history(history: list[dict], path) -> None:
    cols = ["epoch", "lr", "train_loss"] + (["val_rl2"] if history and "val_rl2" in history[0] else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


# -- evaluation -----------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list[tuple[str, float, float]]  # (field, rl2, mae)
    n_samples: int
    wall_time: float
    fingerprint: str = ""

    def __getitem__(self, name: str) -> tuple[float, float]:
        for f, r, m in self.rows:
            if f == name:
                return r, m
        raise KeyError(name)

    def rl2(self, name: str) -> float:
        return self[name][0]

    def mae(self, name: str) -> float:
        return self[name][1]

    @property
    def field_names(self) -> list[str]:
        return [r[0] for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["field", "rl2", "mae", "n_samples", "wall_time_s", "fingerprint"])
            for f, r, m in self.rows:
                w.writerow([f, repr(r), repr(m), self.n_samples, f"{self.wall_time:.3f}", self.fingerprint])


def evaluate(model: MnoModel, dataset: Sequence[PointSample], fields_=None) -> MetricsReport:
    """Per-field RL2/MAE averaged over samples.

    A field with ``steps > 1`` yields one row per step (``name1``,
    ``name2``, ...) followed by the row for all steps together.
    """
    t0 = time.perf_counter()
    if isinstance(fields_, str):
        fields_ = parse_fields(fields_)
    fields_ = _resolve_fields(fields_, model.config.out_features)
    sums: dict[str, list[float]] = {}
    for sample in dataset:
        pred = predict(model, sample)
        for f in fields_:
            rows = _region_rows(sample, f.region)
            p = pred if rows is None else pred[rows]
            t = sample.targets if rows is None else sample.targets[rows]
            groups = f.step_channels() if f.steps > 1 else []
            for j, chans in enumerate(groups):
                key = f"{f.name}{j + 1}"
                _accumulate(sums, key, p[:, chans], t[:, chans])
            _accumulate(sums, f.name, p[:, list(f.channels)], t[:, list(f.channels)])
    n = len(dataset)
    rows = [(k, v[0] / n, v[1] / n) for k, v in sums.items()]
    fp = fingerprint(model.config.to_dict())
    return MetricsReport(rows, n, time.perf_counter() - t0, fp)


def _accumulate(sums, key, p, t):
    acc = sums.setdefault(key, [0.0, 0.0])
    acc[0] += rl2(p, t)
    acc[1] += mae(p, t)


# -- ablation --------------------------------------------------------------


@dataclass
class AblationResult:
    runs: list[tuple[ModuleMask, int, MetricsReport]]

    def masks(self) -> list[ModuleMask]:
        seen = []
        for m, _, _ in self.runs:
            if m not in seen:
                seen.append(m)
        return seen

    def median(self, mask: ModuleMask, name: str, metric: str = "rl2") -> float:
        vals = [getattr(r, metric)(name) for m, _, r in self.runs if m == mask]
        return float(np.median(vals))

    def to_csv(self, path) -> None:
        """One row per mask with metrics as medians over seeds."""
        first = self.runs[0][2]
        names = first.field_names
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["modules", "n_seeds"]
            for name in names:
                header += [f"rl2_{name}", f"mae_{name}"]
            w.writerow(header)
            for mask in self.masks():
                n_seeds = sum(1 for m, _, _ in self.runs if m == mask)
                row = [mask.label, n_seeds]
                for name in names:
                    row += [repr(self.median(mask, name, "rl2")), repr(self.median(mask, name, "mae"))]
                w.writerow(row)

    def runs_to_csv(self, path) -> None:
        names = self.runs[0][2].field_names
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["modules", "seed"] + [f"{m}_{n}" for n in names for m in ("rl2", "mae")])
            for mask, seed, rep in self.runs:
                row = [mask.label, seed]
                for n in names:
                    row += [repr(rep.rl2(n)), repr(rep.mae(n))]
                w.writerow(row)


def ablate(base: MnoConfig, cfg: TrainConfig, dataset: Sequence[PointSample],
           masks: Sequence[ModuleMask | str], test: Sequence[PointSample] | None = None,
           seeds: Sequence[int] | None = None, eval_fields=None, out_dir=None) -> AblationResult:
    """Train and evaluate one model per (mask, seed) on the same data split.

    Without ``test`` the metrics come from the validation split used by
    :func:`train`.
    """
    if not masks:
        raise ValueError("need at least one module mask")
    masks = [ModuleMask.parse(m) if isinstance(m, str) else m for m in masks]
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    dataset = list(dataset)
    if test is None:
        train_set, test = _split(dataset, None, cfg.val_fraction)
        if not test:
            test = train_set
    else:
        train_set = dataset
    eval_fields = eval_fields if eval_fields is not None else cfg.field_groups(base.out_features)
    runs = []
    for mask in masks:
        for seed in seeds:
            model = init_model(base.with_mask(mask), seed=seed, precision=cfg.precision)
            run_cfg = replace(cfg, seed=seed, val_fraction=0.0)
            sub = None if out_dir is None else Path(out_dir) / f"{mask.code}_seed{seed}"
            train(model, train_set, run_cfg, val=[], out_dir=sub)
            report = evaluate(model, test, eval_fields)
            log.info("ablate %s seed %d: %s", mask.label, seed, report.rows)
            runs.append((mask, seed, report))
    return AblationResult(runs)


# -- gradient check --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    per_param: dict[str, float]


def gradient_check(config: MnoConfig, sample: PointSample, h: float = 1e-5, seed: int = 0,
                   loss: str = "rl2", only: Sequence[str] | None = None,
                   floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, in float64.

    Relative error per entry is ``|a - b| / max(|a|, |b|, floor)``.  Only
    parameters reachable under the config's module mask are reported;
    ``only`` further restricts to names starting with one of its prefixes.
    ``loss="linear"`` uses a fixed random linear functional of the output
    instead of RL2.
    """
    if sample.n_points > 16 or config.dim > 8 or config.modes > 4 or config.blocks > 2:
        raise ValueError("gradient_check is meant for micro configs (N<=16, D<=8, M<=4, blocks<=2)")
    model = init_model(config, seed=seed, precision="float64")
    prep = _prepare(model, sample, _resolve_fields(None, config.out_features))
    norm = PointSample(prep.norm.positions.astype(np.float64), prep.norm.features.astype(np.float64),
                       prep.norm.targets.astype(np.float64), sample.name)
    rng = np.random.default_rng(seed + 1)
    weights = rng.normal(size=(sample.n_points, config.out_features))

    def objective() -> Tensor:
        out = forward(model, norm, prep.graph)
        if loss == "linear":
            return (out * weights).sum()
        if loss == "rl2":
            return _loss_terms(out, prep)
        raise ValueError(f"unknown loss {loss!r}")

    grads = backward(objective(), model.params)
    names = model.active_parameter_names()
    if only:
        names = [n for n in names if any(n.startswith(p) for p in only)]
    per_param: dict[str, float] = {}
    worst = (0.0, "", ())
    for name in names:
        p = model.params[name]
        g = grads[name]
        errs = np.zeros(p.shape)
        for idx in np.ndindex(*p.shape):
            old = p.data[idx]
            p.data[idx] = old + h
            with no_grad():
                up = objective().item()
            p.data[idx] = old - h
            with no_grad():
                down = objective().item()
            p.data[idx] = old
            fd = (up - down) / (2 * h)
            if not math.isfinite(fd):
                raise NumericError(f"non-finite finite difference for {name}{idx}")
            a = float(g[idx])
            errs[idx] = abs(a - fd) / max(abs(a), abs(fd), floor)
        per_param[name] = float(errs.max()) if errs.size else 0.0
        if errs.size and errs.max() > worst[0]:
            worst = (float(errs.max()), name, tuple(int(i) for i in np.unravel_index(errs.argmax(), errs.shape)))
    return GradCheckReport(worst[0], worst[1], worst[2], per_param)

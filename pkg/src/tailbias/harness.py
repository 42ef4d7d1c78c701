"""Training, evaluation, and the inference-bias sweep.

Training is plain SGD with momentum over seeded shuffled image batches. Each
batch draws every annotated (foreground) pair of its images plus a subsample
of background pairs at a configurable ratio; the optimized scalar is the mean
relation loss over the drawn pairs, plus a weighted mean object-classification
cross-entropy when the model has an object head. Pair-keyed biases are looked
up by the pair's class labels: annotated labels in ``predcls``, detector
argmax in ``sgcls``.

All randomness derives from ``SeedSequence(config.seed, spawn_key=(domain,))``
so identical configs produce bitwise-identical checkpoints. Checkpoints and
metrics are JSON/CSV only.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .bias import (
    Bias,
    BiasSpec,
    BiasVector,
    compute_bias,
    lookup_pair_bias,
    soft_bias,
)
from .losses import BaselineSpec, LossOutput, baseline_loss, biased_ce, ce
from .metrics import (
    CONSTRAINTS,
    EvalResult,
    evaluate_split,
    rank,
    score_triplets,
)
from .model import (
    DualEncoderConfig,
    DualEncoderParams,
    LinearParams,
    ModelOutput,
    all_ordered_pairs,
    backward,
    forward,
    init_dual_encoder,
    init_linear,
    linear_backward,
    linear_forward,
)
from .numerics import flatten, leaves, write_flat, zeros_like_tree
from .stats import LabelSpace, TripletStats, ingest, marginal_counts
from .synth import SynthImage, images_to_triplets

__all__ = [
    "LOSS_KINDS",
    "OptimizerConfig",
    "LossConfig",
    "ModelSpec",
    "TrainConfig",
    "Checkpoint",
    "RunLog",
    "train",
    "evaluate",
    "sweep",
    "sweep_csv",
    "save_checkpoint",
    "load_checkpoint",
    "training_stats",
]

LOSS_KINDS = ("ce", "rtpb", "reweight", "class_balanced", "focal", "ldam")

INIT_DOMAIN = 10
SHUFFLE_DOMAIN = 11
SAMPLE_DOMAIN = 12


def _rng(seed: int, domain: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(domain,))))


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    iterations: int = 1000
    batch_size: int = 8

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "ce"
    beta: float = 0.999
    gamma: float = 2.0
    alpha: float = 0.25
    margin_c: float = 0.5
    reweight_normalize: bool = True

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "linear"
    d_model: int = 32
    n_h: int = 2
    n_o: int = 2
    n_r: int = 1
    d_ff: int = 64
    d_e: int = 16
    d_pos: int = 16
    object_loss_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "dual_encoder"):
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    label_space: LabelSpace
    task: str = "predcls"
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    bias: BiasSpec | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    data: tuple[tuple[str, str], ...] = ()
    eval_ks: tuple[int, ...] = (20, 50, 100)
    background_ratio: float = 3.0

    def __post_init__(self) -> None:
        if self.task not in ("predcls", "sgcls"):
            raise ValueError(f"unknown task {self.task!r}")
        if not self.eval_ks or list(self.eval_ks) != sorted(set(self.eval_ks)):
            raise ValueError("eval_ks must be nonempty and strictly ascending")
        if self.background_ratio < 0:
            raise ValueError("background_ratio must be nonnegative")
        if self.loss.kind == "rtpb" and self.bias is None:
            raise ValueError("loss kind 'rtpb' needs a bias spec")

    def to_dict(self) -> dict:
        return {
            "label_space": self.label_space.to_dict(),
            "task": self.task,
            "model": vars(self.model).copy(),
            "loss": vars(self.loss).copy(),
            "bias": None if self.bias is None else self.bias.to_dict(),
            "optimizer": vars(self.optimizer).copy(),
            "seed": self.seed,
            "data": [list(item) for item in self.data],
            "eval_ks": list(self.eval_ks),
            "background_ratio": self.background_ratio,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(
            label_space=LabelSpace.from_dict(d["label_space"]),
            task=d.get("task", "predcls"),
            model=ModelSpec(**d.get("model", {})),
            loss=LossConfig(**d.get("loss", {})),
            bias=None if d.get("bias") is None else BiasSpec.from_dict(d["bias"]),
            optimizer=OptimizerConfig(**d.get("optimizer", {})),
            seed=int(d.get("seed", 0)),
            data=tuple((str(k), str(v)) for k, v in d.get("data", [])),
            eval_ks=tuple(int(k) for k in d.get("eval_ks", (20, 50, 100))),
            background_ratio=float(d.get("background_ratio", 3.0)),
        )


@dataclass
class Checkpoint:
    config: TrainConfig
    iterations: int
    params: LinearParams | DualEncoderParams


@dataclass
class RunLog:
    losses: list[float]
    started_at: str
    finished_at: str
    config: dict
    val_metrics: list[dict] = field(default_factory=list)
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "losses": self.losses,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "config": self.config,
            "val_metrics": self.val_metrics,
            "version": self.version,
        }


def training_stats(images: Sequence[SynthImage], label_space: LabelSpace) -> TripletStats:
    """Annotation statistics of a dataset at the object-class level."""
    return ingest(images_to_triplets(images), label_space)


def _lookup_labels(img: SynthImage, task: str) -> list[int]:
    if task == "predcls":
        return [p.label for p in img.proposals]
    return [int(np.argmax(p.scores)) for p in img.proposals]


def _bias_row(bias: Bias, s_class: int, o_class: int) -> np.ndarray:
    if isinstance(bias, BiasVector):
        return bias.values
    return lookup_pair_bias(bias, s_class, o_class).values


def _class_counts(images: Sequence[SynthImage], stats: TripletStats) -> np.ndarray:
    """Per-class counts over the full logit space; index 0 counts background pairs."""
    counts, _ = marginal_counts(stats)
    background = 0
    for img in images:
        n = len(img.proposals)
        background += n * (n - 1) - len(img.gt_triplets)
    counts = counts.copy()
    counts[0] = background
    return counts


def make_loss_fn(
    config: TrainConfig, bias: Bias | None, class_counts: np.ndarray
) -> Callable[[np.ndarray, int, int, int], LossOutput]:
    """Resolve the configured loss into ``f(logits, y, s_class, o_class)``."""
    kind = config.loss.kind
    if kind == "ce":
        return lambda z, y, s_class, o_class: ce(z, y)
    if kind == "rtpb":
        if bias is None:
            raise ValueError("rtpb loss needs a bias")
        return lambda z, y, s_class, o_class: biased_ce(
            z, _bias_row(bias, s_class, o_class), y
        )
    spec = BaselineSpec(
        kind=kind,
        class_counts=class_counts,
        beta=config.loss.beta,
        gamma=config.loss.gamma,
        alpha=config.loss.alpha,
        margin_c=config.loss.margin_c,
        reweight_normalize=config.loss.reweight_normalize,
    )
    return lambda z, y, s_class, o_class: baseline_loss(spec, z, y)


def _training_pairs(
    img: SynthImage, ratio: float, rng: np.random.Generator
) -> tuple[list[tuple[int, int]], list[int]]:
    """Foreground pairs plus a seeded subsample of background pairs."""
    gt = {(s, o): r for s, o, r in img.gt_triplets}
    fg = sorted(gt)
    bg = [p for p in all_ordered_pairs(len(img.proposals)) if p not in gt]
    take = min(len(bg), int(round(ratio * max(len(fg), 1))))
    if take and bg:
        chosen = rng.choice(len(bg), size=take, replace=False)
        bg = [bg[i] for i in sorted(chosen.tolist())]
    else:
        bg = []
    pairs = fg + bg
    targets = [gt.get(p, 0) for p in pairs]
    return pairs, targets


def _forward_image(
    img: SynthImage,
    pairs: list[tuple[int, int]],
    params,
    config: TrainConfig,
    enc_config: DualEncoderConfig | None,
) -> ModelOutput:
    unions = np.stack([img.unions[p] for p in pairs])
    if config.model.kind == "linear":
        return linear_forward(img.proposals, unions, pairs, params)
    return forward(img.proposals, unions, pairs, params, enc_config, config.task)


def _encoder_config(config: TrainConfig, d_v: int) -> DualEncoderConfig:
    m = config.model
    return DualEncoderConfig(
        label_space=config.label_space,
        d_model=m.d_model,
        d_v=d_v,
        d_e=m.d_e,
        d_pos=m.d_pos,
        n_h=m.n_h,
        n_o=m.n_o,
        n_r=m.n_r,
        d_ff=m.d_ff,
    )


def _init_params(config: TrainConfig, d_v: int):
    rng = _rng(config.seed, INIT_DOMAIN)
    if config.model.kind == "linear":
        return init_linear(3 * d_v, config.label_space.num_relations, rng), None
    enc = _encoder_config(config, d_v)
    return init_dual_encoder(enc, rng), enc


def train(
    config: TrainConfig,
    train_images: Sequence[SynthImage],
    loss_fn: Callable[[np.ndarray, int, int, int], LossOutput] | None = None,
    val_images: Sequence[SynthImage] | None = None,
    eval_every: int = 0,
) -> tuple[Checkpoint, RunLog]:
    """SGD training; returns the final checkpoint and the per-iteration log.

    ``loss_fn`` overrides the configured loss (used by equivalence tests);
    signature ``f(logits_row, target, s_class, o_class) -> LossOutput``.
    With ``eval_every > 0`` and a validation split, R@k/mR@k snapshots are
    recorded in the log every that many iterations.
    """
    if not train_images:
        raise ValueError("empty training dataset")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    ls = config.label_space
    stats = training_stats(train_images, ls)
    bias = None
    if config.bias is not None:
        bias = compute_bias(config.bias, stats)
        _check_bias_compatible(bias, ls)
    if loss_fn is None:
        loss_fn = make_loss_fn(config, bias, _class_counts(train_images, stats))

    d_v = train_images[0].proposals[0].feature.shape[0]
    params, enc_config = _init_params(config, d_v)
    velocity = zeros_like_tree(params)

    shuffle_rng = _rng(config.seed, SHUFFLE_DOMAIN)
    sample_rng = _rng(config.seed, SAMPLE_DOMAIN)
    order: list[int] = []
    losses: list[float] = []
    val_metrics: list[dict] = []
    opt = config.optimizer

    for iteration in range(opt.iterations):
        batch: list[SynthImage] = []
        while len(batch) < opt.batch_size:
            if not order:
                order = shuffle_rng.permutation(len(train_images)).tolist()
            batch.append(train_images[order.pop(0)])

        grads = zeros_like_tree(params)
        rel_loss_sum = 0.0
        rel_count = 0
        obj_loss_sum = 0.0
        obj_count = 0
        per_image = []
        for img in batch:
            pairs, targets = _training_pairs(img, config.background_ratio, sample_rng)
            out = _forward_image(img, pairs, params, config, enc_config)
            lookup = _lookup_labels(img, config.task)
            d_rel = np.zeros_like(out.relation_logits)
            for q, (s, o) in enumerate(pairs):
                res = loss_fn(
                    out.relation_logits[q], targets[q], lookup[s], lookup[o]
                )
                rel_loss_sum += res.value
                d_rel[q] = res.grad_logits
                rel_count += 1
            per_image.append((img, out, d_rel))

        w_obj = config.model.object_loss_weight
        use_obj = config.model.kind == "dual_encoder" and w_obj > 0
        if use_obj:
            obj_count = sum(len(img.proposals) for img in batch)
        for img, out, d_rel in per_image:
            d_rel = d_rel / rel_count
            if config.model.kind == "linear":
                linear_backward(d_rel, out, grads)
                continue
            d_obj = None
            if use_obj:
                d_obj = np.zeros_like(out.object_logits)
                for i, p in enumerate(img.proposals):
                    res = ce(out.object_logits[i], p.label)
                    obj_loss_sum += res.value
                    d_obj[i] = res.grad_logits * (w_obj / obj_count)
            backward(d_obj, d_rel, out, params, enc_config, grads)

        loss_value = rel_loss_sum / rel_count
        if use_obj and obj_count:
            loss_value += w_obj * obj_loss_sum / obj_count
        losses.append(float(loss_value))

        for p_leaf, v_leaf, g_leaf in zip(
            leaves(params), leaves(velocity), leaves(grads), strict=True
        ):
            v_leaf *= opt.momentum
            v_leaf += g_leaf
            p_leaf -= opt.learning_rate * v_leaf

        if eval_every and val_images and (iteration + 1) % eval_every == 0:
            snapshot = Checkpoint(config=config, iterations=iteration + 1, params=params)
            results = evaluate(snapshot, val_images)
            val_metrics.append(
                {
                    "iteration": iteration + 1,
                    "with": _result_summary(results["with"]),
                    "without": _result_summary(results["without"]),
                }
            )

    finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    checkpoint = Checkpoint(config=config, iterations=opt.iterations, params=params)
    runlog = RunLog(
        losses=losses,
        started_at=started,
        finished_at=finished,
        config=config.to_dict(),
        val_metrics=val_metrics,
    )
    return checkpoint, runlog


def _result_summary(result: EvalResult) -> dict:
    return {
        "R": {str(k): v for k, v in result.recall_at.items()},
        "mR": {str(k): v for k, v in result.mean_recall_at.items()},
    }


def _check_bias_compatible(bias: Bias, ls: LabelSpace) -> None:
    vec = bias if isinstance(bias, BiasVector) else bias.fallback
    if vec.values.shape[0] != ls.num_relations + 1:
        raise ValueError(
            f"bias length {vec.values.shape[0]} incompatible with "
            f"{ls.num_relations} relations"
        )


def evaluate(
    checkpoint: Checkpoint,
    images: Sequence[SynthImage],
    inference_bias: Bias | None = None,
    ks: Sequence[int] | None = None,
) -> dict[str, EvalResult]:
    """Forward every image, rank candidates, and aggregate R@k and mR@k.

    ``inference_bias`` is subtracted from the relation logits before scoring
    (pair tables looked up by the task's class-label rule); by default the
    logits are used as produced, since the training bias is training-only.
    Returns one result per ranking constraint.
    """
    if not images:
        raise ValueError("empty evaluation split")
    config = checkpoint.config
    if inference_bias is not None:
        _check_bias_compatible(inference_bias, config.label_space)
    ks = list(config.eval_ks if ks is None else ks)
    d_v = images[0].proposals[0].feature.shape[0]
    enc_config = (
        _encoder_config(config, d_v) if config.model.kind == "dual_encoder" else None
    )
    per_image: dict[str, list] = {c: [] for c in CONSTRAINTS}
    for img in images:
        pairs = all_ordered_pairs(len(img.proposals))
        out = _forward_image(img, pairs, checkpoint.params, config, enc_config)
        logits = out.relation_logits
        if inference_bias is not None:
            lookup = _lookup_labels(img, config.task)
            rows = np.stack(
                [_bias_row(inference_bias, lookup[s], lookup[o]) for s, o in pairs]
            )
            logits = logits - rows
        candidates = score_triplets(out.object_probs, logits, pairs, config.task)
        for constraint in CONSTRAINTS:
            per_image[constraint].append(
                (img.gt_triplets, rank(candidates, constraint))
            )
    return {
        constraint: evaluate_split(
            per_image[constraint], ks, config.label_space.num_relations, constraint
        )
        for constraint in CONSTRAINTS
    }


def sweep(
    checkpoint: Checkpoint,
    stats: TripletStats,
    spec: BiasSpec,
    grid: Sequence[float],
    images: Sequence[SynthImage],
    ks: Sequence[int] | None = None,
) -> list[tuple[float, dict[str, EvalResult]]]:
    """Evaluate with the weakened inference bias at each exponent in ``grid``."""
    rows = []
    for a_e in grid:
        if a_e > spec.a:
            raise ValueError(f"a_eval {a_e} exceeds a {spec.a}")
        soft = soft_bias(replace(spec, a_eval=float(a_e)), stats)
        rows.append((float(a_e), evaluate(checkpoint, images, inference_bias=soft, ks=ks)))
    return rows


def sweep_csv(rows: list[tuple[float, dict[str, EvalResult]]], ks: Sequence[int]) -> str:
    lines = ["a_e,constraint,k,R,mR"]
    for a_e, results in rows:
        for constraint in CONSTRAINTS:
            res = results[constraint]
            for k in ks:
                lines.append(
                    f"{a_e},{constraint},{k},{res.recall_at[k]:.6f},{res.mean_recall_at[k]:.6f}"
                )
    return "\n".join(lines) + "\n"


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    arrays = leaves(checkpoint.params)
    doc = {
        "config": checkpoint.config.to_dict(),
        "iterations": checkpoint.iterations,
        "param_shapes": [list(a.shape) for a in arrays],
        "param_data": flatten(checkpoint.params).tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    config = TrainConfig.from_dict(doc["config"])
    shapes = [tuple(s) for s in doc["param_shapes"]]
    if config.model.kind == "linear":
        params = LinearParams(w=np.zeros(shapes[0]), b=np.zeros(shapes[1]))
    else:
        d_in = shapes[2][0]  # w_in rows = d_pos + d_v + d_e
        d_v = d_in - config.model.d_pos - config.model.d_e
        params = init_dual_encoder(
            _encoder_config(config, d_v), np.random.Generator(np.random.PCG64(0))
        )
    write_flat(params, np.asarray(doc["param_data"], dtype=np.float64))
    return Checkpoint(config=config, iterations=int(doc["iterations"]), params=params)

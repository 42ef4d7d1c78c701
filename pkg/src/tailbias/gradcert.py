"""Finite-difference certification of every analytic gradient.

Each battery draws seeded random instances, compares the analytic gradient
against central differences through :func:`tailbias.numerics.grad_check`, and
reports the worst relative error observed. The full-model battery checks
every parameter coordinate on a few instances and a random coordinate sample
on many, which keeps the runtime low without leaving any parameter kind
unchecked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import BaselineSpec, baseline_loss, biased_ce, ce
from .model import (
    DualEncoderConfig,
    ObjectProposal,
    all_ordered_pairs,
    backward,
    forward,
    init_dual_encoder,
)
from .numerics import (
    attention,
    attention_backward,
    encoder_layer,
    encoder_layer_backward,
    flatten,
    grad_check,
    init_encoder_layer_params,
    matmul_backward,
    multi_head_attention,
    multi_head_attention_backward,
    write_flat,
)
from .stats import LabelSpace

__all__ = ["CheckResult", "certify_losses", "certify_numerics", "certify_model", "run_certification"]


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max_rel_error={self.max_rel_error:.3e} "
            f"tol={self.tolerance:.0e} instances={self.instances}"
        )


def _random_instance(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    dim = int(rng.integers(2, 65))
    z = rng.uniform(-5.0, 5.0, dim)
    b = rng.uniform(-5.0, 5.0, dim)
    y = int(rng.integers(0, dim))
    return z, b, y


def certify_losses(
    seed: int = 0, instances: int = 100, h: float = 1e-5, tol: float = 1e-4
) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {kind: 0.0 for kind in ("ce", "rtpb", "reweight", "class_balanced", "focal", "ldam")}
    for _ in range(instances):
        z, b, y = _random_instance(rng)
        counts = rng.integers(1, 200, z.shape[0])
        cases = {
            "ce": lambda v: ce(v, y),
            "rtpb": lambda v: biased_ce(v, b, y),
            "reweight": lambda v: baseline_loss(
                BaselineSpec(kind="reweight", class_counts=counts), v, y
            ),
            "class_balanced": lambda v: baseline_loss(
                BaselineSpec(kind="class_balanced", class_counts=counts), v, y
            ),
            "focal": lambda v: baseline_loss(
                BaselineSpec(kind="focal", class_counts=counts), v, y
            ),
            "ldam": lambda v: baseline_loss(
                BaselineSpec(kind="ldam", class_counts=counts), v, y
            ),
        }
        for kind, fn in cases.items():
            report = grad_check(
                lambda v: fn(v).value, z, fn(z).grad_logits, h=h, tol=tol
            )
            worst[kind] = max(worst[kind], report.max_rel_error)
    return [CheckResult(f"loss/{k}", instances, v, tol) for k, v in worst.items()]


def certify_numerics(
    seed: int = 0, instances: int = 100, h: float = 1e-5, tol: float = 1e-4
) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {"matmul": 0.0, "attention": 0.0, "multi_head_attention": 0.0, "encoder_layer": 0.0}

    for _ in range(instances):
        a = rng.normal(0.0, 1.0, (3, 4))
        bm = rng.normal(0.0, 1.0, (4, 2))
        g = rng.normal(0.0, 1.0, (3, 2))
        da, db = matmul_backward(g, a, bm)
        r = grad_check(lambda v: float(np.sum(g * (v.reshape(3, 4) @ bm))), a.ravel(), da.ravel(), h=h, tol=tol)
        worst["matmul"] = max(worst["matmul"], r.max_rel_error)
        r = grad_check(lambda v: float(np.sum(g * (a @ v.reshape(4, 2)))), bm.ravel(), db.ravel(), h=h, tol=tol)
        worst["matmul"] = max(worst["matmul"], r.max_rel_error)

        q = rng.normal(0.0, 1.0, (3, 4))
        k = rng.normal(0.0, 1.0, (5, 4))
        v = rng.normal(0.0, 1.0, (5, 4))
        go = rng.normal(0.0, 1.0, (3, 4))
        out, cache = attention(q, k, v)
        dq, dk, dv = attention_backward(go, cache)
        for arr, grad, rebuild in (
            (q, dq, lambda w: attention(w.reshape(q.shape), k, v)[0]),
            (k, dk, lambda w: attention(q, w.reshape(k.shape), v)[0]),
            (v, dv, lambda w: attention(q, k, w.reshape(v.shape))[0]),
        ):
            r = grad_check(
                lambda w: float(np.sum(go * rebuild(w))), arr.ravel(), grad.ravel(), h=h, tol=tol
            )
            worst["attention"] = max(worst["attention"], r.max_rel_error)

    mha_instances = max(1, instances // 5)
    for _ in range(mha_instances):
        d = 8
        x = rng.normal(0.0, 1.0, (4, d))
        attn = init_attention(rng, d)
        go = rng.normal(0.0, 1.0, x.shape)
        out, cache = multi_head_attention(x, attn, 2)
        dx, grads = multi_head_attention_backward(go, cache)

        def f_x(v):
            return float(np.sum(go * multi_head_attention(v.reshape(x.shape), attn, 2)[0]))

        r = grad_check(f_x, x.ravel(), dx.ravel(), h=h, tol=tol)
        worst["multi_head_attention"] = max(worst["multi_head_attention"], r.max_rel_error)

        vec = flatten(attn)

        def f_params(v):
            write_flat(attn, v)
            try:
                return float(np.sum(go * multi_head_attention(x, attn, 2)[0]))
            finally:
                write_flat(attn, vec)

        r = grad_check(f_params, vec, flatten(grads), h=h, tol=tol)
        worst["multi_head_attention"] = max(worst["multi_head_attention"], r.max_rel_error)

        layer = init_encoder_layer_params(d, 16, rng)
        out, cache = encoder_layer(x, layer, 2)
        dx, lgrads = encoder_layer_backward(go, cache)

        def g_x(v):
            return float(np.sum(go * encoder_layer(v.reshape(x.shape), layer, 2)[0]))

        r = grad_check(g_x, x.ravel(), dx.ravel(), h=h, tol=tol)
        worst["encoder_layer"] = max(worst["encoder_layer"], r.max_rel_error)

        lvec = flatten(layer)

        def g_params(v):
            write_flat(layer, v)
            try:
                return float(np.sum(go * encoder_layer(x, layer, 2)[0]))
            finally:
                write_flat(layer, lvec)

        r = grad_check(g_params, lvec, flatten(lgrads), h=h, tol=tol)
        worst["encoder_layer"] = max(worst["encoder_layer"], r.max_rel_error)

    counts = {
        "matmul": 2 * instances,
        "attention": 3 * instances,
        "multi_head_attention": 2 * mha_instances,
        "encoder_layer": 2 * mha_instances,
    }
    return [CheckResult(f"numerics/{k}", counts[k], v, tol) for k, v in worst.items()]


def init_attention(rng: np.random.Generator, d: int):
    from .numerics import init_attention_params

    return init_attention_params(d, rng)


def _toy_setup(rng: np.random.Generator):
    ls = LabelSpace(num_object_classes=3, num_relations=3)
    config = DualEncoderConfig(
        label_space=ls, d_model=16, d_v=4, d_e=4, d_pos=4, n_h=2, n_o=2, n_r=1, d_ff=16
    )
    params = init_dual_encoder(config, rng)
    n = 3
    proposals = []
    for _ in range(n):
        x1, y1 = rng.uniform(0.0, 0.5, 2)
        scores = rng.uniform(0.1, 1.0, ls.num_object_classes)
        scores /= scores.sum()
        proposals.append(
            ObjectProposal(
                box=(float(x1), float(y1), float(x1 + rng.uniform(0.1, 0.4)), float(y1 + rng.uniform(0.1, 0.4))),
                feature=rng.normal(0.0, 1.0, config.d_v),
                label=int(rng.integers(0, ls.num_object_classes)),
                scores=scores,
            )
        )
    pairs = all_ordered_pairs(n)
    unions = rng.normal(0.0, 1.0, (len(pairs), config.d_v))
    targets = rng.integers(0, ls.num_relations + 1, len(pairs))
    bias_row = rng.uniform(-1.0, 1.0, ls.num_relations + 1)
    return config, params, proposals, pairs, unions, targets, bias_row


def _model_loss_and_grads(config, params, proposals, pairs, unions, targets, bias_row):
    out = forward(proposals, unions, pairs, params, config, "predcls")
    m = len(pairs)
    n = len(proposals)
    total = 0.0
    d_rel = np.zeros_like(out.relation_logits)
    for q in range(m):
        res = biased_ce(out.relation_logits[q], bias_row, int(targets[q]))
        total += res.value / m
        d_rel[q] = res.grad_logits / m
    d_obj = np.zeros_like(out.object_logits)
    for i, p in enumerate(proposals):
        res = ce(out.object_logits[i], p.label)
        total += res.value / n
        d_obj[i] = res.grad_logits / n
    grads = backward(d_obj, d_rel, out, params, config)
    return total, grads


def certify_model(
    seed: int = 0,
    full_instances: int = 2,
    sampled_instances: int = 100,
    coords_per_instance: int = 40,
    h: float = 1e-5,
    tol: float = 1e-3,
) -> list[CheckResult]:
    """Whole-model gradient check at toy scale.

    ``full_instances`` passes sweep every coordinate; the remaining instances
    probe a seeded random subset of coordinates each. The step stays at 1e-5:
    larger steps straddle relu kinks often enough to corrupt the central
    difference itself on a few coordinates per hundred instances.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    total = full_instances + sampled_instances
    for inst in range(total):
        config, params, proposals, pairs, unions, targets, bias_row = _toy_setup(rng)
        _, grads = _model_loss_and_grads(
            config, params, proposals, pairs, unions, targets, bias_row
        )
        vec = flatten(params)

        def f(v):
            write_flat(params, v)
            try:
                value, _ = _model_loss_and_grads(
                    config, params, proposals, pairs, unions, targets, bias_row
                )
                return value
            finally:
                write_flat(params, vec)

        coords = None
        if inst >= full_instances:
            coords = rng.choice(vec.size, size=min(coords_per_instance, vec.size), replace=False)
        report = grad_check(f, vec, flatten(grads), h=h, tol=tol, coords=coords)
        worst = max(worst, report.max_rel_error)
    return [CheckResult("model/dual_encoder", total, worst, tol)]


def run_certification(seed: int = 0, instances: int = 100) -> list[CheckResult]:
    """Full battery: losses, kernels, and the toy model."""
    results = certify_losses(seed, instances=instances)
    results += certify_numerics(seed + 1, instances=instances)
    results += certify_model(seed + 2, sampled_instances=instances)
    return results

"""Named gradient checks: every differentiable primitive plus the full
multi-layer fusion stack on a small synthetic configuration.

Each check compares analytic gradients against central finite differences in
double precision. Inputs are seeded and chosen away from non-smooth points
(relu kinks, clip boundaries, bilinear lattice lines); known-pinned
coordinates are excluded explicitly and show up in the reports.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import FfnParams, GradCheckReport, Value, grad_check
from .fusion import FusionParams, fusion_layer
from .geometry import make_camera_ring, project_to_cameras
from .pillars import BevMap
from .scenesim import FeaturePyramid

DEFAULT_TOL = 1e-4


def diffcore_op_checks(seed: int = 0, tol: float = DEFAULT_TOL) -> list:
    """[(name, GradCheckReport)] for every primitive op."""
    rng = np.random.default_rng(seed)
    checks = []

    fmap = Value(rng.normal(size=(3, 5, 7)), requires_grad=True)
    pts = Value(rng.uniform(-0.85, 0.85, (6, 2)) + 0.007, requires_grad=True)
    probe_b = rng.normal(size=(6, 3))
    checks.append(
        (
            "bilinear_sample",
            grad_check(
                lambda fmap, pts: (ad.bilinear_sample(fmap, pts) * probe_b).sum(),
                {"fmap": fmap, "pts": pts},
                tol=tol,
            ),
        )
    )

    logits = Value(rng.normal(size=(4, 6)), requires_grad=True)
    mask = rng.random((4, 6)) > 0.3
    probe_s = rng.normal(size=(4, 6))
    checks.append(
        (
            "masked_softmax",
            grad_check(
                lambda logits: (ad.masked_softmax(logits, mask) * probe_s).sum(),
                {"logits": logits},
                tol=tol,
            ),
        )
    )

    x = Value(rng.normal(size=(3, 8)), requires_grad=True)
    gain = Value(rng.normal(size=8), requires_grad=True)
    bias = Value(rng.normal(size=8), requires_grad=True)
    probe_n = rng.normal(size=(3, 8))
    checks.append(
        (
            "layer_normalize",
            grad_check(
                lambda x, gain, bias: (ad.layer_normalize(x, gain, bias) * probe_n).sum(),
                {"x": x, "gain": gain, "bias": bias},
                tol=tol,
            ),
        )
    )

    p = Value(np.array([0.0, 0.2, 0.5, 0.8, 1.0]), requires_grad=True)
    clamped = (p.data < ad.EPS) | (p.data > 1.0 - ad.EPS)
    probe_i = rng.normal(size=5)
    checks.append(
        (
            "inverse_sigmoid",
            grad_check(
                lambda p: (ad.inverse_sigmoid(p) * probe_i).sum(),
                {"p": p},
                exclude={"p": clamped},
                tol=tol,
            ),
        )
    )

    ffn = FfnParams.create((5, 9, 4), rng, norm=True)
    fx = Value(rng.normal(size=(4, 5)), requires_grad=True)
    probe_f = rng.normal(size=(4, 4))
    ffn_inputs = {"fx": fx}
    ffn_inputs.update(ffn.parameters("ffn"))
    checks.append(
        (
            "ffn_apply",
            grad_check(
                lambda **kw: (ad.ffn_apply(kw["fx"], ffn) * probe_f).sum(),
                ffn_inputs,
                tol=tol,
            ),
        )
    )

    a = Value(rng.normal(size=(3, 4)) + 3.0, requires_grad=True)
    b = Value(rng.normal(size=(4,)) + 4.0, requires_grad=True)
    checks.append(
        (
            "elementwise_and_reductions",
            grad_check(
                lambda a, b: (
                    ad.tanh(a / b) + ad.exp(0.1 * b) + ad.log(a) + ad.sigmoid(a - b)
                ).sum()
                + (ad.cumsum(a, 1) * a).mean()
                + ad.vmax(a, axis=0).sum(),
                {"a": a, "b": b},
                tol=tol,
            ),
        )
    )

    c = Value(rng.normal(size=(2, 3)), requires_grad=True)
    d = Value(rng.normal(size=(2, 3)), requires_grad=True)
    probe_rows = rng.normal(size=(5, 3))
    checks.append(
        (
            "structural_ops",
            grad_check(
                lambda c, d: (ad.concat([c, d], 0) * ad.concat([d, c], 0)).sum()
                + (ad.stack([c, d], 1) * 0.5).sum()
                + (ad.scatter_rows(c, np.array([1, 3]), 5) * probe_rows).sum()
                + (ad.scatter_grid(d, np.array([0, 1]), np.array([1, 0]), (2, 2)) * 2.0).sum()
                + ad.take(c, (np.array([0, 1]), np.array([2, 0]))).sum(),
                {"c": c, "d": d},
                tol=tol,
            ),
        )
    )

    r = Value(rng.normal(size=(3, 3)) * 2.0, requires_grad=True)
    kink = np.abs(r.data) < 1e-3
    edge = np.abs(np.abs(r.data) - 1.0) < 1e-3
    checks.append(
        (
            "relu_and_clip",
            grad_check(
                lambda r: ad.relu(r).sum() + (ad.clip(r, -1.0, 1.0) * 0.3).sum(),
                {"r": r},
                exclude={"r": kink | edge},
                tol=tol,
            ),
        )
    )
    return checks


def fusion_stack_check(
    seed: int = 0,
    n_queries: int = 3,
    n_cameras: int = 2,
    n_levels: int = 2,
    embed_dim: int = 8,
    n_points: int = 4,
    depth: int = 3,
    tol: float = DEFAULT_TOL,
) -> GradCheckReport:
    """Finite-difference check of a full multi-layer fusion stack.

    Gradients are verified for every layer parameter, the query embeddings,
    the reference points, and the BEV features, through a scalar probe on the
    stack output.
    """
    rng = np.random.default_rng(seed)
    rig = make_camera_ring(n_cameras, width=64, height=48, focal=40.0)
    features = [
        [rng.normal(size=(embed_dim, 6 >> lv, 9 >> lv)) for lv in range(n_levels)]
        for _ in range(n_cameras)
    ]
    pyramid = FeaturePyramid(rig, features)
    bev_features = Value(rng.normal(size=(embed_dim, 5, 5)), requires_grad=True)

    layers = []
    for _ in range(depth):
        layer = FusionParams.create(
            rng, embed_dim, n_cameras, n_levels, n_points=n_points, zero_gate=False
        )
        for w in layer.offset_head.weights:  # exercise the tanh path
            w.data[:] = 0.2 * rng.normal(size=w.data.shape)
        for w in layer.gate_head.weights:
            w.data[:] = 0.3 * rng.normal(size=w.data.shape)
        layers.append(layer)

    refs_data = []
    while len(refs_data) < n_queries:
        r = rng.uniform(0.3, 0.7, 3)
        _, _, mask = project_to_cameras(r[None], rig)
        if mask.any():
            refs_data.append(r)
    queries = Value(rng.normal(size=(n_queries, embed_dim)), requires_grad=True)
    refs = Value(np.array(refs_data), requires_grad=True)
    probe = rng.normal(size=(n_queries, embed_dim))

    inputs = {"queries": queries, "refs": refs, "bev": bev_features}
    for i, layer in enumerate(layers):
        inputs.update(layer.parameters(f"layer{i}"))

    # capture each layer's detached gate input at the base point: the analytic
    # gradient never flows through it, so the finite-difference probe must hold
    # it fixed too
    snapshots = []
    q = queries
    for layer in layers:
        snapshots.append(q.data.copy())
        q, _ = fusion_layer(q, refs, pyramid, BevMap(bev_features), layer, training=False)

    def fn(**kw):
        q = kw["queries"]
        bev = BevMap(kw["bev"])
        for layer, snap in zip(layers, snapshots):
            q, _ = fusion_layer(
                q, kw["refs"], pyramid, bev, layer, training=False,
                gate_query_snapshot=snap,
            )
        return (q * probe).sum()

    return grad_check(fn, inputs, tol=tol)


def run_all(seed: int = 0, tol: float = DEFAULT_TOL):
    """All named checks: [(name, report)]; the stack check comes last."""
    checks = diffcore_op_checks(seed, tol)
    checks.append(("fusion_stack_3layer", fusion_stack_check(seed, tol=tol)))
    return checks

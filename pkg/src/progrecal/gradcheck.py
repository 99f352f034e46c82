"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def clear_graph_grads(loss: Tensor) -> None:
    for leaf in loss.leaves():
        leaf.grad = None


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-6,
    indices=None,
) -> float:
    """Max relative error between the analytic and the numerical gradient of ``f`` at ``x``.

    ``x`` may be an array (wrapped in a fresh leaf) or an existing tensor such
    as a model parameter, which is perturbed in place and restored. The error
    per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``indices`` restricts the check to a subset of flat coordinates.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64))
    x.data = np.ascontiguousarray(x.data)
    was_tracking = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    clear_graph_grads(loss)
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    clear_graph_grads(loss)

    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else np.asarray(indices).reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    x.requires_grad = was_tracking
    return float(worst)


def _suite_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], object]]:
    # local imports keep the checker importable from the tensor layer
    from . import tensor as T
    from .losses import (
        bhattacharyya_posterior_loss,
        compose_chest,
        compose_knee,
        coral_loss,
        cross_entropy,
        kl_posterior_loss,
        mmd_loss,
        ordinal_loss,
        pretrain_objective,
    )
    from .recal import RecalModel, alignment_loss, prediction_loss
    from .snapshot import SnapshotConfig, SnapshotEncoder, contrastive_loss, reconstruction_loss
    from .temporal import AttentionBlock, TemporalClassifier, TemporalConfig, optimal_representation

    def r(*shape):
        return rng.normal(size=shape)

    def away(*shape):
        # magnitudes in [0.5, 1.5] keep kinks (abs, relu) out of the difference stencil
        return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)

    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w_const = T.Tensor(r(4, 3))
    gamma, beta = T.Tensor(r(5)), T.Tensor(r(5))
    filt = T.Tensor(r(2, 3, 3))
    w2d = T.Tensor(r(2, 2, 3, 3))
    labels = np.array([0, 1, 1, 0, 1])
    grades = np.array([0, 2, 4, 1, 3])
    Y = T.Tensor(r(6, 4))
    Q = T.softmax(T.Tensor(r(6, 3)), axis=1).detach()

    block = AttentionBlock(8, 4, 2, np.random.default_rng(1))
    snap = SnapshotEncoder(SnapshotConfig(image_shape=(8, 8), patch=4, width=8, depth=1, heads=2, mlp_ratio=2, embed_dim=6), seed=1)
    clean = rng.uniform(size=(2, 8, 8))
    corrupted = np.clip(clean + 0.1 * rng.normal(size=clean.shape), 0, 1)
    views = rng.uniform(size=(4, 8, 8))

    def l_pre(_):
        rec = reconstruction_loss(clean, snap.reconstruct(corrupted))
        return pretrain_objective(rec, contrastive_loss(snap.embed(views), 0.5))

    chest = RecalModel(6, 5, 2, seed=2)
    knee = RecalModel(6, 5, 4, seed=3)
    xs, bank = r(5, 6), r(7, 6)

    def l_chest(_):
        return compose_chest(prediction_loss(chest, xs, labels, "chest"), alignment_loss(chest, xs, bank, "mmd", "chest"), 0.5)

    def l_knee(_):
        return compose_knee(prediction_loss(knee, xs, grades, "knee"), alignment_loss(knee, xs, bank, "mmd", "knee"), 0.5)

    tcfg = TemporalConfig(feature_dim=8, frame_channels=(2, 2, 2), heads=2, qk_dim=4, tile_shape=(8, 8))
    tcn = TemporalClassifier(tcfg, seed=4)
    frames = rng.uniform(size=(2, 5, 8, 8))

    def l_tcn(_):
        logits, _ = tcn(frames)
        return cross_entropy(logits, [0, 1])

    c2 = T.Tensor(r(2))
    c23 = T.Tensor(r(2, 3))
    c34 = T.Tensor(r(3, 4))
    c42 = T.Tensor(r(4, 2))
    c44 = T.Tensor(r(4, 4))
    c45 = T.Tensor(r(4, 5))

    return {
        "add": (lambda x: T.tsum(T.add(x, x * 2.0) ** 2), r(3, 4)),
        "sub": (lambda x: T.tsum(T.sub(x, x * x) ** 2), r(3, 4)),
        "mul": (lambda x: T.tsum(T.mul(x, T.exp(x))), r(3, 4)),
        "div": (lambda x: T.tsum(T.div(x, x * x + 1.0)), r(3, 4)),
        "neg": (lambda x: T.tsum(T.neg(x) * x * x), r(3, 4)),
        "power": (lambda x: T.tsum(T.power(x, 3.0)), pos),
        "exp": (lambda x: T.tsum(T.exp(x)), r(3, 4)),
        "log": (lambda x: T.tsum(T.log(x)), pos),
        "sqrt": (lambda x: T.tsum(T.sqrt(x)), pos),
        "abs": (lambda x: T.tsum(T.tabs(x) * x), away(3, 4)),
        "relu": (lambda x: T.tsum(T.relu(x) * x), away(3, 4)),
        "sigmoid": (lambda x: T.tsum(T.sigmoid(x) * x), r(3, 4)),
        "softplus": (lambda x: T.tsum(T.softplus(x) * x), r(3, 4)),
        "tanh": (lambda x: T.tsum(T.tanh(x) * x), r(3, 4)),
        "sum": (lambda x: T.tsum(T.tsum(x, axis=0) ** 2), r(3, 4)),
        "mean": (lambda x: T.tsum(T.mean(x, axis=1, keepdims=True) ** 2), r(3, 4)),
        "l1_norm": (lambda x: T.l1_norm(x * x + 0.1), r(3, 4)),
        "reshape": (lambda x: T.tsum(T.reshape(x, (2, 6)) * T.Tensor(np.arange(12.0).reshape(2, 6))), r(3, 4)),
        "transpose": (lambda x: T.tsum(T.matmul(T.transpose(x), w_const.T)), r(3, 4)),
        "getitem": (lambda x: T.tsum(x[np.array([0, 2, 2]), 1:] ** 2), r(3, 4)),
        "concat": (lambda x: T.tsum(T.concat([x, x * x], axis=1) ** 2), r(3, 4)),
        "stack": (lambda x: T.tsum(T.stack([x, T.exp(x)], axis=0) ** 2), r(3, 4)),
        "broadcast_to": (lambda x: T.tsum(T.broadcast_to(x, (3, 4)) * c34), r(1, 4)),
        "matmul": (lambda x: T.tsum(T.matmul(x, w_const) ** 2), r(3, 4)),
        "linear": (lambda x: T.tsum(T.linear(x, c42, c2) ** 2), r(3, 4)),
        "softmax": (lambda x: T.tsum(T.softmax(x, axis=1) * c34), r(3, 4)),
        "log_softmax": (lambda x: T.tsum(T.log_softmax(x, axis=1) * c34), r(3, 4)),
        "l2_normalize": (lambda x: T.tsum(T.l2_normalize(x, axis=1) * c34), r(3, 4)),
        "layer_norm": (lambda x: T.tsum(T.layer_norm(x, gamma, beta) * c45), r(4, 5)),
        "conv1d_causal": (lambda x: T.tsum(T.conv1d_causal(x, filt, dilation=2) ** 2), r(3, 7)),
        "conv1x1": (lambda x: T.tsum(T.conv1x1(c23, x) ** 2), r(2, 3, 5)),
        "conv2d": (lambda x: T.tsum(T.conv2d(x, w2d, padding=1) ** 2), r(1, 2, 5, 5)),
        "avg_pool2d": (lambda x: T.tsum(T.avg_pool2d(x, 2) ** 2), r(1, 2, 4, 4)),
        "attention_block": (lambda x: T.tsum(block(x)[0] ** 2), r(1, 8, 5)),
        "optimal_representation": (
            lambda x: T.tsum(optimal_representation(x, T.softmax(c44, axis=0))[0] ** 2),
            r(3, 4),
        ),
        "mmd_loss": (lambda x: mmd_loss(x, Y), r(5, 4)),
        "coral_loss": (lambda x: coral_loss(x, Y), r(5, 4)),
        "kl_loss": (lambda x: kl_posterior_loss(T.softmax(x, axis=1), Q), r(4, 3)),
        "bhattacharyya_loss": (lambda x: bhattacharyya_posterior_loss(T.softmax(x, axis=1), Q), r(4, 3)),
        "cross_entropy": (lambda x: cross_entropy(x, labels), r(5, 2)),
        "ordinal_loss": (lambda x: ordinal_loss(x, grades), r(5, 4)),
        "reconstruction_loss": (lambda x: reconstruction_loss(clean, x), away(2, 8, 8) * 0.1 + clean + 0.3),
        "contrastive_loss": (lambda x: contrastive_loss(x, 0.5), r(4, 6)),
        "L_pre": (l_pre, snap.patch_embed.weight),
        "L_chest": (l_chest, chest.fc1.weight),
        "L_knee": (l_knee, knee.fc1.weight),
        "temporal_ce_frame_encoder": (l_tcn, tcn.encoder.frames.convs[0]),
    }


def standard_suite(seed: int = 0, max_coords: int = 40) -> dict[str, float]:
    """Max relative gradient error of every differentiable op and composed loss.

    Large parameter tensors are checked on ``max_coords`` random coordinates.
    """
    rng = np.random.default_rng(seed)
    results = {}
    for name, (f, x) in _suite_cases(rng).items():
        size = x.size if isinstance(x, Tensor) else np.asarray(x).size
        idx = None if size <= max_coords else rng.choice(size, max_coords, replace=False)
        results[name] = grad_check(f, x, indices=idx)
    return results

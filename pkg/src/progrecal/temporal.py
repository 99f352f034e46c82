"""Temporal progression encoder.

Frames go through a small CNN (one feature vector per frame), then a stack of
dilated causal convolutions. After each convolution a multi-head self-attention
block mixes timepoints::

    A = softmax_over_keys(f^T g)      # T x T, every column sums to 1
    o = p + W_o [A^T h]               # residual over the block input p

The map of the last block is row-summed, softmaxed into per-timepoint weights
``alpha``, and the weighted sum of output columns is the sequence's optimal
representation. Pretraining uses a linear classifier on that vector with
categorical cross-entropy.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError, TrainingSetupError
from .losses import cross_entropy
from .nn import SGD, Linear, Module, glorot, parameter
from .synthdata import TemporalSequence
from .tensor import Tensor

log = logging.getLogger(__name__)

ATTENTION_MODES = ("hierarchical", "global_only", "none")


@dataclass
class TemporalConfig:
    feature_dim: int = 512
    frame_channels: tuple[int, int, int] = (4, 8, 16)
    layers: int = 3
    dilations: tuple[int, ...] = (1, 2, 4)
    kernel: int = 3
    heads: int = 4
    qk_dim: int = 64
    attention: str = "hierarchical"
    n_classes: int = 2
    tile_shape: tuple[int, int] = (24, 16)

    def validate(self) -> None:
        if len(self.dilations) != self.layers:
            raise ParameterError(f"{self.layers} layers but {len(self.dilations)} dilations")
        if any(d < 1 for d in self.dilations) or any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ParameterError(f"dilations must be positive and increasing, got {self.dilations}")
        if self.kernel < 1:
            raise ParameterError(f"kernel must be positive, got {self.kernel}")
        if self.attention not in ATTENTION_MODES:
            raise ParameterError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.feature_dim % self.heads or self.qk_dim % self.heads:
            raise ParameterError("feature_dim and qk_dim must be divisible by heads")
        h, w = self.tile_shape
        if h % 8 or w % 8:
            raise ParameterError(f"tile shape {self.tile_shape} must be divisible by 8 (three 2x pools)")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("frame_channels", "dilations", "tile_shape"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TemporalConfig":
        d = dict(d)
        for k in ("frame_channels", "dilations", "tile_shape"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)


class FrameEncoder(Module):
    """Three conv(3x3)+ReLU+avgpool(2) stages and a linear projection."""

    def __init__(self, config: TemporalConfig, rng: np.random.Generator):
        chans = (1,) + tuple(config.frame_channels)
        self.convs = [
            glorot(rng, (chans[i + 1], chans[i], 3, 3), 9 * chans[i], 9 * chans[i + 1]) for i in range(3)
        ]
        self.conv_bias = [parameter(np.zeros(c)) for c in chans[1:]]
        h, w = config.tile_shape
        flat = chans[-1] * (h // 8) * (w // 8)
        self.proj = Linear(flat, config.feature_dim, rng)
        self.tile_shape = tuple(config.tile_shape)

    def forward(self, frames: Tensor) -> Tensor:
        """``N x h x w`` frames -> ``N x feature_dim``."""
        frames = T.as_tensor(frames)
        if frames.ndim != 3 or frames.shape[1:] != self.tile_shape:
            raise DimensionError(f"FrameEncoder expects N x {self.tile_shape}, got {frames.shape}")
        x = T.reshape(frames, (frames.shape[0], 1) + self.tile_shape)
        for w, b in zip(self.convs, self.conv_bias):
            x = T.conv2d(x, w, padding=1)
            x = T.relu(x + T.broadcast_to(T.reshape(b, (1, -1, 1, 1)), x.shape))
            x = T.avg_pool2d(x, 2)
        return self.proj(T.reshape(x, (x.shape[0], -1)))


class AttentionBlock(Module):
    """Multi-head self-attention over timepoints with 1x1-conv projections."""

    def __init__(self, channels: int, qk_dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.w_f = glorot(rng, (qk_dim, channels), channels, qk_dim)
        self.w_g = glorot(rng, (qk_dim, channels), channels, qk_dim)
        self.w_h = glorot(rng, (channels, channels), channels, channels)
        self.w_o = glorot(rng, (channels, channels), channels, channels)

    @staticmethod
    def _project(w: Tensor, p: Tensor) -> Tensor:
        return T.conv1x1(w, p)

    def _split(self, x: Tensor) -> Tensor:
        B, C, L = x.shape
        return T.reshape(x, (B * self.heads, C // self.heads, L))

    def forward(self, p: Tensor) -> tuple[Tensor, Tensor]:
        """``B x C x T`` -> (``B x C x T`` output, ``B x heads x T x T`` maps)."""
        B, C, L = p.shape
        f = self._split(self._project(self.w_f, p))
        g = self._split(self._project(self.w_g, p))
        h = self._split(self._project(self.w_h, p))
        scores = T.matmul(T.transpose(f), g) / np.sqrt(f.shape[1])
        A = T.softmax(scores, axis=1)  # scores[i, j] = f_i . g_j ; normalise over i per column j
        mixed = T.reshape(T.matmul(h, A), (B, C, L))
        out = p + self._project(self.w_o, mixed)
        return out, T.reshape(A, (B, self.heads, L, L))


def optimal_representation(features, A) -> tuple[Tensor, Tensor]:
    """Weighted sum of feature columns with ``alpha = softmax(row sums of A)``.

    ``features`` is ``C x T`` (or ``B x C x T``) and ``A`` is ``T x T`` (or
    ``B x T x T``). Returns ``(representation, alpha)``.
    """
    features, A = T.as_tensor(features), T.as_tensor(A)
    batched = features.ndim == 3
    if not batched:
        features, A = T.reshape(features, (1,) + features.shape), T.reshape(A, (1,) + A.shape)
    B, C, L = features.shape
    if A.shape != (B, L, L):
        raise DimensionError(f"attention map {A.shape} does not match features {features.shape}")
    alpha = T.softmax(T.tsum(A, axis=2), axis=1)
    rep = T.reshape(T.matmul(features, T.reshape(alpha, (B, L, 1))), (B, C))
    if not batched:
        return T.reshape(rep, (C,)), T.reshape(alpha, (L,))
    return rep, alpha


@dataclass
class TcnOutput:
    features: Tensor  # B x C x T
    attention: list[Tensor] = field(default_factory=list)  # each B x T x T (head mean)
    head_attention: list[Tensor] = field(default_factory=list)  # each B x heads x T x T
    representation: Tensor | None = None  # B x C
    alpha: Tensor | None = None  # B x T


class TemporalEncoder(Module):
    def __init__(self, config: TemporalConfig | None = None, seed: int = 0):
        self.config = config or TemporalConfig()
        self.config.validate()
        cfg = self.config
        rng = np.random.default_rng(seed)
        C, k = cfg.feature_dim, cfg.kernel
        self.frames = FrameEncoder(cfg, rng)
        self.conv_weights = [glorot(rng, (C, C, k), C * k, C * k) for _ in range(cfg.layers)]
        self.conv_bias = [parameter(np.zeros(C)) for _ in range(cfg.layers)]
        n_blocks = {"hierarchical": cfg.layers, "global_only": 1, "none": 0}[cfg.attention]
        self.blocks = [AttentionBlock(C, cfg.qk_dim, cfg.heads, rng) for _ in range(n_blocks)]

    def encode_frames(self, frames) -> Tensor:
        """``B x T x h x w`` (or ``T x h x w``) -> ``B x C x T`` (or ``C x T``)."""
        frames = T.as_tensor(frames)
        single = frames.ndim == 3
        if single:
            frames = T.reshape(frames, (1,) + frames.shape)
        if frames.ndim != 4 or frames.shape[1] < 1:
            raise ContractError(f"encode_frames needs a nonempty B x T x h x w batch, got {frames.shape}")
        B, L = frames.shape[:2]
        feats = self.frames(T.reshape(frames, (B * L,) + frames.shape[2:]))
        p = T.transpose(T.reshape(feats, (B, L, -1)), (0, 2, 1))
        return T.reshape(p, p.shape[1:]) if single else p

    def conv_layer(self, i: int, p: Tensor) -> Tensor:
        out = T.conv1d_causal(p, self.conv_weights[i], self.config.dilations[i])
        bias = T.reshape(self.conv_bias[i], (1, -1, 1))
        return T.relu(out + T.broadcast_to(bias, out.shape))

    def tcn_forward(self, p, bypass_attention: bool = False) -> TcnOutput:
        """Run the convolution stack on ``B x C x T`` features.

        With ``bypass_attention`` every block acts as ``A = I, h = 0`` so only
        the causal convolution path remains.
        """
        p = T.as_tensor(p)
        if p.ndim == 2:
            p = T.reshape(p, (1,) + p.shape)
        if p.shape[-1] < 1:
            raise ContractError("tcn_forward needs at least one timepoint")
        if not np.all(np.isfinite(p.data)):
            raise ContractError("tcn_forward input contains non-finite values")
        cfg = self.config
        x = p
        maps, head_maps = [], []
        for i in range(cfg.layers):
            x = self.conv_layer(i, x)
            block = None
            if cfg.attention == "hierarchical":
                block = self.blocks[i]
            elif cfg.attention == "global_only" and i == cfg.layers - 1:
                block = self.blocks[0]
            if block is None:
                continue
            if bypass_attention:
                L = x.shape[-1]
                eye = np.broadcast_to(np.eye(L), (x.shape[0], L, L))
                maps.append(T.Tensor(eye))
                head_maps.append(T.Tensor(np.broadcast_to(eye[:, None], (x.shape[0], cfg.heads, L, L))))
                continue
            x, A = block(x)
            head_maps.append(A)
            maps.append(T.mean(A, axis=1))
        out = TcnOutput(x, maps, head_maps)
        if maps:
            out.representation, out.alpha = optimal_representation(x, maps[-1])
        else:
            L = x.shape[-1]
            out.alpha = T.Tensor(np.full((x.shape[0], L), 1.0 / L))
            out.representation = T.mean(x, axis=2)
        return out

    def forward(self, frames) -> TcnOutput:
        frames = T.as_tensor(frames)
        if frames.ndim == 3:
            frames = T.reshape(frames, (1,) + frames.shape)
        return self.tcn_forward(self.encode_frames(frames))


class TemporalClassifier(Module):
    def __init__(self, config: TemporalConfig | None = None, seed: int = 0):
        self.encoder = TemporalEncoder(config, seed)
        rng = np.random.default_rng([seed, 1])
        self.head = Linear(self.encoder.config.feature_dim, self.encoder.config.n_classes, rng)

    @property
    def config(self) -> TemporalConfig:
        return self.encoder.config

    def forward(self, frames) -> tuple[Tensor, TcnOutput]:
        out = self.encoder(frames)
        return self.head(out.representation), out


def length_buckets(sequences: list[TemporalSequence], batch_size: int, rng: np.random.Generator | None = None):
    """Group sequence indices into batches of equal length."""
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        by_len.setdefault(len(s.images), []).append(i)
    batches = []
    for L in sorted(by_len):
        idx = np.asarray(by_len[L])
        if rng is not None:
            idx = rng.permutation(idx)
        batches.extend(idx[i : i + batch_size].tolist() for i in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def representation_bank(model: TemporalClassifier, sequences: list[TemporalSequence], batch_size: int = 32) -> np.ndarray:
    """One optimal representation per sequence, in input order (``M x C``)."""
    bank = np.zeros((len(sequences), model.config.feature_dim))
    for batch in length_buckets(sequences, batch_size):
        frames = np.stack([sequences[i].images for i in batch])
        bank[batch] = model.encoder(frames).representation.data
    return bank


def dataset_loss(model: TemporalClassifier, sequences: list[TemporalSequence], batch_size: int = 32) -> float:
    total = 0.0
    for batch in length_buckets(sequences, batch_size):
        frames = np.stack([sequences[i].images for i in batch])
        logits, _ = model(frames)
        total += cross_entropy(logits, [sequences[i].label for i in batch]).item() * len(batch)
    return total / len(sequences)


@dataclass
class TemporalTrainResult:
    model: TemporalClassifier
    bank: np.ndarray
    bank_ids: list[str]
    history: list[float]


def temporal_pretrain(
    sequences: list[TemporalSequence],
    config: TemporalConfig | None = None,
    epochs: int = 20,
    lr: float = 1e-3,
    momentum: float = 0.9,
    batch_size: int = 8,
    seed: int = 0,
) -> TemporalTrainResult:
    """Train encoder + linear head with cross-entropy; return the representation bank.

    ``history[0]`` is the training loss before any update and ``history[e]``
    the loss after epoch ``e``.
    """
    if not sequences:
        raise TrainingSetupError("temporal pretraining needs at least one sequence")
    labels = {s.label for s in sequences}
    if len(labels) < 2:
        raise TrainingSetupError(f"temporal pretraining needs at least 2 classes, found {sorted(labels)}")
    config = config or TemporalConfig()
    if max(labels) >= config.n_classes:
        raise TrainingSetupError(f"label {max(labels)} outside the {config.n_classes}-class head")
    model = TemporalClassifier(config, seed)
    opt = SGD(model.parameters(), lr=lr, momentum=momentum)
    rng = np.random.default_rng([seed, 2])
    history = [dataset_loss(model, sequences)]
    for epoch in range(epochs):
        for batch in length_buckets(sequences, batch_size, rng):
            frames = np.stack([sequences[i].images for i in batch])
            logits, _ = model(frames)
            loss = cross_entropy(logits, [sequences[i].label for i in batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(dataset_loss(model, sequences))
        log.info("temporal epoch %d: train CE %.4f", epoch + 1, history[-1])
    bank = representation_bank(model, sequences)
    return TemporalTrainResult(model, bank, [s.sequence_id for s in sequences], history)

"""Self-supervised snapshot encoder.

A small pre-LN patch transformer carries one contrastive token plus one token
per patch. Patch tokens feed a linear reconstruction head that restores the
clean image from a corrupted copy (L1 loss); the contrastive token feeds a
projection head whose output is trained with NT-Xent on two augmented views
and is the snapshot embedding used downstream.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import map_coordinates, uniform_filter

from . import tensor as T
from .errors import ContractError, DimensionError, TrainingSetupError
from .losses import pretrain_objective
from .nn import Adam, LayerNorm, Linear, Module, parameter
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class SnapshotConfig:
    image_shape: tuple[int, int] = (48, 48)
    patch: int = 8
    width: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    embed_dim: int = 512

    def validate(self) -> None:
        H, W = self.image_shape
        if H % self.patch or W % self.patch:
            raise DimensionError(f"image {H}x{W} is not divisible into {self.patch}px patches")
        if self.width % self.heads:
            raise DimensionError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def num_patches(self) -> int:
        H, W = self.image_shape
        return (H // self.patch) * (W // self.patch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SnapshotConfig":
        d = dict(d)
        if "image_shape" in d:
            d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


@dataclass
class CorruptionConfig:
    noise_sigma: float = 0.05
    blur_width: int = 3
    blur_prob: float = 0.5
    replace_prob: float = 0.25
    grid: int = 8


@dataclass
class AugmentationConfig:
    crop_range: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5


# -- image transforms (numpy, not differentiated) ---------------------------------
def _tiles(shape: tuple[int, int], grid: int) -> list[tuple[slice, slice]]:
    H, W = shape
    return [(slice(r, r + grid), slice(c, c + grid)) for r in range(0, H, grid) for c in range(0, W, grid)]


def corrupt(image: np.ndarray, config: CorruptionConfig, seed, donor: np.ndarray | None = None) -> np.ndarray:
    """Blur random tiles, paste donor tiles into random tiles, add noise, clamp to [0, 1].

    Replaced tiles take donor tiles through a random permutation of tile
    positions, so with ``donor=image`` and ``replace_prob=1`` the output is a
    rearrangement of the input's own tiles.
    """
    rng = np.random.default_rng(seed)
    out = np.array(image, dtype=np.float64)
    tiles = _tiles(out.shape, config.grid)
    if config.blur_width > 1 and config.blur_prob > 0:
        blurred = uniform_filter(out, size=config.blur_width, mode="reflect")
        for sl, hit in zip(tiles, rng.random(len(tiles)) < config.blur_prob):
            if hit:
                out[sl] = blurred[sl]
    if config.replace_prob > 0:
        source = np.asarray(image if donor is None else donor, dtype=np.float64)
        perm = rng.permutation(len(tiles))
        hits = rng.random(len(tiles)) < config.replace_prob
        snapshot = out.copy() if donor is None else source
        for i, sl in enumerate(tiles):
            if hits[i]:
                out[sl] = snapshot[tiles[perm[i]]]
    if config.noise_sigma > 0:
        out = out + rng.normal(0.0, config.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, config: AugmentationConfig, seed) -> np.ndarray:
    """Random crop (resized back to the full size, bilinear) and horizontal flip."""
    rng = np.random.default_rng(seed)
    H, W = image.shape
    frac = rng.uniform(*config.crop_range)
    ch, cw = max(2, int(round(H * frac))), max(2, int(round(W * frac)))
    top = rng.integers(0, H - ch + 1)
    left = rng.integers(0, W - cw + 1)
    rows = top + np.linspace(0, ch - 1, H)
    cols = left + np.linspace(0, cw - 1, W)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = map_coordinates(np.asarray(image, dtype=np.float64), [rr, cc], order=1, mode="nearest")
    if rng.random() < config.flip_prob:
        out = out[:, ::-1]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    B, H, W = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch)


def unpatchify(patches: Tensor, shape: tuple[int, int], patch: int) -> Tensor:
    B = patches.shape[0]
    H, W = shape
    x = T.reshape(patches, (B, H // patch, W // patch, patch, patch))
    return T.reshape(T.transpose(x, (0, 1, 3, 2, 4)), (B, H, W))


# -- model ------------------------------------------------------------------------
class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng)
        self.proj = Linear(width, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        H, dh = self.heads, D // self.heads
        qkv = T.reshape(self.qkv(T.reshape(x, (B * L, D))), (B, L, 3, H, dh))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # 3 x B x H x L x dh
        q, k, v = (T.reshape(qkv[i], (B * H, L, dh)) for i in range(3))
        A = T.softmax(T.matmul(q, T.transpose(k)) / np.sqrt(dh), axis=-1)
        out = T.transpose(T.reshape(T.matmul(A, v), (B, H, L, dh)), (0, 2, 1, 3))
        return T.reshape(self.proj(T.reshape(out, (B * L, D))), (B, L, D))


class Block(Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width, rng)
        self.fc2 = Linear(mlp_ratio * width, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.relu(self.fc1(self.norm2(x))))


class SnapshotEncoder(Module):
    def __init__(self, config: SnapshotConfig | None = None, seed: int = 0):
        self.config = config or SnapshotConfig()
        self.config.validate()
        cfg = self.config
        rng = np.random.default_rng(seed)
        P2 = cfg.patch * cfg.patch
        self.patch_embed = Linear(P2, cfg.width, rng)
        self.contrastive_token = parameter(rng.normal(0.0, 0.02, size=(1, 1, cfg.width)))
        self.pos = parameter(rng.normal(0.0, 0.02, size=(1, cfg.num_patches + 1, cfg.width)))
        self.blocks = [Block(cfg.width, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.width)
        self.recon_head = Linear(cfg.width, P2, rng)
        self.contrastive_hidden = Linear(cfg.width, cfg.width, rng)
        self.contrastive_out = Linear(cfg.width, cfg.embed_dim, rng)

    def tokens(self, images) -> Tensor:
        images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.ndim != 3 or images.shape[1:] != tuple(self.config.image_shape):
            raise DimensionError(f"expected B x {tuple(self.config.image_shape)} images, got {images.shape}")
        B = images.shape[0]
        patches = self.patch_embed(T.Tensor(patchify(images, self.config.patch)))
        cls = T.broadcast_to(self.contrastive_token, (B, 1, self.config.width))
        x = T.concat([cls, patches], axis=1)
        x = x + T.broadcast_to(self.pos, x.shape)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def reconstruct(self, images) -> Tensor:
        x = self.tokens(images)
        out = self.recon_head(x[:, 1:, :])
        return unpatchify(out, tuple(self.config.image_shape), self.config.patch)

    def embed(self, images) -> Tensor:
        x = self.tokens(images)
        return self.contrastive_out(T.relu(self.contrastive_hidden(x[:, 0, :])))

    def encode(self, images) -> dict[str, Tensor]:
        """Patch outputs (B x N x width) and contrastive embeddings (B x embed_dim)."""
        x = self.tokens(images)
        return {
            "patch_outputs": x[:, 1:, :],
            "contrastive_embedding": self.contrastive_out(T.relu(self.contrastive_hidden(x[:, 0, :]))),
        }


def embed_images(model: SnapshotEncoder, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Contrastive-head embeddings for a stack of images, no graph kept."""
    images = np.asarray(images, dtype=np.float64)
    out = [model.embed(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.embed_dim))


# -- losses -------------------------------------------------------------------------
def reconstruction_loss(originals, reconstructed) -> Tensor:
    """``(1/D) sum_i || I_i - T_r(I_bar_i) ||_1``."""
    originals, reconstructed = T.as_tensor(originals), T.as_tensor(reconstructed)
    if originals.shape != reconstructed.shape or originals.ndim < 2:
        raise DimensionError(f"reconstruction_loss: {originals.shape} vs {reconstructed.shape}")
    D = originals.shape[0]
    return T.l1_norm(originals - reconstructed) / D


def contrastive_loss(embeddings, tau: float = 0.5) -> Tensor:
    """NT-Xent over ``2D`` embeddings where rows ``i`` and ``i + D`` are a positive pair.

    For each anchor the denominator runs over all other ``2D - 1`` rows; the
    loss is the mean over all ``2D`` anchors.
    """
    z = T.as_tensor(embeddings)
    if z.ndim != 2 or z.shape[0] % 2:
        raise DimensionError(f"contrastive_loss expects 2D x d embeddings, got {z.shape}")
    n = z.shape[0]
    D = n // 2
    if D < 2:
        raise ContractError("contrastive_loss needs D >= 2 positive pairs (otherwise there are no negatives)")
    zn = T.l2_normalize(z, axis=1)
    sim = T.matmul(zn, T.transpose(zn)) / tau
    off = ~np.eye(n, dtype=bool)
    logits = T.reshape(sim[off], (n, n - 1))
    pair = (np.arange(n) + D) % n
    col = np.where(pair < np.arange(n), pair, pair - 1)
    logp = T.log_softmax(logits, axis=1)
    return -T.mean(logp[np.arange(n), col])


# -- pretraining ---------------------------------------------------------------------
@dataclass
class SnapshotTrainResult:
    model: SnapshotEncoder
    history: list[dict[str, float]]


def _views(images: np.ndarray, idx: np.ndarray, aug: AugmentationConfig, cor: CorruptionConfig, seed, step: int):
    corrupted, v1, v2 = [], [], []
    for j, i in enumerate(idx):
        base = [seed, step, int(i)]
        donor = images[idx[(j + 1) % len(idx)]]
        corrupted.append(corrupt(images[i], cor, base + [0], donor=donor))
        v1.append(augment(images[i], aug, base + [1]))
        v2.append(augment(images[i], aug, base + [2]))
    return np.stack(corrupted), np.stack(v1 + v2)


def pretrain_losses(model, clean, corrupted, views, lam_rec: float, lam_con: float, tau: float = 0.5):
    rec = reconstruction_loss(clean, model.reconstruct(corrupted)) if lam_rec > 0 else None
    con = contrastive_loss(model.embed(views), tau) if lam_con > 0 else None
    if rec is None and con is None:
        raise TrainingSetupError("at least one of the pretraining loss weights must be positive")
    if rec is None:
        total = lam_con * con
    elif con is None:
        total = lam_rec * rec
    else:
        total = pretrain_objective(rec, con, lam_rec, lam_con)
    return total, rec, con


def snapshot_pretrain(
    images: np.ndarray,
    config: SnapshotConfig | None = None,
    epochs: int = 10,
    lr: float = 5e-4,
    batch_size: int = 72,
    lam_rec: float = 1.0,
    lam_con: float = 1.0,
    tau: float = 0.5,
    seed: int = 0,
    corruption: CorruptionConfig | None = None,
    augmentation: AugmentationConfig | None = None,
    eval_size: int = 72,
) -> SnapshotTrainResult:
    """Minimise ``lam_rec * L_r + lam_con * L_c`` with Adam.

    ``history[0]`` holds the objective on a fixed evaluation batch before
    training; ``history[e]`` the same batch after epoch ``e``.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise TrainingSetupError("snapshot pretraining needs a nonempty image set")
    if batch_size < 2 or len(images) < 2:
        raise TrainingSetupError("the contrastive task needs batches of at least 2 images")
    config = config or SnapshotConfig(image_shape=tuple(images.shape[1:]))
    corruption = corruption or CorruptionConfig(grid=config.patch)
    augmentation = augmentation or AugmentationConfig()
    model = SnapshotEncoder(config, seed)
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 3])

    eval_idx = np.arange(min(eval_size, len(images)))
    eval_batch = _views(images, eval_idx, augmentation, corruption, seed, 10**9)

    def evaluate():
        total, rec, con = pretrain_losses(model, images[eval_idx], *eval_batch, lam_rec, lam_con, tau)
        return {
            "total": total.item(),
            "reconstruction": rec.item() if rec is not None else 0.0,
            "contrastive": con.item() if con is not None else 0.0,
        }

    history = [evaluate()]
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            corrupted, views = _views(images, idx, augmentation, corruption, seed, step)
            total, _, _ = pretrain_losses(model, images[idx], corrupted, views, lam_rec, lam_con, tau)
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
        history.append(evaluate())
        log.info("snapshot epoch %d: %s", epoch + 1, history[-1])
    return SnapshotTrainResult(model, history)

"""Tiny shifted-window transformer classifier (scaled-cosine attention)."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from ..autograd import LayerNorm, Linear, Module, NumericError, Tensor, no_grad, ops, parameter
from ..autograd.optim import AdamW, LRSchedule, cosine_lr

log = logging.getLogger(__name__)

MASK_VALUE = -1e4
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


@dataclass(frozen=True)
class SwinConfig:
    input_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple[int, ...] = (2, 2)
    num_heads: tuple[int, ...] = (2, 4)
    window_size: int = 4
    num_classes: int = 2
    tau_min: float = 0.01
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ValueError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have the same length")
        for i, heads in enumerate(self.num_heads):
            if self.stage_dim(i) % heads:
                raise ValueError(f"stage {i} dim {self.stage_dim(i)} not divisible by {heads} heads")
        if self.grid_size % (2 ** (len(self.depths) - 1)):
            raise ValueError("token grid must halve evenly between stages")

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2**i

    def stage_resolution(self, i: int) -> int:
        return self.grid_size // 2**i

    @classmethod
    def from_dict(cls, d: dict) -> SwinConfig:
        d = dict(d)
        for k in ("depths", "num_heads"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def to_input(images) -> Tensor:
    """uint8 (B, H, W, 3) or (H, W, 3) frames -> normalized float32 tensor (B, H, W, 3)."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(((arr.astype(np.float32) / 255.0) - PIXEL_MEAN) / PIXEL_STD)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class WindowSet:
    windows: Tensor  # (B * num_windows, ws*ws, C)
    batch: int
    height: int  # padded grid height
    width: int
    window_size: int
    shift: int
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, bottom, left, right

    @property
    def num_windows(self) -> int:
        return (self.height // self.window_size) * (self.width // self.window_size)


def window_partition(grid, window_size: int, shift: int = 0) -> WindowSet:
    """(B, H, W, C) grid -> non-overlapping windows after a cyclic shift by -shift.

    Grids not divisible by the window are zero-padded symmetrically; the pad is
    cropped again by :func:`window_reverse`.
    """
    x = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid))
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    b, h, w, c = x.shape
    ph, pw = (-h) % window_size, (-w) % window_size
    pad = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if ph or pw:
        x = ops.pad(x, ((0, 0), (pad[0], pad[1]), (pad[2], pad[3]), (0, 0)))
    hp, wp = h + ph, w + pw
    if shift:
        x = ops.roll(x, (-shift, -shift), (1, 2))
    ws = window_size
    x = x.reshape(b, hp // ws, ws, wp // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return WindowSet(x.reshape(-1, ws * ws, c), b, hp, wp, ws, shift, pad)


def window_reverse(wset: WindowSet, windows: Tensor | None = None) -> Tensor:
    """Undo :func:`window_partition` (un-shift and crop), optionally on new window contents."""
    x = wset.windows if windows is None else windows
    ws, b = wset.window_size, wset.batch
    c = x.shape[-1]
    x = x.reshape(b, wset.height // ws, wset.width // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, wset.height, wset.width, c)
    if wset.shift:
        x = ops.roll(x, (wset.shift, wset.shift), (1, 2))
    top, bottom, left, right = wset.pad
    if any(wset.pad):
        x = x[:, top : wset.height - bottom, left : wset.width - right, :]
    return x


@lru_cache(maxsize=64)
def _region_ids(height: int, width: int, window_size: int, shift: int) -> np.ndarray:
    img = np.zeros((height, width), dtype=np.int64)
    cnt = 0
    bands = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    for hs in bands:
        for wsl in bands:
            img[hs, wsl] = cnt
            cnt += 1
    return img


def shifted_attention_mask(height: int, width: int, window_size: int, shift: int) -> np.ndarray:
    """Additive (num_windows, N, N) mask: -1e4 between tokens from different pre-shift regions."""
    n = window_size * window_size
    nw = (height // window_size) * (width // window_size)
    if shift == 0:
        return np.zeros((nw, n, n), dtype=np.float32)
    if not 0 < shift < window_size:
        raise ValueError(f"shift {shift} must lie in (0, window_size={window_size})")
    ids = _region_ids(height, width, window_size, shift)
    win = ids.reshape(height // window_size, window_size, width // window_size, window_size)
    win = win.transpose(0, 2, 1, 3).reshape(nw, n)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0).astype(np.float32)


def relative_position_index(window_size: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window_size), np.arange(window_size), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window_size - 1)
    return rel[0] * (2 * window_size - 1) + rel[1]


def cosine_window_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None,
    tau: Tensor,
    rel_bias: Tensor | None = None,
    tau_min: float = 0.01,
) -> tuple[Tensor, Tensor]:
    """Scaled-cosine attention inside windows.

    q, k, v: (B*nW, heads, N, d); tau: (heads,); rel_bias: (heads, N, N);
    mask: (nW, N, N) additive. Returns (output, attention weights).
    """
    tau = tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=q.dtype))
    if np.any(tau.data < tau_min - 1e-12):
        raise ValueError(f"temperature below floor {tau_min}: {tau.data}")
    bw, heads, n, _ = q.shape
    logits = ops.cosine_similarity(q, k) / tau.reshape(heads, 1, 1)
    if rel_bias is not None:
        logits = logits + rel_bias
    if mask is not None:
        nw = mask.shape[0]
        logits = logits.reshape(bw // nw, nw, heads, n, n) + Tensor(mask[None, :, None].astype(q.dtype))
        logits = logits.reshape(bw, heads, n, n)
    attn = ops.softmax(logits, axis=-1)
    return attn @ v, attn


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window_size: int, rng: np.random.Generator, tau_min: float = 0.01):
        self.dim, self.heads, self.window_size, self.tau_min = dim, heads, window_size, tau_min
        self.qkv = Linear(dim, 3 * dim, rng)
        # tau = tau_min + exp(tau_log) keeps the floor by construction; starts at 0.1
        self.tau_log = parameter(np.full(heads, np.log(0.1 - tau_min)))
        self.rel_bias_table = parameter(rng.normal(0.0, 0.02, size=((2 * window_size - 1) ** 2, heads)))
        self.proj = Linear(dim, dim, rng)
        self._rel_index = relative_position_index(window_size)

    def tau(self) -> Tensor:
        return ops.exp(self.tau_log) + self.tau_min

    def forward(self, windows: Tensor, mask: np.ndarray | None) -> Tensor:
        bw, n, c = windows.shape
        d = c // self.heads
        qkv = self.qkv(windows).reshape(bw, n, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        bias = ops.take(self.rel_bias_table, self._rel_index, axis=0).permute(2, 0, 1)
        out, _ = cosine_window_attention(q, k, v, mask, self.tau(), bias, self.tau_min)
        out = out.permute(0, 2, 1, 3).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then + mlp(norm(.))."""

    def __init__(self, dim: int, heads: int, window_size: int, shift: int, resolution: int, rng, mlp_ratio: float = 2.0, tau_min: float = 0.01):
        if resolution <= window_size:
            window_size, shift = resolution, 0
        self.window_size, self.shift = window_size, shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window_size, rng, tau_min)
        self.norm2 = LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        wset = window_partition(self.norm1(x), self.window_size, self.shift)
        mask = shifted_attention_mask(wset.height, wset.width, self.window_size, self.shift) if self.shift else None
        attn = self.attn(wset.windows, mask)
        x = x + window_reverse(wset, attn)
        return x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))


class PatchEmbed(Module):
    def __init__(self, patch_size: int, embed_dim: int, rng, in_channels: int = 3):
        self.patch_size = patch_size
        self.proj = Linear(patch_size * patch_size * in_channels, embed_dim, rng)
        self.norm = LayerNorm(embed_dim)

    def tokens(self, x: Tensor) -> Tensor:
        """Projected patches before the norm, (B, H/p, W/p, embed_dim)."""
        b, h, w, c = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        patches = x.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h // p, w // p, p * p * c)
        return self.proj(patches)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.tokens(x))


class PatchMerge(Module):
    """2x2 neighbourhood concat (4C) -> norm -> linear to 2C."""

    def __init__(self, dim: int, rng):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch merge needs even dims, got {h}x{w}")
        x0 = x[:, 0::2, 0::2, :]
        x1 = x[:, 1::2, 0::2, :]
        x2 = x[:, 0::2, 1::2, :]
        x3 = x[:, 1::2, 1::2, :]
        return self.reduction(self.norm(ops.concat([x0, x1, x2, x3], axis=-1)))


class SwinStage(Module):
    def __init__(self, cfg: SwinConfig, index: int, rng, merge: bool):
        dim, res = cfg.stage_dim(index), cfg.stage_resolution(index)
        self.blocks = [
            SwinBlock(dim, cfg.num_heads[index], cfg.window_size, 0 if i % 2 == 0 else cfg.window_size // 2, res, rng, cfg.mlp_ratio, cfg.tau_min)
            for i in range(cfg.depths[index])
        ]
        self.merge = PatchMerge(dim, rng) if merge else None

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinEncoder(Module):
    """Patch embedding plus the stage stack; shared by the classifier and the segmenter."""

    def __init__(self, cfg: SwinConfig, rng: np.random.Generator, merge_last: bool = False):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim, rng)
        n = len(cfg.depths)
        self.stages = [SwinStage(cfg, i, rng, merge=(i < n - 1) or merge_last) for i in range(n)]

    def check_input(self, x: Tensor) -> None:
        if x.shape[1:3] != (self.cfg.input_size, self.cfg.input_size):
            raise ValueError(f"expected {self.cfg.input_size}x{self.cfg.input_size} input, got {x.shape[1:3]}")

    def stage_outputs(self, x: Tensor) -> list[Tensor]:
        """Token grid after every stage (before that stage's merge)."""
        self.check_input(x)
        h = self.patch_embed(x)
        outs = []
        for stage in self.stages:
            h = stage(h)
            outs.append(h)
            if stage.merge is not None:
                h = stage.merge(h)
        return outs


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


class SwinClassifier(Module):
    """patch embed -> stages (blocks + merge) -> global average pool -> linear head."""

    def __init__(self, cfg: SwinConfig = SwinConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = SwinEncoder(cfg, rng)
        last = cfg.stage_dim(len(cfg.depths) - 1)
        self.norm = LayerNorm(last)
        self.head = Linear(last, cfg.num_classes, rng)
        self.forward_count = 0  # partial forwards run through forward_from

    @property
    def layer_ids(self) -> list[str]:
        return [f"stage{i}" for i in range(len(self.cfg.depths))]

    @property
    def default_layer(self) -> str:
        return self.layer_ids[-1]

    def _stage_index(self, layer_id: str) -> int:
        if layer_id not in self.layer_ids:
            raise KeyError(f"unknown layer {layer_id!r}; choose from {self.layer_ids}")
        return int(layer_id[5:])

    def capture(self, images, layer_id: str) -> Tensor:
        """Run up to (and including) the named stage; returns its (B, h, w, K) output."""
        idx = self._stage_index(layer_id)
        x = to_input(images)
        self.encoder.check_input(x)
        h = self.encoder.patch_embed(x)
        for i, stage in enumerate(self.encoder.stages):
            h = stage(h)
            if i == idx:
                return h
            h = stage.merge(h)
        raise AssertionError("unreachable")

    def forward_from(self, layer_id: str, act: Tensor) -> Tensor:
        """Continue the forward pass from a (possibly edited) stage output to logits."""
        idx = self._stage_index(layer_id)
        self.forward_count += 1
        h = act
        stages = self.encoder.stages
        if stages[idx].merge is not None:
            h = stages[idx].merge(h)
        for stage in stages[idx + 1 :]:
            h = stage(h)
            if stage.merge is not None:
                h = stage.merge(h)
        h = self.norm(h).mean(axis=(1, 2))
        return self.head(h)

    def forward(self, images) -> Tensor:
        x = to_input(images)
        h = self.encoder.stage_outputs(x)[-1]
        return self.head(self.norm(h).mean(axis=(1, 2)))

    def classify(self, img: np.ndarray) -> np.ndarray:
        """Logits (2,) for one frame."""
        with no_grad():
            return self.forward(img).data[0]

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(ops.softmax(self.forward(images[i : i + batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.num_classes), dtype=np.float32)

    def hyper(self) -> dict:
        return {"model": "swin-classifier", "config": asdict(self.cfg)}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -sum_c y_c log softmax(z)_c (soft labels allowed)."""
    t = Tensor(np.asarray(targets, dtype=logits.dtype))
    return -(ops.log_softmax(logits, axis=-1) * t).sum() / logits.shape[0]


@dataclass
class ClassifierTrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr_max: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.05
    seed: int = 0
    augment: bool = True
    mixup: bool = False
    log_every: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


def write_log(path, rows: list[EpochRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
        for r in rows:
            w.writerow([r.epoch, f"{r.lr:.8g}", f"{r.train_loss:.6f}", f"{r.train_acc:.6f}", f"{r.val_acc:.6f}"])


def evaluate_accuracy(model: SwinClassifier, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        return float("nan")
    probs = model.predict_proba(images)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def train_classifier(
    images: np.ndarray,
    targets: np.ndarray,
    cfg: SwinConfig = SwinConfig(),
    train_cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    batch_transform=None,
) -> tuple[SwinClassifier, list[EpochRow]]:
    """Minimize soft-label cross-entropy with AdamW under a per-step cosine schedule.

    ``targets`` is (N, 2) soft labels or (N,) class ids. ``batch_transform``
    (rng, images, targets) -> (images, targets) hooks in augmentation.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty training set")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = np.eye(cfg.num_classes)[targets.astype(int)]
    hard = targets.argmax(1)
    if len(np.unique(hard)) < 2:
        warnings.warn("training set contains a single class", stacklevel=2)
    model = SwinClassifier(cfg, seed=train_cfg.seed)
    opt = AdamW(model.parameters(), weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed + 1)
    n = len(images)
    steps_per_epoch = int(np.ceil(n / train_cfg.batch_size))
    sched = LRSchedule(train_cfg.lr_max, train_cfg.lr_min, train_cfg.epochs * steps_per_epoch)
    step = 0
    rows = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        losses, correct = [], 0
        lr = sched.lr_max
        for s in range(steps_per_epoch):
            idx = order[s * train_cfg.batch_size : (s + 1) * train_cfg.batch_size]
            xb, yb = images[idx], targets[idx]
            if batch_transform is not None:
                xb, yb = batch_transform(rng, xb, yb)
            lr = cosine_lr(step, sched)
            opt.zero_grad()
            logits = model(xb)
            loss = soft_cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite classifier loss at epoch {epoch}")
            loss.backward()
            opt.step(lr)
            step += 1
            losses.append(float(loss.data) * len(idx))
            correct += int(np.sum(logits.data.argmax(1) == yb.argmax(1)))
        val_acc = evaluate_accuracy(model, val_images, val_labels) if val_images is not None else float("nan")
        row = EpochRow(epoch, lr, float(np.sum(losses) / n), correct / n, val_acc)
        rows.append(row)
        log.info("cls epoch %d loss %.4f train_acc %.3f val_acc %.3f", epoch, row.train_loss, row.train_acc, val_acc)
    return model, rows

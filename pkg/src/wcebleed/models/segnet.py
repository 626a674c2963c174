"""2-D SwinUNETR-style segmenter: shifted-window encoder with a U-Net decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..autograd import Conv2d, Module, NumericError, Tensor, no_grad, ops
from ..autograd.optim import Adam
from ..metrics import dice_coefficient, mask_iou
from .swin import SwinConfig, SwinEncoder, to_input

log = logging.getLogger(__name__)

SEG_BCE_WEIGHT, SEG_DICE_WEIGHT = 0.3, 0.7
DICE_EPS = 1.0


@dataclass(frozen=True)
class SegConfig:
    encoder: SwinConfig = SwinConfig(depths=(2, 2, 2), num_heads=(2, 4, 8))
    stem_channels: int = 16
    # bottleneck, one per encoder skip above the deepest, then the x2 and full-size steps
    decoder_channels: tuple[int, ...] = (64, 48, 32, 16, 16)

    def __post_init__(self):
        if len(self.decoder_channels) != len(self.encoder.depths) + 2:
            raise ValueError(f"decoder_channels needs {len(self.encoder.depths) + 2} entries")
        if self.encoder.patch_size != 4:
            raise ValueError("the decoder assumes patch_size 4 (two x2 steps from the first stage to the stem)")

    @classmethod
    def from_dict(cls, d: dict) -> SegConfig:
        d = dict(d)
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = SwinConfig.from_dict(d["encoder"])
        if "decoder_channels" in d:
            d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


class ConvPair(Module):
    def __init__(self, cin: int, cout: int, rng):
        self.c1 = Conv2d(cin, cout, 3, rng)
        self.c2 = Conv2d(cout, cout, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.c2(ops.relu(self.c1(x))))


class UpStage(Module):
    """upsample x2 -> concat skip (if any) -> two 3x3 convs."""

    def __init__(self, cin: int, cskip: int, cout: int, resolution: int, rng):
        self.resolution = resolution
        self.has_skip = cskip > 0
        self.convs = ConvPair(cin + cskip, cout, rng)

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        x = ops.upsample_nearest2x(x)
        if x.shape[-1] != self.resolution:
            raise ValueError(f"decoder stage expects {self.resolution}px, got {x.shape[-1]}")
        if self.has_skip:
            if skip is None or skip.shape[-1] != self.resolution:
                got = None if skip is None else skip.shape[-1]
                raise ValueError(f"skip resolution {got} does not match decoder stage {self.resolution}")
            x = ops.concat([x, skip], axis=1)
        return self.convs(x)


def _nchw(grid: Tensor) -> Tensor:
    return grid.permute(0, 3, 1, 2)


class SwinUNet(Module):
    def __init__(self, cfg: SegConfig = SegConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        enc = cfg.encoder
        self.encoder = SwinEncoder(enc, rng)
        self.stem = ConvPair(3, cfg.stem_channels, rng)
        n = len(enc.depths)
        dims = [enc.stage_dim(i) for i in range(n)]
        res = [enc.stage_resolution(i) for i in range(n)]
        ch = cfg.decoder_channels
        self.bottleneck = Conv2d(dims[-1], ch[0], 3, rng)
        # climb from the deepest skip to the first stage, then two x2 steps to full size
        stages = []
        for j, i in enumerate(range(n - 2, -1, -1)):
            stages.append(UpStage(ch[j], dims[i], ch[j + 1], res[i], rng))
        stages.append(UpStage(ch[n - 1], 0, ch[n], res[0] * 2, rng))
        stages.append(UpStage(ch[n], cfg.stem_channels, ch[n + 1], enc.input_size, rng))
        self.up = stages
        self.head = Conv2d(ch[-1], 1, 1, rng)
        self.forward_count = 0
        self._check_mirror()

    def _check_mirror(self) -> None:
        enc = self.cfg.encoder
        want = [enc.stage_resolution(i) for i in range(len(enc.depths) - 2, -1, -1)]
        got = [st.resolution for st in self.up[: len(want)]]
        if got != want:
            raise ValueError(f"decoder resolutions {got} do not mirror encoder skips {want}")

    def encode(self, images) -> list[Tensor]:
        """Stem features at input resolution followed by every encoder stage output (NCHW)."""
        x = to_input(images)
        skips = [_nchw(g) for g in self.encoder.stage_outputs(x)]
        return [self.stem(_nchw(x))] + skips

    def decode(self, skips: list[Tensor]) -> Tensor:
        """(B, 1, H, W) logits at input resolution."""
        stem, enc_skips = skips[0], skips[1:]
        h = ops.relu(self.bottleneck(enc_skips[-1]))
        n = len(enc_skips)
        for j in range(n - 1):
            h = self.up[j](h, enc_skips[n - 2 - j])
        h = self.up[n - 1](h, None)
        h = self.up[n](h, stem)
        return self.head(h)

    def forward(self, images) -> Tensor:
        self.forward_count += 1
        return self.decode(self.encode(images))[:, 0]

    def predict_logits(self, images, batch_size: int = 32) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i : i + batch_size]).data)
        return np.concatenate(out)

    def hyper(self) -> dict:
        return {"model": "seg-net", "config": asdict(self.cfg)}


def seg_encode(model: SwinUNet, images) -> list[Tensor]:
    return model.encode(images)


def seg_decode(model: SwinUNet, skips: list[Tensor]) -> Tensor:
    return model.decode(skips)


def predict_mask(model: SwinUNet, images, threshold: float = 0.5) -> np.ndarray:
    """Binary {0, 1} masks where sigmoid(logit) >= threshold."""
    probs = ops._sigmoid_np(model.predict_logits(images).astype(np.float64))
    masks = (probs >= threshold).astype(np.uint8)
    return masks[0] if np.asarray(images).ndim == 3 else masks


def _check_dims(a_shape, b_shape) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ValueError(f"prediction {tuple(a_shape)} and target {tuple(b_shape)} differ in size")


def dice_loss(probs: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps), per image then averaged over the batch."""
    t = np.asarray(target, dtype=probs.dtype)
    _check_dims(probs.shape, t.shape)
    if probs.ndim == 2:
        probs, t = probs.reshape((1,) + probs.shape), t[None]
    axes = (1, 2)
    tt = Tensor(t)
    inter = (probs * tt).sum(axis=axes)
    denom = probs.sum(axis=axes) + float(eps) + Tensor(t.sum(axis=axes))
    return (1.0 - (inter * 2.0 + float(eps)) / denom).mean()


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    t = np.asarray(target, dtype=logits.dtype)
    _check_dims(logits.shape, t.shape)
    tt = Tensor(t)
    return -(ops.log_sigmoid(logits) * tt + ops.log_sigmoid(-logits) * (1.0 - tt)).mean()


def combined_seg_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """0.3 * pixelwise BCE + 0.7 * Dice(sigmoid(logits))."""
    return SEG_BCE_WEIGHT * bce_with_logits(logits, target) + SEG_DICE_WEIGHT * dice_loss(ops.sigmoid(logits), target)


@dataclass
class SegmenterTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class SegEpochRow:
    epoch: int
    lr: float
    train_loss: float
    val_dice: float
    val_iou: float


def evaluate_masks(model: SwinUNet, images: np.ndarray, masks: np.ndarray) -> tuple[float, float]:
    """Mean Dice and IoU over frames."""
    pred = predict_mask(model, images)
    if pred.ndim == 2:
        pred = pred[None]
    dice = [dice_coefficient(p, m) for p, m in zip(pred, masks)]
    iou = [mask_iou(p, m) for p, m in zip(pred, masks)]
    return float(np.mean(dice)), float(np.mean(iou))


def train_segmenter(
    images: np.ndarray,
    masks: np.ndarray,
    cfg: SegConfig = SegConfig(),
    train_cfg: SegmenterTrainConfig = SegmenterTrainConfig(),
    val_images: np.ndarray | None = None,
    val_masks: np.ndarray | None = None,
    batch_transform=None,
) -> tuple[SwinUNet, list[SegEpochRow]]:
    """Plain Adam at a fixed learning rate on the 0.3/0.7 BCE + Dice objective."""
    images = np.asarray(images)
    if masks is None or len(masks) != len(images):
        raise ValueError("segmenter training needs one mask per frame")
    masks = np.asarray(masks)
    if len(images) == 0:
        raise ValueError("empty segmentation training set")
    model = SwinUNet(cfg, seed=train_cfg.seed)
    opt = Adam(model.parameters())
    rng = np.random.default_rng(train_cfg.seed + 1)
    n = len(images)
    steps = int(np.ceil(n / train_cfg.batch_size))
    rows = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for s in range(steps):
            idx = order[s * train_cfg.batch_size : (s + 1) * train_cfg.batch_size]
            xb, mb = images[idx], masks[idx]
            if batch_transform is not None:
                xb, mb = batch_transform(rng, xb, mb)
            opt.zero_grad()
            loss = combined_seg_loss(model(xb), mb)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite segmentation loss at epoch {epoch}")
            loss.backward()
            opt.step(train_cfg.lr)
            loss_sum += float(loss.data) * len(idx)
        if val_images is not None:
            dice, iou = evaluate_masks(model, val_images, val_masks)
        else:
            dice = iou = float("nan")
        rows.append(SegEpochRow(epoch, train_cfg.lr, loss_sum / n, dice, iou))
        log.info("seg epoch %d loss %.4f dice %.3f iou %.3f", epoch, loss_sum / n, dice, iou)
    return model, rows

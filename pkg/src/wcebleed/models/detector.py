"""Tiny RT-DETR-style detector: conv backbone, AIFI + CCFF encoder, query selection, decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..autograd import MLP, Conv2d, LayerNorm, Linear, Module, NumericError, Tensor, no_grad, ops, parameter, zero_
from ..autograd.optim import AdamW, LRSchedule, warmup_cosine_lr
from ..metrics import DetectionRecord, ap_at
from .det_loss import LayerOutput, LossWeights, cxcywh_to_xyxy, detection_loss, uncertainty

log = logging.getLogger(__name__)

PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 64
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    num_decoder_layers: int = 3
    num_queries: int = 10
    backbone_channels: tuple[int, ...] = (16, 32, 48, 64, 96)

    def __post_init__(self):
        if self.input_size % 32:
            raise ValueError(f"input_size {self.input_size} must be divisible by 32")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.hidden_dim % 4:
            raise ValueError("hidden_dim must be divisible by 4 for the 2-D sincos encoding")
        if len(self.backbone_channels) != 5:
            raise ValueError("backbone_channels needs 5 entries (2 stem convs + 3 stages)")

    @property
    def num_tokens(self) -> int:
        s = self.input_size
        return (s // 8) ** 2 + (s // 16) ** 2 + (s // 32) ** 2

    @classmethod
    def from_dict(cls, d: dict) -> DetectorConfig:
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.clip(x, eps, 1 - eps)
    return np.log(x / (1 - x))


def sincos_position_encoding(h: int, w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """(h*w, dim) fixed 2-D encoding: [sin(x w), cos(x w), sin(y w), cos(y w)] with w_i = T^(-i/(dim/4))."""
    pos_dim = dim // 4
    omega = 1.0 / temperature ** (np.arange(pos_dim, dtype=np.float64) / pos_dim)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ox = gx.reshape(-1, 1) * omega
    oy = gy.reshape(-1, 1) * omega
    return np.concatenate([np.sin(ox), np.cos(ox), np.sin(oy), np.cos(oy)], axis=1).astype(np.float32)


def to_nchw(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = ((arr.astype(np.float32) / 255.0) - PIXEL_MEAN) / PIXEL_STD
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_attn: np.ndarray | None = None

    def forward(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        b, nq, d = query.shape
        nk = key.shape[1]
        hd = d // self.heads
        q = self.q(query).reshape(b, nq, self.heads, hd).permute(0, 2, 1, 3)
        k = self.k(key).reshape(b, nk, self.heads, hd).permute(0, 2, 1, 3)
        v = self.v(value).reshape(b, nk, self.heads, hd).permute(0, 2, 1, 3)
        attn = ops.softmax((q @ k.transpose(-2, -1)) * (1.0 / np.sqrt(hd)), axis=-1)
        self.last_attn = attn.data
        out = (attn @ v).permute(0, 2, 1, 3).reshape(b, nq, d)
        return self.out(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


# ---------------------------------------------------------------------------
# backbone and hybrid encoder
# ---------------------------------------------------------------------------


@dataclass
class FeaturePyramid:
    s3: Tensor  # (B, D, H/8, W/8)
    s4: Tensor
    s5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.s3, self.s4, self.s5]


class Backbone(Module):
    """Two stride-2 stem convs, then three stride-2 stages (strides 8/16/32), 1x1 aligned."""

    def __init__(self, cfg: DetectorConfig, rng):
        c = cfg.backbone_channels
        self.stem = [Conv2d(3, c[0], 3, rng, stride=2), Conv2d(c[0], c[1], 3, rng, stride=2)]
        self.stages = [Conv2d(c[1], c[2], 3, rng, stride=2), Conv2d(c[2], c[3], 3, rng, stride=2), Conv2d(c[3], c[4], 3, rng, stride=2)]
        self.align = [Conv2d(ch, cfg.hidden_dim, 1, rng) for ch in c[2:]]

    def forward(self, x: Tensor) -> FeaturePyramid:
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"backbone input {h}x{w} must be divisible by 32")
        for conv in self.stem:
            x = ops.relu(conv(x))
        feats = []
        for conv, align in zip(self.stages, self.align):
            x = ops.relu(conv(x))
            feats.append(align(x))
        return FeaturePyramid(*feats)


class AIFI(Module):
    """One post-norm transformer encoder layer over S5 tokens with sincos positions."""

    def __init__(self, cfg: DetectorConfig, rng):
        self.dim = cfg.hidden_dim
        self.attn = MultiHeadAttention(cfg.hidden_dim, cfg.num_heads, rng)
        self.norm1 = LayerNorm(cfg.hidden_dim)
        self.ffn = FeedForward(cfg.hidden_dim, cfg.ffn_dim, rng)
        self.norm2 = LayerNorm(cfg.hidden_dim)

    def forward(self, s5: Tensor) -> Tensor:
        b, d, h, w = s5.shape
        src = s5.reshape(b, d, h * w).transpose(1, 2)
        pos = Tensor(sincos_position_encoding(h, w, d).astype(s5.dtype))
        qk = src + pos
        src = self.norm1(src + self.attn(qk, qk, src))
        src = self.norm2(src + self.ffn(src))
        return src.transpose(1, 2).reshape(b, d, h, w)


class FusionBlock(Module):
    """concat(a, b) -> 1x1 conv -> relu -> 3x3 conv, added back onto a."""

    def __init__(self, dim: int, rng):
        self.reduce = Conv2d(2 * dim, dim, 1, rng)
        self.conv = Conv2d(dim, dim, 3, rng)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        return a + self.conv(ops.relu(self.reduce(ops.concat([a, b], axis=1))))


class CCFF(Module):
    """Top-down then bottom-up residual fusion; zeroing each block's last conv gives the identity."""

    def __init__(self, dim: int, rng):
        self.td4 = FusionBlock(dim, rng)
        self.td3 = FusionBlock(dim, rng)
        self.down3 = Conv2d(dim, dim, 3, rng, stride=2)
        self.down4 = Conv2d(dim, dim, 3, rng, stride=2)
        self.bu4 = FusionBlock(dim, rng)
        self.bu5 = FusionBlock(dim, rng)

    def fusion_blocks(self) -> list[FusionBlock]:
        return [self.td4, self.td3, self.bu4, self.bu5]

    def forward(self, pyr: FeaturePyramid) -> FeaturePyramid:
        p5 = pyr.s5
        p4 = self.td4(pyr.s4, ops.upsample_nearest2x(p5))
        p3 = self.td3(pyr.s3, ops.upsample_nearest2x(p4))
        n4 = self.bu4(p4, self.down3(p3))
        n5 = self.bu5(p5, self.down4(n4))
        return FeaturePyramid(p3, n4, n5)


def level_anchors(shapes: list[tuple[int, int]], base_size: float = 0.05) -> np.ndarray:
    """(sum h*w, 4) cxcywh anchors: cell centres, side base_size * 2**level."""
    out = []
    for lvl, (h, w) in enumerate(shapes):
        gy, gx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        side = np.full(h * w, base_size * 2.0**lvl)
        out.append(np.stack([gx.ravel(), gy.ravel(), side, side], axis=1))
    return np.concatenate(out)


def select_queries(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top-k scores, descending; equal scores keep the lower index first."""
    scores = np.asarray(scores)
    if k > scores.shape[-1]:
        raise ValueError(f"cannot select {k} queries from {scores.shape[-1]} tokens")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def selection_scores(class_logits: np.ndarray, iou_logits: np.ndarray) -> np.ndarray:
    """score = max class prob - |max class prob - predicted IoU|."""
    probs = ops._sigmoid_np(class_logits)
    iou = ops._sigmoid_np(iou_logits)
    return probs.max(axis=-1) - uncertainty(probs, iou)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


class DecoderLayer(Module):
    def __init__(self, cfg: DetectorConfig, rng):
        d = cfg.hidden_dim
        self.self_attn = MultiHeadAttention(d, cfg.num_heads, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.num_heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng)
        self.norm3 = LayerNorm(d)

    def forward(self, tgt: Tensor, query_pos: Tensor, memory: Tensor, memory_pos: Tensor) -> Tensor:
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt))
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, memory + memory_pos, memory))
        return self.norm3(tgt + self.ffn(tgt))


@dataclass
class DetectorOutput:
    layers: list[LayerOutput]  # encoder proposals first, then one per decoder layer
    query_index: np.ndarray  # (B, K) selected token indices

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]

    @property
    def decoder_layers(self) -> list[LayerOutput]:
        return self.layers[1:]


class RTDETR(Module):
    def __init__(self, cfg: DetectorConfig = DetectorConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.hidden_dim
        self.backbone = Backbone(cfg, rng)
        self.aifi = AIFI(cfg, rng)
        self.ccff = CCFF(d, rng)
        self.enc_proj = Linear(d, d, rng)
        self.enc_norm = LayerNorm(d)
        self.enc_class = Linear(d, 1, rng)
        self.enc_box = MLP([d, d, 4], rng)
        self.enc_iou = Linear(d, 1, rng)
        self.query_pos = MLP([4, 2 * d, d], rng)
        self.level_embed = parameter(rng.normal(0, 0.1, size=(3, d)))
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.num_decoder_layers)]
        self.dec_class = [Linear(d, 1, rng) for _ in range(cfg.num_decoder_layers)]
        self.dec_box = [MLP([d, d, 4], rng) for _ in range(cfg.num_decoder_layers)]
        self.dec_iou = [Linear(d, 1, rng) for _ in range(cfg.num_decoder_layers)]
        # start as a plain anchor detector: proposal deltas and refinements begin at zero
        for head in [self.enc_box] + self.dec_box:
            zero_(head.layers[-1])
        prior = float(inverse_sigmoid(np.array(0.01)))
        for head in [self.enc_class] + self.dec_class:
            head.bias.data[:] = prior
        s = cfg.input_size
        shapes = [(s // 8, s // 8), (s // 16, s // 16), (s // 32, s // 32)]
        self._anchor_logits = inverse_sigmoid(level_anchors(shapes)).astype(np.float32)
        self._memory_pos = np.concatenate([sincos_position_encoding(h, w, d) for h, w in shapes])
        self._level_id = np.concatenate([np.full(h * w, i) for i, (h, w) in enumerate(shapes)])
        self.forward_count = 0

    def encode(self, images) -> FeaturePyramid:
        x = to_nchw(images)
        if x.shape[2:] != (self.cfg.input_size, self.cfg.input_size):
            raise ValueError(f"expected {self.cfg.input_size}x{self.cfg.input_size} input, got {x.shape[2:]}")
        pyr = self.backbone(x)
        pyr = FeaturePyramid(pyr.s3, pyr.s4, self.aifi(pyr.s5))
        return self.ccff(pyr)

    def forward(self, images) -> DetectorOutput:
        self.forward_count += 1
        pyr = self.encode(images)
        b, d = pyr.s3.shape[:2]
        memory = ops.concat([lvl.reshape(b, d, -1) for lvl in pyr.levels()], axis=2).transpose(1, 2)
        memory = memory + ops.take(self.level_embed, self._level_id, axis=0)
        enc = self.enc_norm(self.enc_proj(memory))
        enc_cls = self.enc_class(enc)
        enc_iou = self.enc_iou(enc)[..., 0]
        enc_box_logit = self.enc_box(enc) + Tensor(self._anchor_logits.astype(memory.dtype))
        scores = selection_scores(enc_cls.data, enc_iou.data)
        idx = select_queries(scores, self.cfg.num_queries)
        flat = idx + (np.arange(b) * enc.shape[1])[:, None]

        def gather(t: Tensor) -> Tensor:
            lead = t.shape[:2]
            rest = t.shape[2:]
            return ops.take(t.reshape((lead[0] * lead[1],) + rest), flat.reshape(-1), axis=0).reshape((b, self.cfg.num_queries) + rest)

        sel_box_logit = gather(enc_box_logit)
        outputs = [LayerOutput(ops.sigmoid(sel_box_logit), gather(enc_cls), gather(enc_iou))]
        tgt = gather(enc).detach()
        ref = sel_box_logit.detach()
        mem_pos = Tensor(self._memory_pos.astype(memory.dtype))
        for layer, cls_head, box_head, iou_head in zip(self.layers, self.dec_class, self.dec_box, self.dec_iou):
            qpos = self.query_pos(ops.sigmoid(ref))
            tgt = layer(tgt, qpos, memory, mem_pos)
            new_ref = ref + box_head(tgt)
            outputs.append(LayerOutput(ops.sigmoid(new_ref), cls_head(tgt), iou_head(tgt)[..., 0]))
            ref = new_ref.detach()
        return DetectorOutput(outputs, idx)

    def predict(self, images, batch_size: int = 32) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per image: (scores (K,), boxes (K, 4) normalized cxcywh), sorted by descending score."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        res = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out = self.forward(images[i : i + batch_size]).final
                probs = ops._sigmoid_np(out.class_logits.data[..., 0])
                for p, bx in zip(probs, out.boxes.data):
                    order = np.argsort(-p, kind="stable")
                    res.append((p[order].astype(np.float64), bx[order].astype(np.float64)))
        return res

    def hyper(self) -> dict:
        return {"model": "rtdetr-detector", "config": asdict(self.cfg)}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def boxes_to_records(image_id: str, scores: np.ndarray, boxes_cxcywh: np.ndarray, size: int) -> list[DetectionRecord]:
    """Normalized cxcywh predictions -> pixel xyxy records, clipped to the frame; empty boxes dropped."""
    xyxy = np.clip(cxcywh_to_xyxy(boxes_cxcywh) * size, 0, size)
    recs = []
    for s, b in zip(scores, xyxy):
        if b[2] > b[0] and b[3] > b[1]:
            recs.append(DetectionRecord(image_id, float(s), tuple(float(v) for v in b)))
    return recs


def evaluate_ap50(model: RTDETR, images: np.ndarray, targets: list[np.ndarray]) -> float:
    size = model.cfg.input_size
    preds = model.predict(images)
    records, gts = [], {}
    for i, ((scores, boxes), tgt) in enumerate(zip(preds, targets)):
        iid = f"{i:06d}"
        records += boxes_to_records(iid, scores, boxes, size)
        gts[iid] = cxcywh_to_xyxy(np.asarray(tgt).reshape(-1, 4)) * size
    return ap_at(records, gts, 0.5)


@dataclass
class DetectorTrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_max: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    seed: int = 0
    weights: LossWeights = LossWeights()


@dataclass
class DetEpochRow:
    epoch: int
    lr: float
    train_loss: float
    val_ap50: float


def train_detector(
    images: np.ndarray,
    targets: list[np.ndarray],
    cfg: DetectorConfig = DetectorConfig(),
    train_cfg: DetectorTrainConfig = DetectorTrainConfig(),
    val_images: np.ndarray | None = None,
    val_targets: list[np.ndarray] | None = None,
    batch_transform=None,
) -> tuple[RTDETR, list[DetEpochRow]]:
    """Train on bleeding frames; ``targets[i]`` is an (M_i, 4) normalized cxcywh array with M_i >= 1."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty detection training set")
    if any(len(np.asarray(t).reshape(-1, 4)) == 0 for t in targets):
        raise ValueError("every detector training frame needs at least one box")
    model = RTDETR(cfg, seed=train_cfg.seed)
    opt = AdamW(model.parameters(), weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed + 1)
    n = len(images)
    steps_per_epoch = int(np.ceil(n / train_cfg.batch_size))
    total = train_cfg.epochs * steps_per_epoch
    warmup = min(train_cfg.warmup_steps, max(total - 1, 0))
    sched = LRSchedule(train_cfg.lr_max, train_cfg.lr_min, total)
    step = 0
    rows = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        lr = sched.lr_max
        for s in range(steps_per_epoch):
            idx = order[s * train_cfg.batch_size : (s + 1) * train_cfg.batch_size]
            xb = images[idx]
            tb = [np.asarray(targets[j]).reshape(-1, 4) for j in idx]
            if batch_transform is not None:
                xb, tb = batch_transform(rng, xb, tb)
            lr = warmup_cosine_lr(step, sched, warmup)
            opt.zero_grad()
            out = model(xb)
            loss = detection_loss(out.layers, tb, train_cfg.weights).total
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite detection loss at epoch {epoch}")
            loss.backward()
            opt.step(lr)
            step += 1
            loss_sum += float(loss.data) * len(idx)
        ap50 = evaluate_ap50(model, val_images, val_targets) if val_images is not None else float("nan")
        rows.append(DetEpochRow(epoch, lr, loss_sum / n, ap50))
        log.info("det epoch %d loss %.4f ap50 %.3f", epoch, loss_sum / n, ap50)
    return model, rows

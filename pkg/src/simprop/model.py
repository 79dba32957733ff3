"""The few-shot segmentation network.

Pipeline: a small trainable conv encoder (stride 8) shared by the support
and query branches, dual foreground/background probe extraction from the
support features, FG/BG attention map generation, attentive fusion with
residual instance-normalized conv blocks, and a shared dilated-conv
pyramid decoder that predicts both the support and the query masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Logit channel 1 is foreground, channel 0 background. Fixed convention,
# recorded in the checkpoint header.
FG_CHANNEL = 1

PROBE_EPS = 1e-6
ATTENTION_EPS = 1e-8


@dataclass(frozen=True)
class EncoderLayer:
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    pool: int = 1  # stride of the average pooling applied after the layer

    def encode_str(self) -> str:
        return f"k{self.kernel}o{self.out_channels}d{self.dilation}p{self.pool}"

    @staticmethod
    def parse(s: str) -> "EncoderLayer":
        import re

        m = re.fullmatch(r"k(\d+)o(\d+)d(\d+)p(\d+)", s)
        if m is None:
            raise ValueError(f"bad encoder layer spec: {s!r}")
        k, o, d, p = map(int, m.groups())
        return EncoderLayer(out_channels=o, kernel=k, dilation=d, pool=p)


def _default_encoder(channels: int) -> tuple[EncoderLayer, ...]:
    # Three pooled conv blocks reach stride 8; the last block is a dilated
    # (rate 2) 3x3 conv at full feature width.
    return (
        EncoderLayer(channels, pool=2),
        EncoderLayer(channels, pool=2),
        EncoderLayer(channels, pool=2),
        EncoderLayer(channels, dilation=2, pool=1),
    )


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    feature_channels: int = 64
    feature_stride: int = 8
    fusion_channels: int | None = None  # width of the fused maps; must equal 2*feature_channels
    aspp_rates: tuple[int, ...] = (1, 2, 4, 8)
    encoder_spec: tuple[EncoderLayer, ...] | None = None
    use_fbaf: bool = True
    map_raw: bool = False  # unnormalized probe pooling (divide by h*w instead of mask area)
    norm_mean: float = 0.5
    norm_std: float = 0.25

    def __post_init__(self):
        if self.fusion_channels is None:
            object.__setattr__(self, "fusion_channels", 2 * self.feature_channels)
        if self.encoder_spec is None:
            object.__setattr__(self, "encoder_spec", _default_encoder(self.feature_channels))
        else:
            object.__setattr__(self, "encoder_spec", tuple(self.encoder_spec))
        object.__setattr__(self, "aspp_rates", tuple(self.aspp_rates))
        self.validate()

    def validate(self) -> None:
        if self.input_size % self.feature_stride:
            raise ValueError(
                f"input_size {self.input_size} not divisible by stride {self.feature_stride}"
            )
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ValueError("aspp_rates must be nonempty and positive")
        if list(self.aspp_rates) != sorted(set(self.aspp_rates)):
            raise ValueError("aspp_rates must be strictly increasing")
        # The fused maps carry the features concatenated with the broadcast
        # foreground probe, and every fusion conv feeds a residual sum with
        # its own input, so the fusion width is pinned to 2*feature_channels.
        if self.fusion_channels != 2 * self.feature_channels:
            raise ValueError(
                f"fusion_channels must equal 2*feature_channels "
                f"({2 * self.feature_channels}), got {self.fusion_channels}"
            )
        stride = 1
        for layer in self.encoder_spec:
            stride *= layer.pool
        if stride != self.feature_stride:
            raise ValueError(
                f"encoder pooling stride {stride} != feature_stride {self.feature_stride}"
            )
        if self.encoder_spec[-1].out_channels != self.feature_channels:
            raise ValueError("last encoder layer must produce feature_channels channels")

    @property
    def feature_size(self) -> int:
        return self.input_size // self.feature_stride

    def header_items(self) -> list[tuple[str, str]]:
        return [
            ("input_size", str(self.input_size)),
            ("feature_channels", str(self.feature_channels)),
            ("feature_stride", str(self.feature_stride)),
            ("fusion_channels", str(self.fusion_channels)),
            ("aspp_rates", ",".join(map(str, self.aspp_rates))),
            ("encoder", ",".join(l.encode_str() for l in self.encoder_spec)),
            ("use_fbaf", "true" if self.use_fbaf else "false"),
            ("map_raw", "true" if self.map_raw else "false"),
            ("norm_mean", repr(self.norm_mean)),
            ("norm_std", repr(self.norm_std)),
            ("fg_channel", str(FG_CHANNEL)),
        ]

    @staticmethod
    def from_header(kv: dict[str, str]) -> "ModelConfig":
        if int(kv.get("fg_channel", FG_CHANNEL)) != FG_CHANNEL:
            raise ValueError("checkpoint uses an unsupported foreground channel convention")
        return ModelConfig(
            input_size=int(kv["input_size"]),
            feature_channels=int(kv["feature_channels"]),
            feature_stride=int(kv["feature_stride"]),
            fusion_channels=int(kv["fusion_channels"]),
            aspp_rates=tuple(int(r) for r in kv["aspp_rates"].split(",")),
            encoder_spec=tuple(EncoderLayer.parse(s) for s in kv["encoder"].split(",")),
            use_fbaf=kv["use_fbaf"] == "true",
            map_raw=kv["map_raw"] == "true",
            norm_mean=float(kv["norm_mean"]),
            norm_std=float(kv["norm_std"]),
        )


@dataclass
class ProbePair:
    fg: Tensor  # length-C foreground probe
    bg: Tensor  # length-C background probe


@dataclass
class AttentionPair:
    fg: Tensor  # (h,w), in [0,1], fg + bg == 1
    bg: Tensor


@dataclass
class DualPrediction:
    query_logits: Tensor  # (2,H,W)
    support_logits: Tensor  # (2,H,W)


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    bound = np.sqrt(1.0 / (cin * k * k))
    return rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)


class ModelParams:
    """All trainable weights, in a fixed canonical declaration order."""

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        self.config = config
        cf = config.fusion_channels
        c = config.feature_channels
        rng = np.random.default_rng(seed)

        def conv(cout, cin, k):
            w = Tensor(_conv_init(rng, cout, cin, k), requires_grad=True)
            b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
            return w, b

        self.encoder: list[tuple[Tensor, Tensor]] = []
        cin = 3
        for layer in config.encoder_spec:
            self.encoder.append(conv(layer.out_channels, cin, layer.kernel))
            cin = layer.out_channels

        conv2_in = cf + 2 if config.use_fbaf else cf
        self.fusion_convs = [conv(cf, cf, 3), conv(cf, conv2_in, 3), conv(cf, cf, 3)]
        self.fusion_norms = [
            (
                Tensor(np.ones(cf, dtype=np.float32), requires_grad=True),
                Tensor(np.zeros(cf, dtype=np.float32), requires_grad=True),
            )
            for _ in range(3)
        ]
        self.aspp = [conv(c, cf, 3) for _ in config.aspp_rates]
        self.head = conv(c, c, 3)
        self.out = conv(2, c, 1)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        items: list[tuple[str, Tensor]] = []
        for i, (w, b) in enumerate(self.encoder):
            items += [(f"encoder.{i}.weight", w), (f"encoder.{i}.bias", b)]
        for i, (w, b) in enumerate(self.fusion_convs):
            items += [(f"fusion.conv{i + 1}.weight", w), (f"fusion.conv{i + 1}.bias", b)]
        for i, (g, b) in enumerate(self.fusion_norms):
            items += [(f"fusion.in{i + 1}.gamma", g), (f"fusion.in{i + 1}.beta", b)]
        for rate, (w, b) in zip(self.config.aspp_rates, self.aspp):
            items += [(f"decoder.aspp.r{rate}.weight", w), (f"decoder.aspp.r{rate}.bias", b)]
        items += [("decoder.head.weight", self.head[0]), ("decoder.head.bias", self.head[1])]
        items += [("decoder.out.weight", self.out[0]), ("decoder.out.bias", self.out[1])]
        return items

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def grads(self) -> list[np.ndarray]:
        return [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.tensors()]

    def copy(self) -> "ModelParams":
        dup = ModelParams.__new__(ModelParams)
        dup.config = self.config
        dup.encoder = [(Tensor(w.data.copy(), True), Tensor(b.data.copy(), True)) for w, b in self.encoder]
        dup.fusion_convs = [
            (Tensor(w.data.copy(), True), Tensor(b.data.copy(), True)) for w, b in self.fusion_convs
        ]
        dup.fusion_norms = [
            (Tensor(g.data.copy(), True), Tensor(b.data.copy(), True)) for g, b in self.fusion_norms
        ]
        dup.aspp = [(Tensor(w.data.copy(), True), Tensor(b.data.copy(), True)) for w, b in self.aspp]
        dup.head = (Tensor(self.head[0].data.copy(), True), Tensor(self.head[1].data.copy(), True))
        dup.out = (Tensor(self.out[0].data.copy(), True), Tensor(self.out[1].data.copy(), True))
        return dup


# ---------------------------------------------------------------------------
# forward graph
# ---------------------------------------------------------------------------


def encode(image: np.ndarray, params: ModelParams) -> Tensor:
    """Encode a (3,H,W) image in [0,1] to (C, H/8, W/8) features."""
    cfg = params.config
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"encode: expected (3,H,W) image, got {image.shape}")
    if image.shape[1] % cfg.feature_stride or image.shape[2] % cfg.feature_stride:
        raise ValueError(
            f"encode: image size {image.shape[1:]} not divisible by {cfg.feature_stride}"
        )
    mean = np.float32(cfg.norm_mean)
    std = np.float32(cfg.norm_std)
    x = Tensor((np.asarray(image, dtype=np.float32) - mean) / std)
    for layer, (w, b) in zip(cfg.encoder_spec, params.encoder):
        pad = layer.dilation * (layer.kernel - 1) // 2
        x = ad.relu(ad.conv2d(x, w, b, dilation=layer.dilation, padding=pad))
        if layer.pool > 1:
            x = ad.avg_pool2d(x, layer.pool)
    return x


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Block-average a (H,W) binary mask down to a soft (h,w) map in [0,1]."""
    mh, mw = mask.shape
    if mh % h or mw % w:
        raise ValueError(f"downsample_mask: {mask.shape} not divisible into {h}x{w} blocks")
    m = np.asarray(mask, dtype=np.float32)
    return m.reshape(h, mh // h, w, mw // w).mean(axis=(1, 3), dtype=np.float32)


def extract_probes(features: Tensor, soft_mask: np.ndarray, raw: bool = False) -> ProbePair:
    """Foreground/background probe vectors from support features and soft mask.

    Default is the mask-area-normalized weighted mean; raw=True divides by
    the full map area instead (scales the probe by the mask fraction).
    """
    m = np.asarray(soft_mask, dtype=np.float32)
    fg = ad.masked_avg_pool(features, m, eps=PROBE_EPS)
    bg = ad.masked_avg_pool(features, np.float32(1.0) - m, eps=PROBE_EPS)
    if raw:
        area = m.size
        fg = ad.mul_scalar(fg, float(m.sum(dtype=np.float32) + np.float32(PROBE_EPS)) / area)
        bg = ad.mul_scalar(
            bg, float((np.float32(1.0) - m).sum(dtype=np.float32) + np.float32(PROBE_EPS)) / area
        )
    return ProbePair(fg=fg, bg=bg)


def kshot_probes(probe_list: Sequence[ProbePair]) -> ProbePair:
    """Elementwise mean of the probe pairs, accumulated in list order."""
    if not probe_list:
        raise ValueError("kshot_probes: empty probe list")
    if len(probe_list) == 1:
        return probe_list[0]
    fg, bg = probe_list[0].fg, probe_list[0].bg
    for p in probe_list[1:]:
        fg = ad.add(fg, p.fg)
        bg = ad.add(bg, p.bg)
    inv = 1.0 / len(probe_list)
    return ProbePair(fg=ad.mul_scalar(fg, inv), bg=ad.mul_scalar(bg, inv))


def _clip01(x: Tensor) -> Tensor:
    # relu(x) - relu(x - 1): bitwise identity on (0,1], exact 0/1 outside
    return ad.add(ad.relu(x), ad.mul_scalar(ad.relu(ad.add_scalar(x, -1.0)), -1.0))


def attention_maps(features: Tensor, probes: ProbePair) -> AttentionPair:
    """FG and BG attention maps: shifted cosine maps, normalized to sum to one.

    The epsilon enters numerator and denominator symmetrically so the two
    maps sum to one at float rounding error even where both shifted cosine
    maps vanish (there each map is exactly 0.5), and swapping the probes
    swaps the maps bitwise. The clip only trims sub-ulp overshoot.
    """
    cf = ad.add_scalar(ad.mul_scalar(ad.cosine_sim_map(features, probes.fg), 0.5), 0.5)
    cb = ad.add_scalar(ad.mul_scalar(ad.cosine_sim_map(features, probes.bg), 0.5), 0.5)
    den = ad.add_scalar(ad.add(cf, cb), 2.0 * ATTENTION_EPS)
    af = _clip01(ad.div(ad.add_scalar(cf, ATTENTION_EPS), den))
    ab = _clip01(ad.div(ad.add_scalar(cb, ATTENTION_EPS), den))
    return AttentionPair(fg=af, bg=ab)


def fuse(
    features: Tensor,
    fg_probe: Tensor,
    attn: AttentionPair | None,
    params: ModelParams,
) -> Tensor:
    """Residual instance-normalized fusion of features, FG probe, and attention maps.

    With attn=None (the FG-only baseline) the attention concatenation of the
    middle block is omitted.
    """
    cfg = params.config
    if cfg.use_fbaf and attn is None:
        raise ValueError("fuse: model was built with attentive fusion, attention maps required")
    (w1, b1), (w2, b2), (w3, b3) = params.fusion_convs
    (g1g, g1b), (g2g, g2b), (g3g, g3b) = params.fusion_norms
    g0 = ad.concat_channels(features, fg_probe)
    g1 = ad.instance_norm(ad.add(ad.conv2d(g0, w1, b1, padding=1), g0), g1g, g1b)
    mid_in = ad.concat_channels(g1, attn.fg, attn.bg) if cfg.use_fbaf else g1
    g2 = ad.instance_norm(ad.add(ad.conv2d(mid_in, w2, b2, padding=1), g1), g2g, g2b)
    return ad.instance_norm(ad.add(ad.conv2d(g2, w3, b3, padding=1), g2), g3g, g3b)


def decode(fused: Tensor, params: ModelParams, out_h: int, out_w: int) -> Tensor:
    """Dilated-conv pyramid plus two conv layers; bilinear resize to (2,out_h,out_w)."""
    cfg = params.config
    acc = None
    for rate, (w, b) in zip(cfg.aspp_rates, params.aspp):
        branch = ad.conv2d(fused, w, b, dilation=rate, padding=rate)
        acc = branch if acc is None else ad.add(acc, branch)
    x = ad.relu(acc)
    x = ad.relu(ad.conv2d(x, params.head[0], params.head[1], padding=1))
    logits = ad.conv2d(x, params.out[0], params.out[1], padding=0)  # linear, 2 channels
    return ad.bilinear_resize(logits, out_h, out_w)


def _support_probes(
    support_imgs: Sequence[np.ndarray],
    support_masks: Sequence[np.ndarray],
    params: ModelParams,
) -> tuple[list[Tensor], ProbePair]:
    cfg = params.config
    feats = []
    probe_list = []
    for img, mask in zip(support_imgs, support_masks, strict=True):
        fs = encode(img, params)
        m = downsample_mask(mask, fs.shape[1], fs.shape[2])
        feats.append(fs)
        probe_list.append(extract_probes(fs, m, raw=cfg.map_raw))
    return feats, kshot_probes(probe_list)


def forward_dual(
    query_img: np.ndarray,
    support_imgs: Sequence[np.ndarray],
    support_masks: Sequence[np.ndarray],
    params: ModelParams,
) -> DualPrediction:
    """Both branches: predict the query mask and the first support's mask."""
    if len(support_imgs) == 0:
        raise ValueError("forward_dual: at least one support pair is required")
    cfg = params.config
    h, w = query_img.shape[1], query_img.shape[2]
    fq = encode(query_img, params)
    s_feats, probes = _support_probes(support_imgs, support_masks, params)
    attn_q = attention_maps(fq, probes) if cfg.use_fbaf else None
    attn_s = attention_maps(s_feats[0], probes) if cfg.use_fbaf else None
    gq = fuse(fq, probes.fg, attn_q, params)
    gs = fuse(s_feats[0], probes.fg, attn_s, params)
    return DualPrediction(
        query_logits=decode(gq, params, h, w),
        support_logits=decode(gs, params, h, w),
    )


def forward_query(
    query_img: np.ndarray,
    support_imgs: Sequence[np.ndarray],
    support_masks: Sequence[np.ndarray],
    params: ModelParams,
) -> Tensor:
    """Query-branch logits only (inference, and training without dual prediction)."""
    if len(support_imgs) == 0:
        raise ValueError("forward_query: at least one support pair is required")
    cfg = params.config
    fq = encode(query_img, params)
    _, probes = _support_probes(support_imgs, support_masks, params)
    attn_q = attention_maps(fq, probes) if cfg.use_fbaf else None
    gq = fuse(fq, probes.fg, attn_q, params)
    return decode(gq, params, query_img.shape[1], query_img.shape[2])


def predict(
    query_img: np.ndarray,
    supports: Sequence[tuple[np.ndarray, np.ndarray]],
    params: ModelParams,
) -> np.ndarray:
    """Binary (H,W) mask for the query; ties resolve to background."""
    with ad.no_grad():
        logits = forward_query(
            query_img, [s for s, _ in supports], [m for _, m in supports], params
        )
    return (logits.data[FG_CHANNEL] > logits.data[1 - FG_CHANNEL]).astype(np.uint8)

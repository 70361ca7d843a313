"""Multi-task network: learnable-weight modality merge, residual CNN encoder,
transformer refinement, segmentation decoder with skips, channel-attention
global feature fusion, and a summarize-and-separate multi-task classifier.

Shape law: stage lambda of the encoder has ``base_channels * 2**(lambda-1)``
channels at ``1 / 2**(lambda-1)`` of the input resolution (three stride-2
halvings), so input dims must be divisible by 8.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .volumes import N_MODALITIES, N_SEG_CLASSES, TASKS

N_DOWN_STAGES = 3


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    n_down_stages: int = N_DOWN_STAGES
    transformer_layers: int = 4
    attention_heads: int = 4
    embed_channels: int = 512
    patch_size: int = 3
    dropout_rate: float = 0.1
    pos_grid: tuple[int, int, int] = (4, 4, 4)
    classifier_hidden: int = 128
    use_global_branch: bool = True
    global_base_channels: int = 0  # 0 -> base_channels // 2
    #: "batch" matches the reference design; "group" is far more stable for
    #: the tiny batches CPU training allows and is the toy default
    norm: str = "batch"
    toy_scale: bool = False

    def __post_init__(self):
        if self.n_down_stages != N_DOWN_STAGES:
            raise ValidationError("the encoder uses exactly three down-sampling stages")
        if self.embed_channels % self.attention_heads != 0:
            raise ValidationError(
                f"embed_channels {self.embed_channels} not divisible by "
                f"{self.attention_heads} heads"
            )
        if self.base_channels < 2:
            raise ValidationError("base_channels must be >= 2")
        if self.norm not in ("batch", "group"):
            raise ValidationError(f"norm must be 'batch' or 'group', got '{self.norm}'")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**N_DOWN_STAGES

    @property
    def global_channels(self) -> int:
        return self.global_base_channels or max(self.base_channels // 2, 2)

    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        """CPU-friendly scale preserving all architectural ratios."""
        kw = dict(
            base_channels=8,
            embed_channels=64,
            classifier_hidden=64,
            dropout_rate=0.1,
            norm="group",
            toy_scale=True,
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "pos_grid" in d:
            d["pos_grid"] = tuple(d["pos_grid"])
        return cls(**d)


def config_fingerprint(config: NetworkConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# modality merge


class ModalityWeights(nn.Module):
    """Trainable per-modality merge weights, positive via softplus."""

    def __init__(self):
        super().__init__()
        self.raw = nn.Parameter(torch.zeros(N_MODALITIES))

    def effective(self) -> torch.Tensor:
        return F.softplus(self.raw)


def merge_modalities(per_modality_features: torch.Tensor, weights: ModalityWeights,
                     presence: torch.Tensor) -> torch.Tensor:
    """Weighted average of per-modality feature maps over present modalities.

    ``per_modality_features`` is [B, 4, C, H, W, D]; ``presence`` is [B, 4].
    Absent modalities contribute to neither numerator nor denominator, so the
    output is invariant to whatever their planes contain.
    """
    if per_modality_features.shape[1] != N_MODALITIES:
        raise ValidationError("expected a 4-modality feature stack")
    pm = presence.to(per_modality_features.dtype)
    w = weights.effective().to(per_modality_features.dtype)
    eff = w[None, :] * pm                                   # [B, 4]
    denom = eff.sum(dim=1)
    if bool((denom <= 0).any()):
        raise ValidationError("at least one modality must be present per sample")
    num = (per_modality_features * eff[:, :, None, None, None, None]).sum(dim=1)
    return num / denom[:, None, None, None, None]


# ---------------------------------------------------------------------------
# building blocks


def _norm3d(channels: int, kind: str) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(min(8, channels), channels)
    return nn.BatchNorm3d(channels)


class ResBlock3d(nn.Module):
    def __init__(self, channels: int, norm: str = "batch"):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.bn1 = _norm3d(channels, norm)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.bn2 = _norm3d(channels, norm)
        self.act = nn.LeakyReLU(0.01, inplace=True)

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.act(y + x)


class DownStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, norm: str = "batch"):
        super().__init__()
        self.down = nn.Conv3d(c_in, c_out, 3, stride=2, padding=1)
        self.bn = _norm3d(c_out, norm)
        self.act = nn.LeakyReLU(0.01, inplace=True)
        self.res = ResBlock3d(c_out, norm)

    def forward(self, x):
        return self.res(self.act(self.bn(self.down(x))))


@dataclass
class FeaturePyramid:
    """Per-stage encoder features plus the transformer-refined bottleneck."""

    stages: list[torch.Tensor]            # F_1 .. F_4, coarser and wider each step
    refined: torch.Tensor | None = None
    fused: torch.Tensor | None = None     # channel-attention fusion with global branch
    per_modality: torch.Tensor | None = None   # stem outputs [B, 4, C, H, W, D]

    def __post_init__(self):
        for i in range(1, len(self.stages)):
            prev, cur = self.stages[i - 1], self.stages[i]
            if cur.shape[1] != 2 * prev.shape[1] or any(
                c * 2 != p for p, c in zip(prev.shape[2:], cur.shape[2:])
            ):
                raise ValidationError(
                    "pyramid shape law violated: channels must double and dims halve "
                    f"between {tuple(prev.shape)} and {tuple(cur.shape)}"
                )

    @property
    def bottleneck(self) -> torch.Tensor:
        return self.stages[-1]


class Encoder(nn.Module):
    """Per-modality stems, weighted merge, then three stride-2 residual stages."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        c = config.base_channels
        self.stems = nn.ModuleList(
            [nn.Conv3d(1, c, 3, padding=1) for _ in range(N_MODALITIES)]
        )
        self.merge_weights = ModalityWeights()
        self.stages = nn.ModuleList(
            [
                DownStage(c * 2**i, c * 2 ** (i + 1), config.norm)
                for i in range(N_DOWN_STAGES)
            ]
        )

    def forward(self, x: torch.Tensor, presence: torch.Tensor) -> FeaturePyramid:
        if any(s % 8 != 0 for s in x.shape[2:]):
            raise ValidationError(f"input dims must be divisible by 8, got {tuple(x.shape[2:])}")
        per_mod = torch.stack(
            [stem(x[:, m : m + 1]) for m, stem in enumerate(self.stems)], dim=1
        )
        merged = merge_modalities(per_mod, self.merge_weights, presence)
        # absent stems are zeroed so downstream pooling respects absence
        masked = per_mod * presence.to(per_mod.dtype)[:, :, None, None, None, None]
        feats = [merged]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return FeaturePyramid(stages=feats, per_modality=masked)


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention with separate q/k/v/out maps."""

    def __init__(self, embed: int, heads: int):
        super().__init__()
        if embed % heads:
            raise ValidationError("embed size must divide evenly across heads")
        self.heads = heads
        self.head_dim = embed // heads
        self.q = nn.Linear(embed, embed)
        self.k = nn.Linear(embed, embed)
        self.v = nn.Linear(embed, embed)
        self.out = nn.Linear(embed, embed)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        B, T, E = tokens.shape
        def split(t):
            return t.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5
        mix = torch.softmax(scores, dim=-1) @ v
        mix = mix.transpose(1, 2).reshape(B, T, E)
        return self.out(mix)


class TransformerBlock(nn.Module):
    def __init__(self, embed: int, heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(embed)
        self.attn = SelfAttention(embed, heads)
        self.ln2 = nn.LayerNorm(embed)
        self.mlp = nn.Sequential(
            nn.Linear(embed, embed * 2),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(embed * 2, embed),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TransformerRefiner(nn.Module):
    """Projects the bottleneck to tokens, adds a positional grid, applies
    pre-norm self-attention blocks, and reshapes back to the spatial grid."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.proj = nn.Conv3d(
            config.bottleneck_channels,
            config.embed_channels,
            config.patch_size,
            stride=1,
            padding=config.patch_size // 2,
        )
        g = config.pos_grid
        self.pos_embed = nn.Parameter(
            0.02 * torch.randn(1, config.embed_channels, g[0], g[1], g[2])
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_channels, config.attention_heads, config.dropout_rate)
            for _ in range(config.transformer_layers)
        )
        self.norm = nn.LayerNorm(config.embed_channels)

    def positional(self, grid) -> torch.Tensor:
        pe = self.pos_embed
        if tuple(pe.shape[2:]) != tuple(grid):
            pe = F.interpolate(pe, size=tuple(grid), mode="trilinear", align_corners=False)
        return pe

    def refine_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def forward(self, bottleneck: torch.Tensor) -> torch.Tensor:
        B, _, h, w, d = bottleneck.shape
        if h * w * d < 1:
            raise ValidationError("bottleneck must contain at least one token")
        x = self.proj(bottleneck) + self.positional((h, w, d))
        tokens = x.flatten(2).transpose(1, 2)          # [B, T, E]
        tokens = self.refine_tokens(tokens)
        return tokens.transpose(1, 2).reshape(B, -1, h, w, d)


class UpStage(nn.Module):
    """1x1x1 reduction, 2x upsample, 3x3x3 conv; skip added by the decoder."""

    def __init__(self, c_in: int, c_out: int, dropout: float, norm: str = "batch"):
        super().__init__()
        self.reduce = nn.Conv3d(c_in, c_out, 1)
        self.conv = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.bn = _norm3d(c_out, norm)
        self.act = nn.LeakyReLU(0.01, inplace=True)
        self.drop = nn.Dropout3d(dropout)

    def forward(self, x, skip=None):
        x = self.reduce(x)
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        x = self.act(self.bn(self.conv(x)))
        if skip is not None:
            x = x + skip
        return self.drop(x)


class Decoder(nn.Module):
    def __init__(self, config: NetworkConfig, in_channels: int | None = None):
        super().__init__()
        c = config.base_channels
        top = in_channels if in_channels is not None else config.embed_channels
        self.up3 = UpStage(top, 4 * c, config.dropout_rate, config.norm)
        self.up2 = UpStage(4 * c, 2 * c, config.dropout_rate, config.norm)
        self.up1 = UpStage(2 * c, c, config.dropout_rate, config.norm)
        self.head = nn.Sequential(
            nn.Conv3d(c, c, 3, padding=1),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(c, N_SEG_CLASSES, 1),
        )

    def forward(self, top: torch.Tensor, pyramid: FeaturePyramid):
        f1, f2, f3 = pyramid.stages[0], pyramid.stages[1], pyramid.stages[2]
        d3 = self.up3(top, f3)
        d2 = self.up2(d3, f2)
        d1 = self.up1(d2, f1)
        return self.head(d1), d3


class ChannelAttentionFusion(nn.Module):
    """Recalibrates concatenated backbone+global features with channel attention."""

    def __init__(self, backbone_channels: int, global_channels: int, reduction: int = 4):
        super().__init__()
        total = backbone_channels + global_channels
        hidden = max(total // reduction, 4)
        self.mlp = nn.Sequential(
            nn.Linear(total, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, total)
        )
        self.restore = nn.Conv3d(total, backbone_channels, 1)

    def forward(self, backbone: torch.Tensor, global_feats: torch.Tensor) -> torch.Tensor:
        if backbone.shape[2:] != global_feats.shape[2:]:
            raise ValidationError(
                f"fusion inputs must be spatially aligned: {tuple(backbone.shape)} vs "
                f"{tuple(global_feats.shape)}"
            )
        cat = torch.cat([backbone, global_feats], dim=1)
        gap = cat.mean(dim=(2, 3, 4))
        gmp = cat.amax(dim=(2, 3, 4))
        a = torch.sigmoid(self.mlp(gap) + self.mlp(gmp))
        return self.restore(cat * a[:, :, None, None, None])


class MultiTaskClassifier(nn.Module):
    """GAP+GMP pooling of multi-level feature maps into a shared summarize
    trunk and four separate heads.

    Maps of different spatial sizes are pooled before concatenation, so the
    classifier can mix shallow intensity statistics with deep semantics.  A
    nonnegative per-channel scale (complementary feature dropout) commutes
    with both poolings and is applied to the pooled vectors.
    """

    def __init__(self, in_channels: int, hidden: int, dropout: float):
        super().__init__()
        self.in_channels = in_channels
        # no normalization here (the pooled mix of shallow and deep statistics
        # must keep its natural scales) and leaky activations throughout: with
        # plain ReLU the summarize units can die en masse early in multi-task
        # training and the heads collapse to the class prior
        self.trunk = nn.Sequential(
            nn.Linear(2 * in_channels, hidden),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Dropout(dropout),
        )
        self.heads = nn.ModuleDict(
            {
                task: nn.Sequential(
                    nn.Linear(hidden, hidden // 2),
                    nn.LeakyReLU(0.01, inplace=True),
                    nn.Dropout(dropout),
                    nn.Linear(hidden // 2, 2),
                )
                for task in TASKS
            }
        )
        # zero-initialized linear readout straight off the pooled statistics;
        # without it, separable pooled dims reach the logits only through two
        # layers of small random weights and saturate far too slowly for a
        # desk-scale step budget
        self.direct = nn.ModuleDict(
            {task: nn.Linear(2 * in_channels, 2) for task in TASKS}
        )
        for lin in self.direct.values():
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, feature_maps, channel_scale: torch.Tensor | None = None):
        if isinstance(feature_maps, torch.Tensor):
            feature_maps = [feature_maps]
        gap = torch.cat([m.mean(dim=(2, 3, 4)) for m in feature_maps], dim=1)
        gmp = torch.cat([m.amax(dim=(2, 3, 4)) for m in feature_maps], dim=1)
        if channel_scale is not None:
            gap = gap * channel_scale[None, :]
            gmp = gmp * channel_scale[None, :]
        pooled = torch.cat([gap, gmp], dim=1)
        summary = self.trunk(pooled)
        logits = {
            task: head(summary) + self.direct[task](pooled)
            for task, head in self.heads.items()
        }
        probs = {task: torch.softmax(lg, dim=1) for task, lg in logits.items()}
        return logits, probs


class GlobalBranch(nn.Module):
    """Shrunken encoder/decoder over the 2x downsampled full volume."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        cfg = NetworkConfig(
            base_channels=config.global_channels,
            transformer_layers=config.transformer_layers,
            attention_heads=config.attention_heads,
            embed_channels=config.embed_channels,
            dropout_rate=config.dropout_rate,
            use_global_branch=False,
            norm=config.norm,
        )
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg, in_channels=cfg.bottleneck_channels)

    def forward(self, x: torch.Tensor, presence: torch.Tensor):
        small = F.avg_pool3d(x, kernel_size=2)
        pyramid = self.encoder(small, presence)
        seg_logits, _ = self.decoder(pyramid.bottleneck, pyramid)
        return pyramid.bottleneck, seg_logits


@dataclass
class TaskPredictions:
    """Inference output: softmax segmentation volume + per-task probability pairs."""

    seg_probs: np.ndarray                       # [4, H, W, D]
    class_probs: dict[str, np.ndarray]          # task -> [2]

    def __post_init__(self):
        sums = self.seg_probs.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-5):
            raise ValidationError("segmentation probabilities must sum to 1 per voxel")
        for task, vec in self.class_probs.items():
            if abs(float(np.sum(vec)) - 1.0) > 1e-5 or (np.asarray(vec) < 0).any():
                raise ValidationError(f"class probabilities for '{task}' must form a distribution")


class GliomaMultiTaskNet(nn.Module):
    """Full architecture; ``forward`` returns a dict of tensors keyed by output."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.refiner = TransformerRefiner(config)
        self.decoder = Decoder(config)
        # pooled classifier inputs: bottleneck + refined (+ fused) + merged stem
        # + per-modality stems + raw input planes; the shallow levels keep
        # intensity statistics that deep normalized features wash out
        cls_channels = (
            config.bottleneck_channels
            + config.embed_channels
            + (N_MODALITIES + 1) * config.base_channels
            + N_MODALITIES
        )
        if config.use_global_branch:
            self.global_branch = GlobalBranch(config)
            self.fusion = ChannelAttentionFusion(
                config.embed_channels, config.global_channels * 2**N_DOWN_STAGES
            )
            cls_channels += config.embed_channels
        else:
            self.global_branch = None
            self.fusion = None
        self.classifier = MultiTaskClassifier(
            cls_channels, config.classifier_hidden, config.dropout_rate
        )

    def classifier_features(self, pyramid: FeaturePyramid, x: torch.Tensor,
                            presence: torch.Tensor) -> list[torch.Tensor]:
        parts = [pyramid.bottleneck, pyramid.refined]
        if pyramid.fused is not None:
            parts.append(pyramid.fused)
        parts.append(pyramid.stages[0])
        pm = pyramid.per_modality
        parts.extend(pm[:, m] for m in range(pm.shape[1]))
        parts.append(x * presence.to(x.dtype)[:, :, None, None, None])
        return parts

    def encode(self, x: torch.Tensor, presence: torch.Tensor) -> FeaturePyramid:
        return self.encoder(x, presence)

    def encode_pooled(self, x: torch.Tensor, presence: torch.Tensor) -> torch.Tensor:
        """GAP of the encoder bottleneck; the contrastive-branch embedding."""
        pyramid = self.encoder(x, presence)
        return pyramid.bottleneck.mean(dim=(2, 3, 4))

    def forward(
        self,
        x: torch.Tensor,
        presence: torch.Tensor,
        channel_scale: torch.Tensor | None = None,
    ) -> dict:
        pyramid = self.encoder(x, presence)
        pyramid.refined = self.refiner(pyramid.bottleneck)

        global_seg_logits = None
        if self.global_branch is not None:
            g_bottleneck, global_seg_logits = self.global_branch(x, presence)
            g_up = F.interpolate(
                g_bottleneck, size=pyramid.refined.shape[2:], mode="trilinear",
                align_corners=False,
            )
            pyramid.fused = self.fusion(pyramid.refined, g_up)

        # the recalibrated fusion output replaces the refined bottleneck as the
        # decoder input, so global features join the backbone pipeline
        top = pyramid.fused if pyramid.fused is not None else pyramid.refined
        seg_logits, decoder_first = self.decoder(top, pyramid)
        cls_maps = self.classifier_features(pyramid, x, presence)
        class_logits, class_probs = self.classifier(cls_maps, channel_scale)

        return {
            "seg_logits": seg_logits,
            "seg_probs": torch.softmax(seg_logits, dim=1),
            "class_logits": class_logits,
            "class_probs": class_probs,
            "global_seg_logits": global_seg_logits,
            "taps": {
                "encoder_first": pyramid.stages[0],
                "encoder_last": pyramid.bottleneck,
                "decoder_first": decoder_first,
            },
            "pyramid": pyramid,
        }

    def forward_two_stream(self, x, presence, rate: float, generator: torch.Generator):
        """One encoder pass classified through two complementary channel streams."""
        from .semi_supervised import complementary_feature_dropout

        pyramid = self.encoder(x, presence)
        pyramid.refined = self.refiner(pyramid.bottleneck)
        if self.global_branch is not None:
            g_bottleneck, _ = self.global_branch(x, presence)
            g_up = F.interpolate(
                g_bottleneck, size=pyramid.refined.shape[2:], mode="trilinear",
                align_corners=False,
            )
            pyramid.fused = self.fusion(pyramid.refined, g_up)
        cls_maps = self.classifier_features(pyramid, x, presence)
        ones = torch.ones(self.classifier.in_channels)
        stream_a, stream_b = complementary_feature_dropout(ones, rate, generator)
        out_a = self.classifier(cls_maps, stream_a)
        out_b = self.classifier(cls_maps, stream_b)
        return out_a, out_b

    def set_mc_mode(self, enabled: bool = True):
        """Eval mode with dropout layers kept stochastic (MC-Dropout)."""
        self.eval()
        if enabled:
            for m in self.modules():
                if isinstance(m, (nn.Dropout, nn.Dropout3d)):
                    m.train()
        return self

    def predictions(self, outputs: dict, index: int = 0) -> TaskPredictions:
        return TaskPredictions(
            seg_probs=outputs["seg_probs"][index].detach().numpy(),
            class_probs={
                t: p[index].detach().numpy() for t, p in outputs["class_probs"].items()
            },
        )


def presence_tensor(presence, batch: int = 1) -> torch.Tensor:
    """[B, 4] boolean presence tensor from one presence tuple or a list of them."""
    arr = np.asarray(presence, dtype=bool)
    if arr.ndim == 1:
        arr = np.tile(arr, (batch, 1))
    return torch.from_numpy(arr)


def volume_tensor(voxels: np.ndarray) -> torch.Tensor:
    """[1, 4, H, W, D] float tensor from a volume's modality-major array."""
    return torch.tensor(np.ascontiguousarray(voxels), dtype=torch.float32)[None]

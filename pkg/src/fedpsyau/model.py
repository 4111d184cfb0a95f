"""The micro-expression recognition network and its losses.

Pipeline per sample::

    ROI flow patches --LFE--> +pos. embedding --SSE--> per-ROI features Z
    Z --group gather--> GSE --AFE--> 12 AU node features
    AU nodes --upper/lower DPK-GAT--> h_local --cross-region DPK-GAT--> h_global
    (h_global, global flow map) --dual-stream inception--> emotion logits

Two auxiliary AU heads read the AFE output and the global GAT output.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .nn import Conv2d, ConvBNReLU, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .priors import AuCatalog, PriorPack, mask_intra_region

ROI_SHAPE = (3, 5, 5)
TOKEN_WIDTH = 75


@dataclass(frozen=True)
class LossWeights:
    ce: float = 0.2
    au_afe: float = 0.8
    au_gat: float = 0.8

    def __post_init__(self):
        if min(self.ce, self.au_afe, self.au_gat) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 3
    of_size: int = 32
    lfe_channels: tuple[int, int] = (32, 64)
    sse_heads: int = 3
    sse_ffn: int = 150
    gat_width: int = 64
    gat_heads: int = 3
    gat_layers: int = 2
    inception_channels: tuple[int, int, int, int] = (8, 8, 8, 8)
    inception_blocks: int = 2
    prior_mode: str = "both"
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def scaled(self, **overrides) -> "ModelConfig":
        return replace(self, **overrides)


class Output(NamedTuple):
    logits: Tensor
    au_afe: Tensor
    au_gat: Tensor


# ------------------------------------------------------------------ LRM


class LFE(Module):
    """Three 3x3 conv + batch-norm + ReLU layers; 3 -> c1 -> c2 -> 3 channels."""

    def __init__(self, channels, rng):
        super().__init__()
        c1, c2 = channels
        self.layers = [ConvBNReLU(3, c1, 3, rng), ConvBNReLU(c1, c2, 3, rng), ConvBNReLU(c2, 3, 3, rng)]

    def forward(self, theta: Tensor) -> Tensor:
        if theta.ndim != 4 or theta.shape[1:] != ROI_SHAPE:
            raise DimensionError(f"LFE expects (N, 3, 5, 5) patches, got {theta.shape}")
        x = theta
        for layer in self.layers:
            x = layer(x)
        return x


class SSE(Module):
    """Transformer encoder block over ROI tokens with learned positional embeddings."""

    def __init__(self, n_tokens, heads, ffn, rng):
        super().__init__()
        self.n_tokens = n_tokens
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(n_tokens, TOKEN_WIDTH)))
        self.attn = MultiHeadAttention(TOKEN_WIDTH, heads, rng)
        self.norm1 = LayerNorm(TOKEN_WIDTH)
        self.ff1 = Linear(TOKEN_WIDTH, ffn, rng)
        self.ff2 = Linear(ffn, TOKEN_WIDTH, rng)
        self.norm2 = LayerNorm(TOKEN_WIDTH)

    def forward(self, phi: Tensor) -> Tensor:
        if phi.ndim != 3 or phi.shape[1:] != (self.n_tokens, TOKEN_WIDTH):
            raise ContractError(f"SSE expects (B, {self.n_tokens}, {TOKEN_WIDTH}) tokens, got {phi.shape}")
        x = phi + self.pos
        y = self.norm1(x + self.attn(x))
        return self.norm2(y + self.ff2(ad.relu(self.ff1(y))))


# ------------------------------------------------------------------ AFR


class GSE(Module):
    """Channel attention per ROI in a group, ``W_att * Z + Z``.

    ``force_weights`` pins the attention to a constant, which the tests use
    to probe the residual arithmetic.
    """

    def __init__(self, rng):
        super().__init__()
        self.fc = Linear(3, 3, rng)
        self.force_weights = None
        self.last_weights = None

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 5 or z.shape[1] == 0 or z.shape[2:] != ROI_SHAPE:
            raise ContractError(f"GSE expects a non-empty (B, N_g, 3, 5, 5) group, got {z.shape}")
        b, n = z.shape[:2]
        if self.force_weights is not None:
            w = Tensor(np.full((b, n, 3), float(self.force_weights)))
        else:
            w = ad.sigmoid(self.fc(ad.mean(z, axis=(3, 4))))
        self.last_weights = w.data
        return z * w.reshape(b, n, 3, 1, 1) + z


class AFE(Module):
    """Reduce a group's N_g ROI features to its N_gAU AU node features.

    The N_g features are stacked on the channel axis; a 3x3 conv doubles
    the channel count and a 1x1 conv maps to 3 * N_gAU channels.
    """

    def __init__(self, n_rois, n_aus, rng):
        super().__init__()
        self.n_rois, self.n_aus = n_rois, n_aus
        self.expand = ConvBNReLU(3 * n_rois, 6 * n_rois, 3, rng)
        self.reduce = ConvBNReLU(6 * n_rois, 3 * n_aus, 1, rng)

    def forward(self, r: Tensor) -> Tensor:
        b = r.shape[0]
        if r.shape[1:] != (self.n_rois,) + ROI_SHAPE:
            raise DimensionError(f"AFE expects (B, {self.n_rois}, 3, 5, 5), got {r.shape}")
        x = self.reduce(self.expand(r.reshape(b, 3 * self.n_rois, 5, 5)))
        return x.reshape(b, self.n_aus, TOKEN_WIDTH)


def _check_priors(A: np.ndarray, D: np.ndarray, n: int):
    if A.shape != (n, n) or D.shape != (n, n):
        raise DimensionError(f"priors of shape {A.shape}/{D.shape} for {n} nodes")
    if np.any((D != 0) & (A == 0)):
        raise ContractError("attention prior D has mass outside the adjacency support")


class DPKGATLayer(Module):
    """Graph attention with a psychological mask and a data-driven prior.

    Per head: ``f = x W``; ``e_ij = LeakyReLU(a_src.f_i + a_dst.f_j)`` on
    edges of ``A`` (others -inf); ``alpha = (1 - beta) softmax(e) + beta D``;
    ``h_i = ELU(sum_j alpha_ij f_j) + f_i``. Heads are concatenated, or
    averaged when ``concat`` is false.
    """

    def __init__(self, n_in, width, heads, rng, concat=True, slope=ad.LEAKY_SLOPE):
        super().__init__()
        self.heads, self.width, self.concat, self.slope = heads, width, concat, slope
        limit = np.sqrt(6.0 / (n_in + width))
        self.weight = Parameter(rng.uniform(-limit, limit, size=(heads, n_in, width)))
        limit = np.sqrt(6.0 / (width + 1))
        self.att_src = Parameter(rng.uniform(-limit, limit, size=(heads, width, 1)))
        self.att_dst = Parameter(rng.uniform(-limit, limit, size=(heads, width, 1)))
        self.last_alpha = None

    @property
    def out_width(self):
        return self.heads * self.width if self.concat else self.width

    def forward(self, x: Tensor, A: np.ndarray, D: np.ndarray, beta: float) -> Tensor:
        b, n, _ = x.shape
        _check_priors(A, D, n)
        if not 0.0 <= beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {beta}")
        f = ad.matmul(x.reshape(b, 1, n, x.shape[2]), self.weight)  # b h n w
        src = ad.matmul(f, self.att_src)
        dst = ad.transpose(ad.matmul(f, self.att_dst), (0, 1, 3, 2))
        e = ad.leaky_relu(src + dst, self.slope)
        alpha = ad.masked_softmax(e, A > 0)
        if beta > 0.0:
            alpha = alpha * (1.0 - beta) + Tensor(beta * D)
        self.last_alpha = alpha.data
        h = ad.elu(ad.matmul(alpha, f)) + f
        if self.concat:
            return ad.transpose(h, (0, 2, 1, 3)).reshape(b, n, self.heads * self.width)
        return ad.mean(h, axis=1)


class GATStack(Module):
    """``layers`` DPK-GAT layers; hidden layers concatenate heads, the last averages."""

    def __init__(self, n_in, width, heads, layers, rng):
        super().__init__()
        self.layers = []
        for k in range(layers):
            last = k == layers - 1
            layer = DPKGATLayer(n_in, width, heads, rng, concat=not last)
            self.layers.append(layer)
            n_in = layer.out_width

    @property
    def out_width(self):
        return self.layers[-1].out_width

    def forward(self, x, A, D, beta):
        for layer in self.layers:
            x = layer(x, A, D, beta)
        return x


class AFR(Module):
    """Upper/lower-face GATs in parallel, then a cross-region GAT over all nodes."""

    def __init__(self, catalog: AuCatalog, cfg: ModelConfig, rng):
        super().__init__()
        self.upper_idx = catalog.region_indices("upper")
        self.lower_idx = catalog.region_indices("lower")
        self.local_order = np.concatenate([self.upper_idx, self.lower_idx])
        self.catalog = catalog
        self.upper = GATStack(TOKEN_WIDTH, cfg.gat_width, cfg.gat_heads, cfg.gat_layers, rng)
        self.lower = GATStack(TOKEN_WIDTH, cfg.gat_width, cfg.gat_heads, cfg.gat_layers, rng)
        self.glob = GATStack(self.upper.out_width, cfg.gat_width, cfg.gat_heads, cfg.gat_layers, rng)

    def set_priors(self, pack: PriorPack):
        self._upper_pack = pack.restrict(self.upper_idx)
        self._lower_pack = pack.restrict(self.lower_idx)
        # cross-region pack, reordered to h_local's node order
        self._global_pack = mask_intra_region(pack, self.catalog).restrict(self.local_order)

    def forward(self, F: Tensor, beta: float) -> tuple[Tensor, Tensor]:
        up, lo, gl = self._upper_pack, self._lower_pack, self._global_pack
        h_up = self.upper(ad.take(F, self.upper_idx, axis=1), up.A, up.D, beta)
        h_lo = self.lower(ad.take(F, self.lower_idx, axis=1), lo.A, lo.D, beta)
        h_local = ad.concat([h_up, h_lo], axis=1)
        return h_local, self.glob(h_local, gl.A, gl.D, beta)


# ------------------------------------------------------------------ DSI


class Inception(Module):
    """Four parallel branches (1x1, 3x3, 5x5, 3x3 max-pool + 1x1) concatenated on channels."""

    def __init__(self, c_in, channels, rng):
        super().__init__()
        c1, c3, c5, cp = channels
        self.b1 = Conv2d(c_in, c1, 1, rng)
        self.b3 = Conv2d(c_in, c3, 3, rng)
        self.b5 = Conv2d(c_in, c5, 5, rng)
        self.bp = Conv2d(c_in, cp, 1, rng)
        self.out_channels = c1 + c3 + c5 + cp

    def forward(self, x):
        branches = [self.b1(x), self.b3(x), self.b5(x), self.bp(ad.max_pool2d(x, 3, 1))]
        return ad.relu(ad.concat(branches, axis=1))


class InceptionStream(Module):
    def __init__(self, c_in, channels, blocks, rng):
        super().__init__()
        self.blocks = []
        for _ in range(blocks):
            blk = Inception(c_in, channels, rng)
            self.blocks.append(blk)
            c_in = blk.out_channels

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return ad.flatten(x)


class DSI(Module):
    """Dual-stream inception classifier over ``h_global`` and the global flow map."""

    def __init__(self, n_nodes, node_width, cfg: ModelConfig, rng):
        super().__init__()
        self.n_nodes, self.node_width, self.of_size = n_nodes, node_width, cfg.of_size
        self.au_stream = InceptionStream(1, cfg.inception_channels, cfg.inception_blocks, rng)
        self.of_stream = InceptionStream(3, cfg.inception_channels, cfg.inception_blocks, rng)
        c = sum(cfg.inception_channels)
        c_au, c_of = (c, c) if cfg.inception_blocks else (1, 3)
        n_feat = c_au * n_nodes * node_width + c_of * cfg.of_size**2
        self.fc = Linear(n_feat, cfg.n_classes, rng)

    def forward(self, h_global: Tensor, of: Tensor) -> Tensor:
        b = h_global.shape[0]
        if h_global.shape[1:] != (self.n_nodes, self.node_width):
            raise DimensionError(f"DSI: h_global {h_global.shape} vs ({self.n_nodes}, {self.node_width})")
        if of.shape != (b, 3, self.of_size, self.of_size):
            raise DimensionError(f"DSI: flow map {of.shape} vs (B, 3, {self.of_size}, {self.of_size})")
        au = self.au_stream(h_global.reshape(b, 1, self.n_nodes, self.node_width))
        return self.fc(ad.concat([au, self.of_stream(of)], axis=1))


# ------------------------------------------------------------------ losses


def au_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over AUs (and batch)."""
    return ad.bce_with_logits(logits, labels)


def mer_loss(ce, la_afe, la_gat, w: LossWeights = LossWeights()):
    """Weighted sum of emotion cross-entropy and the two AU losses."""
    return ce * w.ce + la_afe * w.au_afe + la_gat * w.au_gat


# ------------------------------------------------------------------ network


class MERNet(Module):
    def __init__(self, cfg: ModelConfig, catalog: AuCatalog, priors: PriorPack, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.catalog = catalog
        self.n_rois = catalog.n_rois
        self.lfe = LFE(cfg.lfe_channels, rng)
        self.sse = SSE(self.n_rois, cfg.sse_heads, cfg.sse_ffn, rng)
        self.gse = [GSE(rng) for _ in catalog.groups]
        self.afe = [AFE(len(g.rois), len(g.aus), rng) for g in catalog.groups]
        n_aus = catalog.n_aus
        self.au_head_afe = Linear(3 * n_aus, n_aus, rng)
        self.afr = AFR(catalog, cfg, rng)
        self.au_head_gat = Linear(n_aus * self.afr.glob.out_width, n_aus, rng)
        self.dsi = DSI(n_aus, self.afr.glob.out_width, cfg, rng)
        self.beta = 0.0
        self.set_priors(priors)

    def set_priors(self, priors: PriorPack):
        if priors.n != self.catalog.n_aus:
            raise DimensionError(f"priors over {priors.n} nodes for {self.catalog.n_aus} AUs")
        self.priors = priors
        self.afr.set_priors(priors)

    def set_round(self, t: float):
        """Set the prior-mixing weight from the schedule at round/epoch ``t``."""
        self.beta = self.priors.beta(t)

    def au_features(self, roi: Tensor) -> Tensor:
        b, r = roi.shape[:2]
        if roi.shape[1:] != (self.n_rois,) + ROI_SHAPE:
            raise DimensionError(f"expected (B, {self.n_rois}, 3, 5, 5) ROI patches, got {roi.shape}")
        phi = self.lfe(roi.reshape(b * r, *ROI_SHAPE)).reshape(b, r, TOKEN_WIDTH)
        z = self.sse(phi).reshape(b, r, *ROI_SHAPE)
        feats = []
        for g, gse, afe in zip(self.catalog.groups, self.gse, self.afe):
            feats.append(afe(gse(ad.take(z, g.rois, axis=1))))
        return ad.concat(feats, axis=1)

    def forward(self, roi, of) -> Output:
        roi, of = ad.as_tensor(roi), ad.as_tensor(of)
        b = roi.shape[0]
        F = self.au_features(roi)
        n = self.catalog.n_aus
        au_afe = self.au_head_afe(ad.mean(F.reshape(b, n, 3, 25), axis=3).reshape(b, 3 * n))
        _, h_global = self.afr(F, self.beta)
        au_gat = self.au_head_gat(ad.flatten(h_global))
        return Output(self.dsi(h_global, of), au_afe, au_gat)

    def loss(self, batch) -> tuple[Tensor, dict]:
        out = self.forward(batch.roi, batch.of)
        labels = np.asarray(batch.au, dtype=np.float64)
        ce = ad.cross_entropy(out.logits, batch.emotion)
        la_afe = au_loss(out.au_afe, labels)
        la_gat = au_loss(out.au_gat, labels[:, self.afr.local_order])
        total = mer_loss(ce, la_afe, la_gat, self.cfg.loss_weights)
        return total, {"ce": ce.item(), "au_afe": la_afe.item(), "au_gat": la_gat.item()}

    def predict(self, batch) -> np.ndarray:
        with ad.no_grad():
            return self.forward(batch.roi, batch.of).logits.data.argmax(axis=1)

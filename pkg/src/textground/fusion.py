"""Multimodal branch: cross-attention fusion of spatial text into visual
features, deformable feature alignment on the later stages, and extraction
of the spatial guidance map.

The deformable path samples attention queries at learned offset positions
on a strided reference grid, modulates each sampled row by a learned scalar,
completes the score matrix at unsampled positions by distance-weighted,
cardinality-modulated interpolation, and only then applies the key softmax.
With zero offsets, unit modulation, and stride 1 the whole pipeline reduces
exactly to plain cross-attention, which the tests pin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError
from .nn import Linear, ParameterRegistry, TransformerBlock, sinusoidal_positional_encoding, split_heads, merge_heads

__all__ = [
    "TextEmbedding",
    "DfaStageConfig",
    "FusionConfig",
    "FusionStage",
    "FusionBranch",
    "make_reference_grid",
    "bilinear_sample",
    "bilinear_sample_many",
    "resize_bilinear",
    "complete_attention",
    "extract_guidance_map",
    "DFA_GAMMA",
    "DFA_MAX_OFFSET",
    "DFA_RANGE",
]

# Stage 2..4 deformation schedule: sampling stride, offset bound, completion range.
DFA_GAMMA = (4, 2, 1)
DFA_MAX_OFFSET = (8.0, 4.0, 2.0)
DFA_RANGE = (8.0, 4.0, 2.0)


@dataclass
class TextEmbedding:
    """Token embeddings split into an appearance span and a spatial span.

    Spans are half-open [start, stop) index ranges into the token axis;
    together they cover every token and never overlap.
    """

    data: Tensor  # [T, C_L]
    appearance: tuple[int, int]
    spatial: tuple[int, int]

    def __post_init__(self):
        self.data = ad.as_tensor(self.data)
        t = self.data.shape[0]
        a, s = self.appearance, self.spatial
        spans = sorted([a, s])
        if not (spans[0][0] == 0 and spans[0][1] == spans[1][0] and spans[1][1] == t
                and spans[0][0] <= spans[0][1] and spans[1][0] <= spans[1][1]):
            raise DataError(f"appearance {a} and spatial {s} spans must be disjoint and cover all {t} tokens")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def appearance_tokens(self) -> Tensor:
        lo, hi = self.appearance
        return self.data[lo:hi, :]

    def spatial_tokens(self) -> Tensor:
        lo, hi = self.spatial
        return self.data[lo:hi, :]


@dataclass(frozen=True)
class DfaStageConfig:
    """Deformation geometry for one stage.

    ``completion_range`` must cover the sampling stride so a zero-offset
    field still leaves every unsampled cell at least one neighbor.
    """

    gamma: int
    max_offset: float
    completion_range: float
    heads: int
    epsilon: float = 1.0  # distance-weight tempering constant
    mix_dim: int = 64  # shared width inside the offset generator
    mix_heads: int = 2

    def __post_init__(self):
        if self.gamma < 1:
            raise ConfigError(f"sampling stride must be >= 1, got {self.gamma}")
        if self.max_offset <= 0:
            raise ConfigError(f"max offset must be positive, got {self.max_offset}")
        if self.completion_range < self.gamma:
            raise ConfigError(
                f"completion range {self.completion_range} is below the stride {self.gamma}; "
                "unsampled cells could end up with no neighbors"
            )
        if self.epsilon <= 0:
            raise ConfigError(f"distance constant must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class FusionConfig:
    """Branch-wide switches: per-stage deformation and ablation flags."""

    dfa_stages: tuple[int, ...] = (2, 3, 4)
    drop_offsets: bool = False
    drop_scalar: bool = False
    drop_card: bool = False
    epsilon: float = 1.0
    mix_dim: int = 64
    mix_heads: int = 2
    guidance_average: str = "heads_keys"  # or "heads"

    def __post_init__(self):
        for s in self.dfa_stages:
            if s not in (2, 3, 4):
                raise ConfigError(f"deformable alignment only runs on stages 2-4, got {s}")
        if self.guidance_average not in ("heads_keys", "heads"):
            raise ConfigError(f"unknown guidance averaging mode: {self.guidance_average}")

    def stage_config(self, stage: int, heads: int) -> DfaStageConfig:
        k = stage - 2
        return DfaStageConfig(
            gamma=int(DFA_GAMMA[k]), max_offset=DFA_MAX_OFFSET[k], completion_range=DFA_RANGE[k],
            heads=heads, epsilon=self.epsilon, mix_dim=self.mix_dim, mix_heads=self.mix_heads,
        )


# ---------------------------------------------------------------------------
# geometry


_POS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def positional_map(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sin-cos position channels: rows fill the first half of the
    width, columns the second.  Added to the query path only, so grounding
    can express where a position sits relative to the scene."""
    key = (h, w, c)
    if key not in _POS_CACHE:
        if c % 2:
            raise ConfigError(f"positional map needs an even channel count, got {c}")
        rows = sinusoidal_positional_encoding(h, c // 2).data
        cols = sinusoidal_positional_encoding(w, c // 2).data
        out = np.empty((h, w, c))
        out[:, :, : c // 2] = rows[:, None, :]
        out[:, :, c // 2:] = cols[None, :, :]
        _POS_CACHE[key] = out
    return _POS_CACHE[key]


def make_reference_grid(h: int, w: int, gamma: int) -> np.ndarray:
    """Cell-center points of a gamma-strided grid, raster-ordered: [(h/g)(w/g), 2].

    Point (r, c) sits at (gamma*r + (gamma-1)/2, gamma*c + (gamma-1)/2) in
    grid coordinates, i.e. the center of its gamma x gamma cell.
    """
    if h % gamma or w % gamma:
        raise ShapeError(f"stride {gamma} does not divide grid {h}x{w}")
    half = (gamma - 1) / 2.0
    rows = gamma * np.arange(h // gamma, dtype=np.float64) + half
    cols = gamma * np.arange(w // gamma, dtype=np.float64) + half
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)


def reference_anchor_indices(h: int, w: int, gamma: int) -> np.ndarray:
    """Raster index of the integer cell each reference point anchors to."""
    half = (gamma - 1) // 2
    rows = gamma * np.arange(h // gamma) + half
    cols = gamma * np.arange(w // gamma) + half
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return (rr * w + cc).reshape(-1)


def bilinear_sample_many(img: Tensor, points: Tensor) -> Tensor:
    """Sample [H, W, C] at fractional (row, col) points: [P, 2] -> [P, C].

    Each point draws from its 4 nearest integer neighbors with weights
    (1 - |dy|)(1 - |dx|); neighbors falling outside the grid contribute
    zero.  Differentiable in both the image and the points.
    """
    img = ad.as_tensor(img)
    points = ad.as_tensor(points)
    if img.ndim != 3:
        raise ShapeError(f"expected [H, W, C] image, got {img.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"expected [P, 2] points, got {points.shape}")
    h, w, c = img.shape
    flat = ad.reshape(img, (h * w, c))

    y = points[:, 0:1]  # [P,1]
    x = points[:, 1:2]
    y0 = np.floor(points.data[:, 0:1])  # constant under differentiation
    x0 = np.floor(points.data[:, 1:2])
    fy = ad.sub(y, y0)
    fx = ad.sub(x, x0)
    one_m_fy = ad.sub(1.0, fy)
    one_m_fx = ad.sub(1.0, fx)

    out = None
    for dy, wy in ((0, one_m_fy), (1, fy)):
        for dx, wx in ((0, one_m_fx), (1, fx)):
            yi = y0[:, 0] + dy
            xi = x0[:, 0] + dx
            valid = ((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)).astype(np.float64)[:, None]
            # non-finite points are invalid; zero the index so the gather stays
            # in bounds while the NaN weight still poisons the output
            safe_y = np.where(np.isfinite(yi), yi, 0.0)
            safe_x = np.where(np.isfinite(xi), xi, 0.0)
            ci = np.clip(safe_y, 0, h - 1).astype(np.int64) * w + np.clip(safe_x, 0, w - 1).astype(np.int64)
            vals = ad.mul(ad.take_rows(flat, ci), valid)
            term = ad.mul(ad.mul(wy, wx), vals)
            out = term if out is None else ad.add(out, term)
    return out


def bilinear_sample(img: Tensor, p) -> Tensor:
    """Single-point convenience wrapper: returns the [C] sample at p=(row, col)."""
    pt = ad.as_tensor(p)
    if pt.ndim == 1:
        pt = ad.reshape(pt, (1, 2))
    return bilinear_sample_many(img, pt)[0, :]


def resize_bilinear(m: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resize [H, W] or [H, W, C] by bilinear sampling with edge replication."""
    m = ad.as_tensor(m)
    squeeze = m.ndim == 2
    if squeeze:
        m = ad.reshape(m, (m.shape[0], m.shape[1], 1))
    h, w, c = m.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ShapeError(f"target size must be at least 1x1, got {out_hw}")
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    rr, cc = np.meshgrid(ys, xs, indexing="ij")
    pts = Tensor(np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1))
    out = ad.reshape(bilinear_sample_many(m, pts), (oh, ow, c))
    return ad.reshape(out, (oh, ow)) if squeeze else out


# ---------------------------------------------------------------------------
# attention matrix completion


def complete_attention(sampled: Tensor, positions: Tensor, grid_hw: tuple[int, int],
                       cfg: DfaStageConfig, drop_card: bool = False) -> tuple[Tensor, int]:
    """Expand per-sample score rows to every grid cell: [.., Nq, T] -> [.., HW, T].

    Sampled rows land unchanged at their reference-cell raster indices.
    Every unsampled cell takes a 1/(distance + eps) weighted mean of the
    sampled rows whose *deformed* position falls inside the cell's
    range x range window, scaled by how full that window is relative to
    the average.  Cells with an empty window fall back to the global mean
    of the sampled scores; the count of such cells is returned.
    """
    sampled = ad.as_tensor(sampled)
    positions = ad.as_tensor(positions)
    batched = sampled.ndim == 3
    if not batched:
        sampled = ad.reshape(sampled, (1,) + sampled.shape)
    h, w = grid_hw
    nq = sampled.shape[1]
    if positions.shape != (nq, 2):
        raise ShapeError(f"positions shape {positions.shape} does not match {nq} sampled rows")
    if nq * cfg.gamma * cfg.gamma != h * w:
        raise ShapeError(f"{nq} sampled rows cannot tile a {h}x{w} grid at stride {cfg.gamma}")
    n = h * w
    heads, _, t = sampled.shape

    anchors = reference_anchor_indices(h, w, cfg.gamma)
    unsampled = np.setdiff1d(np.arange(n), anchors)
    nu = unsampled.size

    # Scatter matrices are 0/1 constants; matmul keeps everything on the tape.
    place_s = np.zeros((n, nq))
    place_s[anchors, np.arange(nq)] = 1.0
    out = ad.matmul_any(Tensor(place_s), sampled)
    empty = 0

    if nu:
        cells = np.stack([unsampled // w, unsampled % w], axis=1).astype(np.float64)  # [Nu,2]
        # Window membership is a discrete predicate: fixed off the tape.
        diff_c = cells[:, None, :] - positions.data[None, :, :]
        member = (np.abs(diff_c).max(axis=2) <= cfg.completion_range / 2.0).astype(np.float64)  # [Nu,Nq]
        card = member.sum(axis=1)  # [Nu]
        avg_card = card.mean()
        empty = int((card == 0).sum())

        # Distances stay on the tape so deformation gradients flow through them.
        d2 = ad.tsum(ad.power(ad.sub(Tensor(cells[:, None, :]), ad.reshape(positions, (1, nq, 2))), 2.0), axis=2)
        dist = ad.sqrt(ad.add(d2, 1e-24))
        weights = ad.mul(ad.div(1.0, ad.add(dist, cfg.epsilon)), Tensor(member))  # [Nu,Nq]
        denom = ad.tsum(weights, axis=1, keepdims=True)
        safe_denom = ad.add(denom, Tensor((card == 0).astype(np.float64)[:, None]))
        interp = ad.div(ad.matmul_any(weights, sampled), safe_denom)  # [H,Nu,T] via batch broadcast

        if not drop_card and avg_card > 0:
            factor = Tensor((card / avg_card)[None, :, None])
            interp = ad.mul(interp, factor)

        if empty:
            fill = ad.tmean(sampled, axis=(1, 2), keepdims=True)  # [H,1,1]
            empty_mask = Tensor((card == 0).astype(np.float64)[None, :, None])
            interp = ad.add(ad.mul(interp, ad.sub(1.0, empty_mask)), ad.mul(fill, empty_mask))

        place_u = np.zeros((n, nu))
        place_u[unsampled, np.arange(nu)] = 1.0
        out = ad.add(out, ad.matmul_any(Tensor(place_u), interp))

    if not batched:
        out = out[0]
    return out, empty


# ---------------------------------------------------------------------------
# guidance extraction


def extract_guidance_map(scores: Tensor, grid_hw: tuple[int, int],
                         average: str = "heads_keys") -> Tensor:
    """Collapse per-head completed scores [heads, HW, T] into a [H, W] map.

    Scores are averaged over heads and keys (or summed over keys in
    ``heads`` mode), softmaxed over the spatial axis so the map is a
    positive distribution over cells, then divided by its maximum.
    """
    scores = ad.as_tensor(scores)
    if scores.ndim != 3:
        raise ShapeError(f"expected [heads, HW, T] scores, got {scores.shape}")
    h, w = grid_hw
    if scores.shape[1] != h * w:
        raise ShapeError(f"scores cover {scores.shape[1]} cells, grid wants {h * w}")
    if average == "heads_keys":
        pooled = ad.tmean(scores, axis=(0, 2))
    elif average == "heads":
        pooled = ad.tsum(ad.tmean(scores, axis=0), axis=1)
    else:
        raise ConfigError(f"unknown guidance averaging mode: {average}")
    dist = ad.softmax(pooled, axis=0)
    g = ad.div(dist, ad.tmax(dist))
    return ad.reshape(g, (h, w))


# ---------------------------------------------------------------------------
# fusion stages


class OffsetGenerator:
    """Predicts per-cell 2D offsets and a modulation scalar from M, V, and L.

    The three streams are linearly mapped to one width, concatenated along
    the token axis, mixed by one self-attention transformer layer; the
    mixed tokens at M's positions are average-pooled down to the reference
    grid and projected to (dy, dx, m) channels.
    """

    def __init__(self, reg: ParameterRegistry, name: str, c_i: int, c_l: int,
                 cfg: DfaStageConfig, rng: np.random.Generator):
        d = cfg.mix_dim
        self.cfg = cfg
        self.norm_m = Linear(reg, f"{name}.norm_m", c_i, d, rng)
        self.norm_v = Linear(reg, f"{name}.norm_v", c_i, d, rng)
        self.norm_l = Linear(reg, f"{name}.norm_l", c_l, d, rng)
        self.mixer = TransformerBlock(reg, f"{name}.mixer", d, cfg.mix_heads, rng, mlp_ratio=2.0)
        self.head = Linear(reg, f"{name}.head", d, 3, rng)

    def __call__(self, m: Tensor, v: Tensor, l_full: Tensor) -> tuple[Tensor, Tensor]:
        """(M [H,W,C], V [H,W,C], L [T,C_L]) -> (offsets [Nq, 2], modulation [Nq])."""
        h, w, c = m.shape
        g = self.cfg.gamma
        tokens = ad.concat([
            self.norm_m(ad.reshape(m, (h * w, c))),
            self.norm_v(ad.reshape(v, (h * w, c))),
            self.norm_l(l_full),
        ], axis=0)
        mixed = self.mixer(tokens)[: h * w, :]
        pooled = ad.tmean(
            ad.reshape(mixed, (h // g, g, w // g, g, self.cfg.mix_dim)), axis=(1, 3)
        )  # [h/g, w/g, d]
        raw = self.head(ad.reshape(pooled, ((h // g) * (w // g), self.cfg.mix_dim)))  # [Nq,3]
        offsets = ad.mul(ad.tanh(raw[:, 0:2]), self.cfg.max_offset)
        modulation = ad.sigmoid(raw[:, 2])
        return offsets, modulation


class FusionStage:
    """Cross-attention of spatial text into one stage's visual map.

    ``dense`` is the plain path: per-position queries from a 1x1 projection,
    keys/values from the text tokens, residual output.  ``deformable``
    reuses the same projections but samples queries at offset positions and
    completes the score matrix before the softmax.
    """

    def __init__(self, reg: ParameterRegistry, name: str, stage: int, c_i: int, c_l: int,
                 heads: int, rng: np.random.Generator, deformable: bool = False,
                 dfa_cfg: DfaStageConfig | None = None):
        if c_i % heads:
            raise ConfigError(f"stage width {c_i} not divisible by {heads} heads")
        self.stage = stage
        self.c_i = c_i
        self.heads = heads
        self.wq = Linear(reg, f"{name}.wq", c_i, c_i, rng)  # 1x1 conv over positions
        self.wk = Linear(reg, f"{name}.wk", c_l, c_i, rng)
        self.wv = Linear(reg, f"{name}.wv", c_l, c_i, rng)
        self.wo = Linear(reg, f"{name}.wo", c_i, c_i, rng)
        self.dfa_cfg = dfa_cfg
        self.offset_gen = None
        if deformable:
            if dfa_cfg is None:
                raise ConfigError("deformable stage needs a DfaStageConfig")
            self.offset_gen = OffsetGenerator(reg, f"{name}.offsets", c_i, c_l, dfa_cfg, rng)

    def _scale(self) -> float:
        return 1.0 / math.sqrt(self.c_i // self.heads)

    def _kv(self, ls: Tensor) -> tuple[Tensor, Tensor]:
        if ls.shape[0] == 0:
            raise DataError("no spatial tokens: the text carries nothing to ground")
        k = split_heads(self.wk(ls), self.heads)
        v = split_heads(self.wv(ls), self.heads)
        return k, v

    def dense(self, m: Tensor, ls: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Plain cross-attention: ([H,W,C], [T,C_L]) -> (fused map, attention, raw scores)."""
        h, w, c = m.shape
        m_flat = ad.reshape(m, (h * w, c))
        m_q = ad.reshape(ad.add(m, Tensor(positional_map(h, w, c))), (h * w, c))
        q = split_heads(self.wq(m_q), self.heads)
        k, v = self._kv(ls)
        scores = ad.mul(ad.matmul_any(q, ad.swapaxes(k, -1, -2)), self._scale())
        attn = ad.softmax(scores, axis=-1)
        fused = self.wo(merge_heads(ad.matmul_any(attn, v)))
        out = ad.reshape(ad.add(m_flat, fused), (h, w, c))
        return out, attn, scores

    def deformable(self, m: Tensor, v_map: Tensor, l_full: Tensor, ls: Tensor,
                   drop_offsets: bool = False, drop_scalar: bool = False,
                   drop_card: bool = False) -> tuple[Tensor, Tensor, Tensor, dict]:
        """Offset-sampled, completed cross-attention.

        Returns (fused map, post-softmax attention [heads,HW,T], completed
        pre-softmax scores [heads,HW,T], diagnostics).
        """
        if self.offset_gen is None:
            raise ConfigError(f"stage {self.stage} was built without deformation")
        cfg = self.dfa_cfg
        h, w, c = m.shape
        grid = make_reference_grid(h, w, cfg.gamma)
        nq = grid.shape[0]
        m_pos = ad.add(m, Tensor(positional_map(h, w, c)))

        if drop_offsets and drop_scalar:
            offsets = Tensor(np.zeros((nq, 2)))
            modulation = Tensor(np.ones(nq))
        else:
            offsets, modulation = self.offset_gen(m_pos, v_map, l_full)
            if drop_offsets:
                offsets = Tensor(np.zeros((nq, 2)))
            if drop_scalar:
                modulation = Tensor(np.ones(nq))

        positions = ad.add(Tensor(grid), offsets)  # [Nq,2] deformed points
        sampled_m = bilinear_sample_many(m_pos, positions)  # [Nq,C]
        q = split_heads(self.wq(sampled_m), self.heads)  # [heads,Nq,d]
        k, v = self._kv(ls)
        scores = ad.mul(ad.matmul_any(q, ad.swapaxes(k, -1, -2)), self._scale())
        scores = ad.mul(scores, ad.reshape(modulation, (1, nq, 1)))
        completed, empty = complete_attention(scores, positions, (h, w), cfg, drop_card=drop_card)
        attn = ad.softmax(completed, axis=-1)
        fused = self.wo(merge_heads(ad.matmul_any(attn, v)))
        m_flat = ad.reshape(m, (h * w, c))
        out = ad.reshape(ad.add(m_flat, fused), (h, w, c))
        diag = {"offsets": offsets, "modulation": modulation, "empty_cells": empty}
        return out, attn, completed, diag


class FusionBranch:
    """Stagewise fusion of text into the visual hierarchy, ending in a guidance map.

    Stage 1 always runs the dense path; stages 2-4 run the deformable path
    where enabled (dense otherwise).  The fused map is patch-merged between
    stages with its own trainable reductions, mirroring the visual ladder.
    """

    def __init__(self, reg: ParameterRegistry, stage_channels: tuple[int, int, int, int],
                 stage_heads: tuple[int, int, int, int], text_dim: int,
                 cfg: FusionConfig, rng: np.random.Generator, name: str = "fusion"):
        from .backbone import merge_neighborhoods  # local to avoid cycle at import time

        self._merge_fn = merge_neighborhoods
        self.cfg = cfg
        self.stage_channels = stage_channels
        self.stages: dict[int, FusionStage] = {}
        for i in range(1, 5):
            deform = i in cfg.dfa_stages and i >= 2
            dfa_cfg = cfg.stage_config(i, stage_heads[i - 1]) if deform else None
            self.stages[i] = FusionStage(
                reg, f"{name}.stage{i}", i, stage_channels[i - 1], text_dim,
                stage_heads[i - 1], rng, deformable=deform, dfa_cfg=dfa_cfg,
            )
        self.merges = {
            i: Linear(reg, f"{name}.merge{i}", 4 * stage_channels[i - 2], stage_channels[i - 1], rng)
            for i in range(2, 5)
        }

    def forward(self, features: dict[int, "FeatureMap"], text: TextEmbedding) -> tuple[Tensor, dict]:
        """Visual features + split text -> (guidance map [H4, W4], diagnostics)."""
        pos = sinusoidal_positional_encoding(text.data.shape[0], text.dim)
        l_full = ad.add(text.data, pos)
        lo, hi = text.spatial
        ls = l_full[lo:hi, :]

        diags: dict = {"stages": {}}
        m, attn, scores = self.stages[1].dense(features[1].data, ls)
        diags["stages"][1] = {"attention": attn}
        for i in range(2, 5):
            m = self.merges[i](self._merge_fn(m))
            v_map = features[i].data
            if m.shape != v_map.shape:
                raise ShapeError(f"fused map {m.shape} does not align with stage {i} features {v_map.shape}")
            st = self.stages[i]
            if st.offset_gen is not None:
                m, attn, scores, diag = st.deformable(
                    m, v_map, l_full, ls,
                    drop_offsets=self.cfg.drop_offsets,
                    drop_scalar=self.cfg.drop_scalar,
                    drop_card=self.cfg.drop_card,
                )
                diag["attention"] = attn
                diags["stages"][i] = diag
            else:
                m, attn, scores = st.dense(m, ls)
                diags["stages"][i] = {"attention": attn}

        h4, w4 = features[4].grid
        g = extract_guidance_map(scores, (h4, w4), self.cfg.guidance_average)
        diags["attention_last"] = attn
        return g, diags

"""Synthetic scenes with rule-derived target placement, a deterministic
text-embedding stub, and the evaluation metrics.

Scenes hold a few non-overlapping colored shapes; the caption names an
absent target object and its spatial relation to the placed ones, e.g.
"red circle [left of blue square]".  The relation's geometric rule fixes
the ground-truth box for the object to be generated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DataError, GuidanceEmptyError, PlacementError, VocabularyError
from .fusion import TextEmbedding

__all__ = [
    "BBox",
    "PlacedObject",
    "Scene",
    "EvalReport",
    "COLORS",
    "SHAPES",
    "RELATIONS",
    "VOCABULARY",
    "generate_scene",
    "embed_text_stub",
    "tokenize_caption",
    "iou",
    "dist_score",
    "size_score",
    "predicted_box_from_guidance",
    "evaluate_batch",
    "rasterize_box_mask",
    "box_coverage",
    "relation_predicate_holds",
]

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "cyan": (0.10, 0.80, 0.80),
    "magenta": (0.85, 0.10, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.15, 0.75),
}
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("left of", "right of", "above", "below", "beside", "between")
BACKGROUND = 0.85

VOCABULARY = tuple(sorted(set(COLORS) | set(SHAPES) | {"left", "right", "of", "above", "below", "beside", "between", "and"}))
EMBED_DIM = 64
_EMBED_TABLE_SEED = 60331


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized [0,1] image coordinates.

    ``x`` is the left edge (column axis), ``y`` the top edge (row axis).
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.x >= 0 and self.y >= 0
                and self.x + self.w <= 1 + 1e-12 and self.y + self.h <= 1 + 1e-12):
            raise DataError(f"box ({self.x}, {self.y}, {self.w}, {self.h}) leaves the unit square")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class PlacedObject:
    shape: str
    color: str
    box: BBox


@dataclass
class Scene:
    image: np.ndarray  # [side, side, 3] in [0,1]
    objects: list[PlacedObject]
    caption: str
    gt_box: BBox
    relation: str
    target: tuple[str, str]  # (color, shape)


@dataclass
class EvalReport:
    ious: list[float] = field(default_factory=list)
    size_scores: list[float] = field(default_factory=list)
    dist_scores: list[float] = field(default_factory=list)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious)) if self.ious else 0.0

    @property
    def mean_size(self) -> float:
        return float(np.mean(self.size_scores)) if self.size_scores else 0.0

    @property
    def mean_dist(self) -> float:
        return float(np.mean(self.dist_scores)) if self.dist_scores else 0.0


# ---------------------------------------------------------------------------
# metrics


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return max(0.0, min(1.0, inter / union))  # clamp float rounding at the ends


def dist_score(a: BBox, b: BBox) -> float:
    """100 at coinciding centers, falling linearly to 0 at the image diagonal."""
    d = math.hypot(a.cx - b.cx, a.cy - b.cy)
    return 100.0 * max(0.0, 1.0 - d / math.sqrt(2.0))


def size_score(a: BBox, b: BBox) -> float:
    """100 times the smaller-to-larger area ratio."""
    return 100.0 * (min(a.area, b.area) / max(a.area, b.area))


def predicted_box_from_guidance(g, beta_frac: float = 0.5) -> BBox:
    """Bounding box of the guidance cells strictly above beta_frac * max."""
    arr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    h, w = arr.shape
    mask = arr > beta_frac * arr.max()
    if not mask.any():
        raise GuidanceEmptyError(f"no guidance cell above {beta_frac} of the maximum")
    rows, cols = np.nonzero(mask)
    return BBox(
        x=cols.min() / w, y=rows.min() / h,
        w=(cols.max() + 1 - cols.min()) / w, h=(rows.max() + 1 - rows.min()) / h,
    )


def evaluate_batch(gt_boxes: list[BBox], predictions: list[BBox]) -> EvalReport:
    """Per-scene metrics and their means; inputs must pair up one-to-one."""
    if len(gt_boxes) != len(predictions):
        raise DataError(f"{len(gt_boxes)} ground-truth boxes vs {len(predictions)} predictions")
    report = EvalReport()
    for gt, pred in zip(gt_boxes, predictions):
        report.ious.append(iou(gt, pred))
        report.size_scores.append(size_score(gt, pred))
        report.dist_scores.append(dist_score(gt, pred))
    return report


def rasterize_box_mask(box: BBox, grid_hw: tuple[int, int]) -> np.ndarray:
    """Binary [h, w] mask of grid cells whose centers fall inside the box."""
    h, w = grid_hw
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    inside_y = (cy >= box.y) & (cy <= box.y + box.h)
    inside_x = (cx >= box.x) & (cx <= box.x + box.w)
    return (inside_y[:, None] & inside_x[None, :]).astype(np.float64)


def box_coverage(box: BBox, grid_hw: tuple[int, int]) -> np.ndarray:
    """Per-cell fraction of the cell's area covered by the box, in [0,1].

    Smoother than the binary mask, so it makes a gentler training target.
    """
    h, w = grid_hw
    y_edges = np.arange(h + 1) / h
    x_edges = np.arange(w + 1) / w
    iy = np.maximum(0.0, np.minimum(y_edges[1:], box.y + box.h) - np.maximum(y_edges[:-1], box.y))
    ix = np.maximum(0.0, np.minimum(x_edges[1:], box.x + box.w) - np.maximum(x_edges[:-1], box.x))
    return (iy[:, None] * h) * (ix[None, :] * w)


# ---------------------------------------------------------------------------
# scene generation


def _draw_shape(img: np.ndarray, shape: str, rgb: tuple[float, float, float], box: BBox) -> None:
    side = img.shape[0]
    y0, y1 = box.y * side, (box.y + box.h) * side
    x0, x1 = box.x * side, (box.x + box.w) * side
    rows = (np.arange(side) + 0.5)[:, None]
    cols = (np.arange(side) + 0.5)[None, :]
    if shape == "square":
        mask = (rows >= y0) & (rows < y1) & (cols >= x0) & (cols < x1)
    elif shape == "circle":
        cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
        ry, rx = (y1 - y0) / 2, (x1 - x0) / 2
        mask = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    elif shape == "triangle":
        cx = (x0 + x1) / 2
        frac = np.clip((rows - y0) / max(y1 - y0, 1e-9), 0.0, 1.0)
        half = frac * (x1 - x0) / 2
        mask = (rows >= y0) & (rows < y1) & (np.abs(cols - cx) <= half)
    else:
        raise DataError(f"unknown shape: {shape}")
    img[mask] = rgb


def _band_center_box(side_of: str, anchor: BBox) -> BBox | None:
    """Target box of the anchor's size centered in the free band, or None if it cannot fit."""
    w, h = anchor.w, anchor.h
    if side_of == "left":
        if anchor.x < w:
            return None
        return BBox(x=anchor.x / 2 - w / 2, y=anchor.cy - h / 2, w=w, h=h)
    if side_of == "right":
        band = 1.0 - (anchor.x + anchor.w)
        if band < w:
            return None
        return BBox(x=(anchor.x + anchor.w + 1.0) / 2 - w / 2, y=anchor.cy - h / 2, w=w, h=h)
    if side_of == "above":
        if anchor.y < h:
            return None
        return BBox(x=anchor.cx - w / 2, y=anchor.y / 2 - h / 2, w=w, h=h)
    if side_of == "below":
        band = 1.0 - (anchor.y + anchor.h)
        if band < h:
            return None
        return BBox(x=anchor.cx - w / 2, y=(anchor.y + anchor.h + 1.0) / 2 - h / 2, w=w, h=h)
    raise DataError(f"unknown side: {side_of}")


def _vertical_fit(box: BBox | None) -> BBox | None:
    if box is None:
        return None
    if box.y < 0 or box.y + box.h > 1 or box.x < 0 or box.x + box.w > 1:
        return None
    return box


def _overlaps_existing(box: BBox, objects: list[PlacedObject], limit: float = 0.10) -> bool:
    return any(iou(box, o.box) > limit for o in objects)


def relation_predicate_holds(relation: str, gt: BBox, anchors: list[BBox]) -> bool:
    """Geometric check that a box satisfies its relation to the anchors."""
    a = anchors[0]
    if relation == "left of":
        return gt.cx < a.cx
    if relation == "right of":
        return gt.cx > a.cx
    if relation == "above":
        return gt.cy < a.cy
    if relation == "below":
        return gt.cy > a.cy
    if relation == "beside":
        return gt.cx != a.cx
    if relation == "between":
        b = anchors[1]
        lo_x, hi_x = min(a.cx, b.cx), max(a.cx, b.cx)
        lo_y, hi_y = min(a.cy, b.cy), max(a.cy, b.cy)
        return (lo_x - 1e-9 <= gt.cx <= hi_x + 1e-9) and (lo_y - 1e-9 <= gt.cy <= hi_y + 1e-9)
    raise DataError(f"unknown relation: {relation}")


def _candidate_relations(objects: list[PlacedObject]) -> list[tuple[str, list[int], BBox]]:
    """All (relation, anchor indices, gt box) choices valid for this layout."""
    out = []
    for i, obj in enumerate(objects):
        a = obj.box
        for rel, side in (("left of", "left"), ("right of", "right"), ("above", "above"), ("below", "below")):
            cand = _vertical_fit(_band_center_box(side, a))
            if cand is not None and not _overlaps_existing(cand, objects):
                out.append((rel, [i], cand))
        for side in ("left", "right"):
            cand = _vertical_fit(_band_center_box(side, a))
            if cand is not None and not _overlaps_existing(cand, objects):
                out.append(("beside", [i], cand))
    for i in range(len(objects)):
        for j in range(i + 1, len(objects)):
            a, b = objects[i].box, objects[j].box
            w, h = (a.w + b.w) / 2, (a.h + b.h) / 2
            cx, cy = (a.cx + b.cx) / 2, (a.cy + b.cy) / 2
            x, y = cx - w / 2, cy - h / 2
            if x < 0 or y < 0 or x + w > 1 or y + h > 1:
                continue
            cand = BBox(x=x, y=y, w=w, h=h)
            if not _overlaps_existing(cand, objects):
                out.append(("between", [i, j], cand))
    return out


def generate_scene(seed: int, side: int = 64, n_objects: int = 2) -> Scene:
    """Deterministic scene: placed shapes, a caption, and the target's true box.

    Layouts that leave no room for any relation are resampled; after 100
    layout attempts the generator gives up.
    """
    if n_objects < 1:
        raise DataError(f"a scene needs at least one object, got {n_objects}")
    rng = np.random.default_rng([9201, seed])

    for _ in range(100):
        combos = [(c, s) for c in COLORS for s in SHAPES]
        picks = rng.choice(len(combos), size=n_objects + 1, replace=False)
        objects: list[PlacedObject] = []
        ok = True
        for k in range(n_objects):
            color, shape = combos[picks[k]]
            placed = None
            for _try in range(100):
                w = float(rng.uniform(0.18, 0.32))
                h = w if shape in ("circle", "square") else float(rng.uniform(0.18, 0.32))
                x = float(rng.uniform(0.0, 1.0 - w))
                y = float(rng.uniform(0.0, 1.0 - h))
                cand = BBox(x=x, y=y, w=w, h=h)
                if not _overlaps_existing(cand, objects):
                    placed = PlacedObject(shape=shape, color=color, box=cand)
                    break
            if placed is None:
                ok = False
                break
            objects.append(placed)
        if not ok:
            raise PlacementError(f"could not place {n_objects} objects without overlap")

        candidates = _candidate_relations(objects)
        if n_objects < 2:
            candidates = [c for c in candidates if c[0] != "between"]
        if not candidates:
            continue  # resample the layout
        rel, anchor_idx, gt_box = candidates[rng.integers(len(candidates))]
        t_color, t_shape = combos[picks[n_objects]]

        img = np.full((side, side, 3), BACKGROUND)
        for o in objects:
            _draw_shape(img, o.shape, COLORS[o.color], o.box)

        anchors = [objects[i] for i in anchor_idx]
        if rel == "between":
            spatial = f"between {anchors[0].color} {anchors[0].shape} and {anchors[1].color} {anchors[1].shape}"
        else:
            spatial = f"{rel} {anchors[0].color} {anchors[0].shape}"
        caption = f"{t_color} {t_shape} [{spatial}]"
        return Scene(image=img, objects=objects, caption=caption, gt_box=gt_box,
                     relation=rel, target=(t_color, t_shape))
    raise PlacementError("no feasible relation after 100 layout attempts")


# ---------------------------------------------------------------------------
# text stub


def _embedding_table() -> np.ndarray:
    rng = np.random.default_rng(_EMBED_TABLE_SEED)
    return rng.normal(size=(len(VOCABULARY), EMBED_DIM)) / math.sqrt(EMBED_DIM)


_TABLE = _embedding_table()
_INDEX = {word: i for i, word in enumerate(VOCABULARY)}


def tokenize_caption(caption: str) -> tuple[list[str], list[str]]:
    """Split a bracketed caption into appearance and spatial token lists."""
    text = caption.strip().lower()
    if text.count("[") != 1 or text.count("]") != 1 or text.index("[") > text.index("]"):
        raise DataError(f"caption needs exactly one [spatial] span: {caption!r}")
    head, rest = text.split("[", 1)
    inner, tail = rest.split("]", 1)
    if tail.strip():
        raise DataError(f"text after the closing bracket is not allowed: {caption!r}")
    appearance = head.split()
    spatial = inner.split()
    if not appearance or not spatial:
        raise DataError(f"both appearance and spatial parts must be non-empty: {caption!r}")
    return appearance, spatial


def embed_text_stub(caption: str) -> TextEmbedding:
    """Caption -> fixed per-token embeddings with appearance/spatial spans."""
    appearance, spatial = tokenize_caption(caption)
    rows = []
    for tok in appearance + spatial:
        if tok not in _INDEX:
            raise VocabularyError(f"token not in the synthetic vocabulary: {tok!r}")
        rows.append(_TABLE[_INDEX[tok]])
    n_a = len(appearance)
    n = len(rows)
    return TextEmbedding(data=Tensor(np.stack(rows)), appearance=(0, n_a), spatial=(n_a, n))

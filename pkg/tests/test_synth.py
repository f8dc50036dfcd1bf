"""Scene synthesis, caption embedding stub, and grounding metrics."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textground.errors import DataError, GuidanceEmptyError, PlacementError, VocabularyError
from textground.synth import (BACKGROUND, COLORS, EMBED_DIM, RELATIONS, SHAPES,
                              VOCABULARY, BBox, EvalReport, PlacedObject,
                              box_coverage, dist_score, embed_text_stub,
                              evaluate_batch, generate_scene, iou,
                              predicted_box_from_guidance, rasterize_box_mask,
                              relation_predicate_holds, size_score,
                              tokenize_caption)


def boxes_strategy():
    return st.tuples(
        st.floats(0.0, 0.7), st.floats(0.0, 0.7),
        st.floats(0.05, 0.3), st.floats(0.05, 0.3),
    ).map(lambda t: BBox(x=t[0], y=t[1], w=t[2], h=t[3]))


# -- boxes and metrics ------------------------------------------------------


def test_bbox_validation_and_properties():
    b = BBox(x=0.25, y=0.5, w=0.5, h=0.25)
    assert b.cx == 0.5 and b.cy == 0.625 and b.area == 0.125
    with pytest.raises(DataError):
        BBox(x=0.8, y=0.0, w=0.5, h=0.5)
    with pytest.raises(DataError):
        BBox(x=0.0, y=0.0, w=0.0, h=0.5)
    with pytest.raises(DataError):
        BBox(x=-0.1, y=0.0, w=0.5, h=0.5)


def test_iou_pinned_cases():
    a = BBox(x=0.0, y=0.0, w=0.5, h=0.5)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(x=0.5, y=0.5, w=0.4, h=0.4)) == 0.0
    b = BBox(x=0.25, y=0.0, w=0.5, h=0.5)
    assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_dist_score_pinned():
    a = BBox(x=0.0, y=0.0, w=0.5, h=0.5)  # center (0.25, 0.25)
    assert dist_score(a, a) == 100.0
    b = BBox(x=0.5, y=0.5, w=0.5, h=0.5)  # center (0.75, 0.75)
    assert dist_score(a, b) == pytest.approx(50.0, abs=1e-12)


def test_size_score_pinned():
    a = BBox(x=0.0, y=0.0, w=0.4, h=0.4)
    assert size_score(a, a) == 100.0
    b = BBox(x=0.0, y=0.0, w=0.2, h=0.2)  # quarter of a's area
    assert size_score(a, b) == pytest.approx(25.0, abs=1e-12)
    assert size_score(b, a) == size_score(a, b)


def test_predicted_box_from_guidance_pinned():
    g = np.zeros((4, 4))
    g[1, 1] = 1.0
    g[2, 2] = 0.8
    box = predicted_box_from_guidance(g)
    assert (box.x, box.y, box.w, box.h) == (0.25, 0.25, 0.5, 0.5)


def test_predicted_box_uniform_map_covers_everything():
    box = predicted_box_from_guidance(np.ones((4, 4)))
    assert (box.x, box.y, box.w, box.h) == (0.0, 0.0, 1.0, 1.0)


def test_predicted_box_empty_raises():
    with pytest.raises(GuidanceEmptyError):
        predicted_box_from_guidance(np.ones((4, 4)), beta_frac=1.0)


def test_evaluate_batch_means_and_mismatch():
    a = BBox(x=0.0, y=0.0, w=0.5, h=0.5)
    b = BBox(x=0.5, y=0.5, w=0.5, h=0.5)
    report = evaluate_batch([a, a], [a, b])
    assert report.ious == [1.0, 0.0]
    assert report.mean_iou == 0.5
    assert report.mean_size == 100.0
    with pytest.raises(DataError):
        evaluate_batch([a], [a, b])
    empty = EvalReport()
    assert empty.mean_iou == 0.0


def test_rasterize_box_mask_pinned():
    mask = rasterize_box_mask(BBox(x=0.25, y=0.25, w=0.5, h=0.5), (4, 4))
    want = np.zeros((4, 4))
    want[1:3, 1:3] = 1.0
    assert np.array_equal(mask, want)


def test_box_coverage_aligned_box_is_binary():
    box = BBox(x=0.25, y=0.25, w=0.5, h=0.5)
    cov = box_coverage(box, (4, 4))
    assert np.array_equal(cov, rasterize_box_mask(box, (4, 4)))


def test_box_coverage_partial_cells():
    cov = box_coverage(BBox(x=0.0, y=0.0, w=0.5, h=0.375), (4, 4))
    want = np.outer([1.0, 0.5, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0])
    assert np.allclose(cov, want, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(boxes_strategy(), boxes_strategy())
def test_property_iou_symmetric_unit_interval(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert 0.0 <= dist_score(a, b) <= 100.0
    assert 0.0 < size_score(a, b) <= 100.0


@settings(max_examples=30, deadline=None)
@given(boxes_strategy(), st.integers(2, 12), st.integers(2, 12))
def test_property_coverage_sums_to_area(box, h, w):
    cov = box_coverage(box, (h, w))
    assert np.all((cov >= 0.0) & (cov <= 1.0 + 1e-12))
    assert cov.sum() / (h * w) == pytest.approx(box.area, abs=1e-12)


# -- scene generation -------------------------------------------------------


def anchors_from_caption(scene):
    """Recover anchor boxes by matching (color, shape) pairs in the spatial span."""
    _, spatial = tokenize_caption(scene.caption)
    pairs = []
    for i, tok in enumerate(spatial):
        if tok in COLORS and i + 1 < len(spatial) and spatial[i + 1] in SHAPES:
            pairs.append((tok, spatial[i + 1]))
    out = []
    for color, shape in pairs:
        match = [o for o in scene.objects if o.color == color and o.shape == shape]
        assert len(match) == 1, f"anchor {color} {shape} not unique in scene"
        out.append(match[0].box)
    return out


def test_scene_determinism():
    a = generate_scene(7)
    b = generate_scene(7)
    assert a.caption == b.caption
    assert np.array_equal(a.image, b.image)
    assert a.gt_box == b.gt_box
    c = generate_scene(8)
    assert not np.array_equal(a.image, c.image)


def test_scene_structure():
    s = generate_scene(3, side=64, n_objects=2)
    assert s.image.shape == (64, 64, 3)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert len(s.objects) == 2
    assert s.relation in RELATIONS
    assert s.target[0] in COLORS and s.target[1] in SHAPES
    # background must still be visible and objects must have painted over some of it
    assert (s.image == BACKGROUND).any()
    assert (s.image != BACKGROUND).any()


@pytest.mark.parametrize("seed", range(20))
def test_scene_relation_holds_and_overlap_bounded(seed):
    s = generate_scene(seed, n_objects=2)
    anchors = anchors_from_caption(s)
    assert relation_predicate_holds(s.relation, s.gt_box, anchors)
    boxes = [o.box for o in s.objects]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            assert iou(boxes[i], boxes[j]) <= 0.10 + 1e-12
        assert iou(s.gt_box, boxes[i]) <= 0.10 + 1e-12
    # the described object is absent from the scene: its spot is the answer
    assert all((o.color, o.shape) != s.target for o in s.objects)


def test_scene_single_object_never_between():
    for seed in range(10):
        s = generate_scene(seed, n_objects=1)
        assert len(s.objects) == 1
        assert s.relation != "between"


def test_scene_bad_object_counts():
    with pytest.raises(DataError):
        generate_scene(0, n_objects=0)
    with pytest.raises(PlacementError):
        generate_scene(0, n_objects=23)


def test_relation_predicates_pinned():
    left = BBox(x=0.0, y=0.3, w=0.2, h=0.2)
    right = BBox(x=0.7, y=0.3, w=0.2, h=0.2)
    mid = BBox(x=0.4, y=0.3, w=0.2, h=0.2)
    assert relation_predicate_holds("left of", left, [right])
    assert not relation_predicate_holds("left of", right, [left])
    assert relation_predicate_holds("right of", right, [left])
    assert relation_predicate_holds("beside", left, [right])
    assert relation_predicate_holds("between", mid, [left, right])
    assert not relation_predicate_holds("between", left, [mid, right])
    top = BBox(x=0.3, y=0.0, w=0.2, h=0.2)
    bot = BBox(x=0.3, y=0.7, w=0.2, h=0.2)
    assert relation_predicate_holds("above", top, [bot])
    assert relation_predicate_holds("below", bot, [top])
    with pytest.raises(DataError):
        relation_predicate_holds("inside", left, [right])


# -- captions and embeddings ------------------------------------------------


def test_vocabulary_is_sorted_and_complete():
    assert list(VOCABULARY) == sorted(VOCABULARY)
    for w in ("red", "circle", "between", "and", "of"):
        assert w in VOCABULARY


def test_tokenize_caption_round_trip():
    appearance, spatial = tokenize_caption("red circle [left of blue square]")
    assert appearance == ["red", "circle"]
    assert spatial == ["left", "of", "blue", "square"]


def test_tokenize_caption_rejects_malformed():
    for bad in ("red circle left of blue square",
                "red circle [left of] blue [square]",
                "red circle [left of blue square] extra",
                "[left of blue square]",
                "red circle []"):
        with pytest.raises(DataError):
            tokenize_caption(bad)


def test_embedding_spans_and_determinism():
    emb = embed_text_stub("red circle [between blue square and green triangle]")
    assert emb.data.shape == (8, EMBED_DIM)
    assert emb.appearance == (0, 2)
    assert emb.spatial == (2, 8)
    assert emb.appearance_tokens().shape == (2, EMBED_DIM)
    assert emb.spatial_tokens().shape == (6, EMBED_DIM)
    again = embed_text_stub("red circle [between blue square and green triangle]")
    assert np.array_equal(emb.data.data, again.data.data)


def test_embedding_shared_tokens_share_rows():
    a = embed_text_stub("red circle [left of blue square]")
    b = embed_text_stub("red square [left of blue circle]")
    assert np.array_equal(a.data.data[0], b.data.data[0])  # "red"
    assert np.array_equal(a.data.data[2:4], b.data.data[2:4])  # "left of"


def test_embedding_rejects_unknown_word():
    with pytest.raises(VocabularyError):
        embed_text_stub("red dodecahedron [left of blue square]")


def test_generated_captions_always_embed():
    for seed in range(10):
        s = generate_scene(seed)
        emb = embed_text_stub(s.caption)
        assert emb.appearance == (0, 2)
        assert emb.data.shape[0] >= 5

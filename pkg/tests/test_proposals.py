import numpy as np
import pytest

from codo.geometry import BoundingBox, iou
from codo.proposals import (
    NoProposalError,
    Proposal,
    ProposalGeneratorConfig,
    filter_aspect_ratio,
    generate_proposals,
    select_one,
)


def _p(x0, y0, x1, y1, score=0.0):
    return Proposal(BoundingBox(x0, y0, x1, y1), "img", score)


def square_image(size=64, lo=(20, 14), side=24):
    img = np.full((size, size, 3), 90, np.uint8)
    img[lo[1] : lo[1] + side, lo[0] : lo[0] + side] = 240
    return img, BoundingBox(lo[0], lo[1], lo[0] + side, lo[1] + side)


class TestGenerate:
    def test_uniform_image_ties(self, rng):
        img = np.full((48, 48, 3), 127, np.uint8)
        props = generate_proposals(img, ProposalGeneratorConfig(), rng)
        assert len(props) == 32
        assert len({p.score for p in props}) == 1

    def test_ties_broken_by_rng(self):
        img = np.full((48, 48, 3), 127, np.uint8)
        a = generate_proposals(img, ProposalGeneratorConfig(), np.random.default_rng(0))
        b = generate_proposals(img, ProposalGeneratorConfig(), np.random.default_rng(1))
        assert [p.box for p in a] != [p.box for p in b]

    @pytest.mark.parametrize("seed", range(5))
    def test_square_found(self, seed):
        img, square = square_image()
        props = generate_proposals(img, ProposalGeneratorConfig(), np.random.default_rng(seed))
        assert iou(props[0].box, square) >= 0.5

    def test_graph_segmentation_finds_square(self, rng):
        img, square = square_image()
        cfg = ProposalGeneratorConfig(strategy="graph_segmentation")
        props = generate_proposals(img, cfg, rng)
        assert max(iou(p.box, square) for p in props) >= 0.5

    def test_zero_candidates(self, rng):
        img, _ = square_image()
        assert generate_proposals(img, ProposalGeneratorConfig(candidates_per_image=0), rng) == []

    def test_image_too_small(self, rng):
        img = np.zeros((3, 3, 3), np.uint8)
        assert generate_proposals(img, ProposalGeneratorConfig(), rng) == []

    @pytest.mark.parametrize("strategy", ["energy_sampler", "graph_segmentation"])
    def test_boxes_valid_and_within_area_bounds(self, strategy, tiny_corpus):
        cfg = ProposalGeneratorConfig(strategy=strategy)
        rng = np.random.default_rng(5)
        for image in tiny_corpus.pretrain_images[:10]:
            h, w = image.shape[:2]
            for p in generate_proposals(image, cfg, rng, image_id="x"):
                assert p.box.inside(w, h)
                frac = p.box.area / (w * h)
                assert cfg.min_box_fraction <= frac <= cfg.max_box_fraction
                assert p.source_image_id == "x"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ProposalGeneratorConfig(min_box_fraction=0.6, max_box_fraction=0.5)
        with pytest.raises(ValueError):
            ProposalGeneratorConfig(strategy="selective_search")


class TestAspectFilter:
    @pytest.mark.parametrize(
        "w, h, kept",
        [(30, 10, False), (10, 10, True), (3, 10, False), (10, 30, False), (29.9, 10, True), (10, 29.9, True)],
    )
    def test_boundaries(self, w, h, kept):
        assert (len(filter_aspect_ratio([_p(0, 0, w, h)])) == 1) == kept

    def test_random_sweep(self):
        rng = np.random.default_rng(0)
        wh = np.exp(rng.uniform(np.log(0.05), np.log(20), (10_000, 2)))
        props = [_p(0, 0, w, h) for w, h in wh]
        for p in filter_aspect_ratio(props):
            assert 1 / 3 < p.box.aspect_ratio < 3


class TestSelectOne:
    def test_single(self, rng):
        p = _p(0, 0, 5, 5)
        assert select_one([p], rng) is p

    def test_same_seed_same_choice(self):
        props = [_p(0, 0, i + 1, i + 1) for i in range(7)]
        assert select_one(props, np.random.default_rng(3)) is select_one(props, np.random.default_rng(3))

    def test_empty(self, rng):
        with pytest.raises(NoProposalError):
            select_one([], rng)

    @pytest.mark.parametrize("n", range(1, 11))
    def test_uniform_over_seed_sweep(self, n):
        props = [_p(0, 0, i + 1, i + 1) for i in range(n)]
        index = {id(p): i for i, p in enumerate(props)}
        counts = np.zeros(n)
        for seed in range(10_000):
            counts[index[id(select_one(props, np.random.default_rng(seed)))]] += 1
        assert np.abs(counts / 10_000 - 1 / n).max() <= 0.05

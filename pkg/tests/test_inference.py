import numpy as np
import pytest
import torch

from groupseg.config import desk_preset
from groupseg.inference import (
    BACKGROUND,
    CLASS_TEMPLATES,
    IGNORE_INDEX,
    compute_miou,
    embed_classes,
    load_label_map,
    mask_probe,
    save_label_map,
    segment,
)
from groupseg.model import GroupSegModel
from groupseg.text import TextConfig
from groupseg.tokenizer import Tokenizer
from groupseg.vision import VisualConfig


@pytest.fixture(scope="module")
def setup():
    torch.manual_seed(0)
    cfg = desk_preset()
    cfg.visual = VisualConfig(
        image_size=32, patch_size=8, embed_dim=16, num_groups=4,
        layers_stage1=1, layers_stage2=1, heads=2,
    )
    cfg.text = TextConfig(vocab_size=64, embed_dim=16, max_len=12, layers=1, heads=2)
    cfg.loss.joint_dim = 16
    model = GroupSegModel(cfg.visual, cfg.text, cfg.loss)
    tok = Tokenizer.from_corpus(["a circle and a square and a triangle"])
    classes = embed_classes(["circle", "square"], CLASS_TEMPLATES, model, tok)
    return model, tok, classes


class TestEmbedClasses:
    def test_unit_rows(self, setup):
        _, _, classes = setup
        norms = classes.vectors.norm(dim=1)
        assert torch.allclose(norms, torch.ones(2), atol=1e-5)

    def test_rejects_empty(self, setup):
        model, tok, _ = setup
        with pytest.raises(ValueError):
            embed_classes([], CLASS_TEMPLATES, model, tok)
        with pytest.raises(ValueError):
            embed_classes(["circle"], [], model, tok)

    def test_single_template_direct(self, setup):
        model, tok, _ = setup
        one = embed_classes(["circle"], ["A photo of a {}."], model, tok)
        assert one.vectors.shape == (1, 16)


class TestSegment:
    def test_threshold_zero_no_background(self, setup):
        model, _, classes = setup
        img = torch.randn(3, 32, 32)
        result = segment(img, model, classes, bkg_threshold=0.0)
        assert (result.labels != BACKGROUND).all()
        assert result.labels.shape == (32, 32)

    def test_threshold_above_one_all_background(self, setup):
        model, _, classes = setup
        img = torch.randn(3, 32, 32)
        result = segment(img, model, classes, bkg_threshold=1.01)
        assert (result.labels == BACKGROUND).all()

    def test_deterministic(self, setup):
        model, _, classes = setup
        torch.manual_seed(1)
        img = torch.randn(3, 32, 32)
        a = segment(img, model, classes, bkg_threshold=0.5)
        b = segment(img, model, classes, bkg_threshold=0.5)
        assert np.array_equal(a.labels, b.labels)

    def test_labels_in_range(self, setup):
        model, _, classes = setup
        img = torch.randn(3, 32, 32)
        result = segment(img, model, classes, bkg_threshold=0.4)
        assert set(np.unique(result.labels)) <= {-1, 0, 1}

    def test_patch_blocks_constant(self, setup):
        # nearest-neighbor upsampling gives constant 8x8 pixel blocks
        model, _, classes = setup
        img = torch.randn(3, 32, 32)
        labels = segment(img, model, classes, bkg_threshold=0.0).labels
        for r in range(4):
            for c in range(4):
                block = labels[8 * r : 8 * (r + 1), 8 * c : 8 * (c + 1)]
                assert (block == block[0, 0]).all()

    def test_scores_shape_and_rowsum(self, setup):
        model, _, classes = setup
        img = torch.randn(3, 32, 32)
        result = segment(img, model, classes, bkg_threshold=0.0, return_scores=True)
        assert result.soft_scores.shape == (32, 32, 2)
        sums = result.soft_scores.sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-5)


class TestMiou:
    def test_perfect_prediction(self):
        gt = np.array([[0, 0], [1, 1]])
        report = compute_miou([gt], [gt], ["a", "b"])
        assert report.miou == pytest.approx(1.0)
        assert report.per_class_iou == {"a": 1.0, "b": 1.0}

    def test_quarter_overlap_hand_example(self):
        # class 0 predicted on 2 of 4 pixels where gt has it on 2 others
        # sharing 1 pixel: IoU = 1/3; background IoU = 1/3 likewise
        pred = np.array([[0, 0], [BACKGROUND, BACKGROUND]])
        gt = np.array([[0, BACKGROUND], [0, BACKGROUND]])
        report = compute_miou([pred], [gt], ["a"])
        assert report.per_class_iou["a"] == pytest.approx(1 / 3)
        assert report.per_class_iou["background"] == pytest.approx(1 / 3)
        assert report.miou == pytest.approx(1 / 3)

    def test_ignore_pixels_excluded(self):
        pred = np.array([[0, 1], [1, 1]])
        gt = np.array([[0, IGNORE_INDEX], [IGNORE_INDEX, 1]])
        report = compute_miou([pred], [gt], ["a", "b"])
        assert report.miou == pytest.approx(1.0)
        assert report.pixel_counts["evaluated_pixels"] == 2

    def test_absent_classes_dropped(self):
        pred = np.array([[0, 0]])
        gt = np.array([[0, 0]])
        report = compute_miou([pred], [gt], ["a", "b", "c"])
        assert "b" not in report.per_class_iou
        assert "c" not in report.per_class_iou
        assert report.miou == pytest.approx(1.0)

    def test_accumulates_over_dataset(self):
        # IoU must pool intersections/unions across images, not average
        # per-image IoUs: image 1 perfect, image 2 empty prediction.
        a_pred = np.array([[0, 0]])
        a_gt = np.array([[0, 0]])
        b_pred = np.array([[BACKGROUND, BACKGROUND]])
        b_gt = np.array([[0, 0]])
        report = compute_miou([a_pred, b_pred], [a_gt, b_gt], ["a"])
        assert report.per_class_iou["a"] == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compute_miou([np.zeros((2, 2))], [np.zeros((3, 3))], ["a"])

    def test_all_wrong_zero(self):
        pred = np.array([[0, 0]])
        gt = np.array([[1, 1]])
        report = compute_miou([pred], [gt], ["a", "b"])
        assert report.miou == pytest.approx(0.0)


class TestMaskProbe:
    def test_exact_column_match(self):
        # one affinity column concentrates exactly on the gt pixels
        affinity = torch.zeros(8, 2)
        affinity[:4, 0] = 1.0
        affinity[4:, 1] = 1.0
        gt = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        assert mask_probe(affinity, gt, keep_fraction=0.5) == pytest.approx(1.0)

    def test_takes_best_group(self):
        affinity = torch.zeros(4, 3)
        affinity[:, 0] = torch.tensor([9.0, 8.0, 1.0, 0.0])  # half right
        affinity[:, 1] = torch.tensor([0.0, 1.0, 8.0, 9.0])  # matches gt
        gt = np.array([0, 0, 1, 1])
        assert mask_probe(affinity, gt, keep_fraction=0.5) == pytest.approx(1.0)

    def test_empty_gt_zero(self):
        assert mask_probe(torch.rand(4, 2), np.zeros(4), 0.5) == 0.0

    def test_scale_invariant(self):
        torch.manual_seed(2)
        affinity = torch.rand(16, 4)
        gt = (np.random.default_rng(0).random(16) > 0.5).astype(int)
        a = mask_probe(affinity, gt, 0.25)
        b = mask_probe(affinity * 10.0, gt, 0.25)
        assert a == pytest.approx(b)

    def test_partial_overlap_value(self):
        # keep top 2 of 4; foreground {0, 1}, gt {1, 2}: J = 1/3
        affinity = torch.tensor([[4.0], [3.0], [2.0], [1.0]])
        gt = np.array([0, 1, 1, 0])
        assert mask_probe(affinity, gt, 0.5) == pytest.approx(1 / 3)


class TestLabelMapIO:
    def test_round_trip(self, tmp_path):
        labels = np.array([[BACKGROUND, 0], [2, IGNORE_INDEX]])
        path = tmp_path / "m.png"
        save_label_map(labels, path)
        assert np.array_equal(load_label_map(path), labels)

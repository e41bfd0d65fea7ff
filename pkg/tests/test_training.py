import inspect
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rcnowcast.datagen import DEFAULT_PROFILES, Dims, generate_dataset
from rcnowcast.model import BackboneConfig, build_backbone, parameter_digest
from rcnowcast.training import (
    TrainBatch,
    TrainConfig,
    TrainingDivergence,
    dataset_tensors,
    dice_bce_loss,
    film_finetune,
    mixup_batch,
    self_distill,
    train_backbone,
)

DIMS = Dims(t_out=4, height=16, width=16)
TINY = BackboneConfig(levels=2, base_channels=4, out_frames=4, dropout_rate=0.4)


def dice_bce_reference(pred, target, eps=1e-7, smooth=1.0):
    """Direct float64 transcription of BCE + (1 - Dice)."""
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1 - eps).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    bce = np.mean([-(ti * math.log(pi) + (1 - ti) * math.log(1 - pi)) for pi, ti in zip(p, t)])
    dice = 1 - (2 * np.sum(p * t) + smooth) / (np.sum(p) + np.sum(t) + smooth)
    return bce + dice


@pytest.fixture(scope="module")
def data():
    return generate_dataset(DEFAULT_PROFILES[:2], [2019], 4, DIMS, seed=2)


def quick_config(**kw):
    base = dict(learning_rate=1e-3, max_epochs=2, patience=2, batch_size=4, distill_epochs=1, finetune_epochs=2)
    base.update(kw)
    return TrainConfig(**base)


class TestDiceBCE:
    def test_perfect_prediction(self):
        ones = torch.ones(2, 1, 2, 4, 4)
        assert dice_bce_loss(ones, ones).item() <= 1e-6

    @pytest.mark.parametrize("target", [0.0, 1.0])
    def test_half_probability_bce(self, target):
        pred = torch.full((1, 1, 2, 3, 3), 0.5, dtype=torch.float64)
        tgt = torch.full_like(pred, target)
        dice = 1 - (2 * (0.5 * tgt).sum() + 1) / (pred.sum() + tgt.sum() + 1)
        bce = dice_bce_loss(pred, tgt) - dice
        assert bce.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_reference(self):
        g = torch.Generator().manual_seed(0)
        pred = torch.rand(2, 1, 2, 4, 4, generator=g)
        target = (torch.rand(2, 1, 2, 4, 4, generator=g) > 0.6).float()
        assert dice_bce_loss(pred, target).item() == pytest.approx(dice_bce_reference(pred, target), abs=1e-6)

    def test_soft_targets_reference(self):
        g = torch.Generator().manual_seed(1)
        pred, target = torch.rand(2, 2, 1, 3, 5, 5, generator=g, dtype=torch.float64).unbind(0)
        assert dice_bce_loss(pred, target).item() == pytest.approx(dice_bce_reference(pred, target), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_bce_loss(torch.zeros(2, 3), torch.zeros(3, 2))

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        pred = torch.rand(1, 1, 2, 4, 4, generator=g)
        target = torch.rand(1, 1, 2, 4, 4, generator=g)
        assert dice_bce_loss(pred, target).item() >= 0

    def test_differentiable(self):
        pred = torch.rand(1, 1, 2, 3, 3, requires_grad=True)
        dice_bce_loss(pred, torch.ones(1, 1, 2, 3, 3)).backward()
        assert torch.isfinite(pred.grad).all()


def make_batch(seed=0, n=4):
    g = torch.Generator().manual_seed(seed)
    return TrainBatch(torch.randn(n, 11, 2, 4, 4, generator=g), (torch.rand(n, 1, 3, 4, 4, generator=g) > 0.5).float(),
                      torch.arange(n))


class TestMixup:
    def test_lambda_one_is_identity(self):
        b = make_batch()
        out = mixup_batch(b, 1.0, np.random.default_rng(0), lam=1.0)
        assert torch.equal(out.x, b.x) and torch.equal(out.y, b.y)

    def test_lambda_zero_is_partner(self):
        b = make_batch()
        out = mixup_batch(b, 1.0, np.random.default_rng(0), lam=0.0)
        idx = torch.as_tensor(out.mix_perm)
        assert torch.equal(out.x, b.x[idx]) and torch.equal(out.y, b.y[idx])

    def test_midpoint(self):
        b = TrainBatch(torch.tensor([0.0, 1.0]).reshape(2, 1), torch.tensor([0.0, 1.0]).reshape(2, 1), torch.zeros(2))
        out = mixup_batch(b, 1.0, np.random.default_rng(0), lam=0.5, perm=np.array([1, 0]))
        assert torch.equal(out.x, torch.full((2, 1), 0.5))

    def test_tags_stay_with_unshuffled_side(self):
        b = make_batch()
        out = mixup_batch(b, 1.0, np.random.default_rng(3))
        assert torch.equal(out.region_ids, b.region_ids)

    def test_one_lambda_per_batch(self):
        out = mixup_batch(make_batch(), 1.0, np.random.default_rng(4))
        assert isinstance(out.mix_lambda, float)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            mixup_batch(TrainBatch(torch.zeros(0, 1), torch.zeros(0, 1), torch.zeros(0)), 1.0, np.random.default_rng(0))

    @settings(max_examples=40)
    @given(st.integers(0, 10_000))
    def test_convex_bounds(self, seed):
        b = make_batch(seed)
        out = mixup_batch(b, 1.0, np.random.default_rng(seed))
        partner = torch.as_tensor(out.mix_perm)
        for orig, mixed in ((b.x, out.x), (b.y, out.y)):
            lo = torch.minimum(orig, orig[partner])
            hi = torch.maximum(orig, orig[partner])
            assert (mixed >= lo - 1e-6).all() and (mixed <= hi + 1e-6).all()
        assert 0 <= out.y.min() and out.y.max() <= 1


class TestConfig:
    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"patience": 100}, {"mixup_alpha": 0}, {"srip_lambda": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.max_epochs, c.patience, c.mixup_alpha) == (1e-4, 90, 40, 1.0)


class TestStages:
    def test_train_is_deterministic(self, data):
        runs = []
        for _ in range(2):
            bb = build_backbone(TINY, 2, 0)
            ck = train_backbone(bb, quick_config(), data)
            runs.append(([r["train_loss"] for r in ck.history], parameter_digest(ck.backbone)))
        assert runs[0] == runs[1]

    def test_train_history_fields(self, data):
        ck = train_backbone(build_backbone(TINY, 2, 0), quick_config(), data, data)
        assert [r["epoch"] for r in ck.history] == [1, 2]
        assert all(r["srip_term"] > 0 for r in ck.history)
        assert ck.epoch in (1, 2)

    def test_early_stopping(self, data):
        ck = train_backbone(build_backbone(TINY, 2, 0), quick_config(max_epochs=30, patience=1,
                                                                     learning_rate=1e-9), data)
        assert len(ck.history) < 30

    def test_divergence_names_step(self, data):
        bb = build_backbone(TINY, 2, 0)
        with torch.no_grad():
            bb.head.bias.fill_(float("nan"))
        with pytest.raises(TrainingDivergence, match="epoch 1, step 0"):
            train_backbone(bb, quick_config(), data)

    def test_distill_zero_epochs_copies_teacher(self, data):
        teacher = build_backbone(TINY, 2, 1)
        x, _, r = dataset_tensors(data)
        student = self_distill(teacher, quick_config(), x, r, epochs=0).backbone
        assert student is not teacher
        assert parameter_digest(student) == parameter_digest(teacher)

    def test_distill_leaves_teacher_alone(self, data):
        teacher = build_backbone(TINY, 2, 1)
        before = parameter_digest(teacher)
        x, _, r = dataset_tensors(data)
        student = self_distill(teacher, quick_config(), x, r).backbone
        assert parameter_digest(teacher) == before
        assert parameter_digest(student) != before
        assert all(p.requires_grad for p in teacher.parameters())

    def test_distill_interface_has_no_targets(self):
        params = set(inspect.signature(self_distill).parameters)
        assert params == {"teacher", "config", "x", "region_ids", "epochs"}

    def test_finetune_zero_epochs_identity(self, data):
        bb = build_backbone(TINY, 2, 0)
        region = data.select(lambda s: (s.region_id, s.year) == (0, 2019))
        ad = film_finetune(bb, 0, 2019, region, quick_config(), epochs=0)
        assert ad.key == (0, 2019)
        assert all(torch.equal(g, torch.ones_like(g)) for g in ad.gammas)
        assert all(torch.equal(b, torch.zeros_like(b)) for b in ad.betas)

    def test_finetune_freezes_backbone(self, data):
        bb = build_backbone(TINY, 2, 0)
        before = parameter_digest(bb)
        region = data.select(lambda s: (s.region_id, s.year) == (1, 2019))
        ad = film_finetune(bb, 1, 2019, region, quick_config())
        assert parameter_digest(bb) == before
        assert any(not torch.equal(g, torch.ones_like(g)) for g in ad.gammas)
        assert all(p.requires_grad for p in bb.parameters())

    def test_finetune_rejects_other_regions(self, data):
        with pytest.raises(ValueError):
            film_finetune(build_backbone(TINY, 2, 0), 0, 2019, data, quick_config())

    def test_finetune_empty(self, data):
        with pytest.raises(ValueError):
            film_finetune(build_backbone(TINY, 2, 0), 0, 2019, data.select(lambda s: False), quick_config())

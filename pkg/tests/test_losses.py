import math

import numpy as np
import pytest
import torch

from gtloc.errors import InputError
from gtloc.losses import (
    LossWeights,
    classification_loss,
    combine_terms,
    compute_losses,
    edge_loss,
    region_loss,
    total_loss,
)


def cross_entropy_oracle(logits, label):
    """Direct log-softmax formula in float64, independent of torch."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[label])


# -- classification -----------------------------------------------------------


def test_uniform_logits_gives_log_c():
    loss = classification_loss(torch.zeros(4), 1)
    assert float(loss) == pytest.approx(math.log(4), abs=1e-6)


def test_confident_correct_goes_to_zero():
    logits = torch.tensor([30.0, 0.0, 0.0])
    assert float(classification_loss(logits, 0)) < 1e-8


def test_matches_formula_oracle(rng):
    for _ in range(10):
        logits = rng.normal(size=6)
        label = int(rng.integers(0, 6))
        got = float(classification_loss(torch.tensor(logits), label))
        assert got == pytest.approx(cross_entropy_oracle(logits, label), abs=1e-6)


def test_out_of_range_label():
    with pytest.raises(InputError):
        classification_loss(torch.zeros(4), 4)
    with pytest.raises(InputError):
        classification_loss(torch.zeros(4), -1)


# -- edge loss -----------------------------------------------------------------


def _two_region_image(size=32):
    """Left half dark, right half bright: one strong vertical edge."""
    img = torch.zeros(3, size, size)
    img[:, :, size // 2 :] = 1.0
    return img


def test_edge_loss_constant_map_is_zero():
    img = _two_region_image()
    assert float(edge_loss(torch.full((8, 8), 0.7), img)) == 0.0


def test_edge_loss_zero_map_is_zero():
    img = _two_region_image()
    assert float(edge_loss(torch.zeros(8, 8), img)) == 0.0


def test_edge_on_image_edge_cheaper_than_on_flat():
    img = _two_region_image(32)
    aligned = torch.zeros(8, 8)
    aligned[:, 4:] = 1.0  # map edge on the image edge (col 3->4 boundary)
    misaligned = torch.zeros(8, 8)
    misaligned[:, 2:] = 1.0  # map edge in the flat dark region
    assert float(edge_loss(aligned, img)) < float(edge_loss(misaligned, img))


def test_edge_loss_nonnegative(rng):
    img = torch.rand(3, 16, 16)
    for _ in range(5):
        fg = torch.rand(4, 4)
        assert float(edge_loss(fg, img)) >= 0.0


# -- region loss -----------------------------------------------------------------


def test_region_zero_map():
    assert float(region_loss(torch.zeros(6, 6))) == 0.0


def test_region_full_map():
    assert float(region_loss(torch.ones(6, 6))) == 1.0


def test_region_uncertain_map():
    assert float(region_loss(torch.full((6, 6), 0.5))) == pytest.approx(1.0)


def test_region_weights():
    fg = torch.full((4, 4), 0.25)
    # area term 0.25, uncertainty term 0.25
    assert float(region_loss(fg, alpha=2.0, beta=0.0)) == pytest.approx(0.5)
    assert float(region_loss(fg, alpha=0.0, beta=2.0)) == pytest.approx(0.5)


# -- total loss --------------------------------------------------------------------


def test_zero_weights_totals_to_cls():
    weights = LossWeights(mu=0.0, lam=0.0)
    cls = torch.tensor(1.2345)
    bd = total_loss(cls, torch.tensor(9.9), torch.tensor(8.8),
                    [torch.tensor(1.0)], [torch.tensor(2.0)], weights)
    assert float(bd.total) == float(cls)  # exact


def test_hand_arithmetic_case():
    weights = LossWeights(mu=1.0, lam=0.5)
    bd = total_loss(
        torch.tensor(1.0),
        torch.tensor(0.1),
        torch.tensor(0.1),
        [torch.tensor(0.05)] * 4,
        [torch.tensor(0.05)] * 4,
        weights,
    )
    assert float(bd.total) == pytest.approx(1.4, abs=1e-7)


def test_linearity_in_weights():
    parts = dict(
        cls=torch.tensor(0.7),
        edge_b=torch.tensor(0.2),
        region_b=torch.tensor(0.3),
        edge_l=[torch.tensor(0.04), torch.tensor(0.06)],
        region_l=[torch.tensor(0.01), torch.tensor(0.09)],
    )
    t1 = float(total_loss(weights=LossWeights(mu=1.0, lam=0.0), **parts).total)
    t2 = float(total_loss(weights=LossWeights(mu=2.0, lam=0.0), **parts).total)
    t3 = float(total_loss(weights=LossWeights(mu=3.0, lam=0.0), **parts).total)
    assert t3 - t2 == pytest.approx(t2 - t1, abs=1e-6)
    l1 = float(total_loss(weights=LossWeights(mu=0.0, lam=1.0), **parts).total)
    l2 = float(total_loss(weights=LossWeights(mu=0.0, lam=2.0), **parts).total)
    l3 = float(total_loss(weights=LossWeights(mu=0.0, lam=3.0), **parts).total)
    assert l3 - l2 == pytest.approx(l2 - l1, abs=1e-6)


def test_negative_weights_rejected():
    with pytest.raises(InputError):
        LossWeights(mu=-0.1)


def test_weight_ratio_grid_runs():
    # the ablation grid of mixing ratios must all evaluate
    fg = torch.rand(2, 4, 4, 4)
    fused = fg.mean(dim=1)
    image = torch.rand(2, 3, 32, 32)
    logits = torch.randn(2, 5)
    labels = torch.tensor([0, 3])
    for mu, lam in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.5, 1.0), (1.0, 0.5)]:
        bd = compute_losses(logits, labels, fg, fused, image, LossWeights(mu, lam))
        assert torch.isfinite(bd.total)
        rec = bd.to_record()
        assert rec["mu"] == mu and rec["lambda"] == lam


def test_record_identity_rederivable(rng):
    fg = torch.rand(1, 4, 4, 4)
    bd = compute_losses(
        torch.randn(1, 3),
        torch.tensor([1]),
        fg,
        fg.mean(dim=1),
        torch.rand(1, 3, 16, 16),
        LossWeights(1.0, 0.5),
    )
    rec = bd.to_record()
    rebuilt = combine_terms(
        rec["cls"], rec["edge_b"], rec["region_b"], rec["edge_l"], rec["region_l"],
        LossWeights(rec["mu"], rec["lambda"]),
    )
    assert rebuilt == rec["total"]  # exact float identity


def test_components_nonnegative_and_breakdown_shape():
    fg = torch.rand(2, 4, 8, 8)
    bd = compute_losses(
        torch.randn(2, 4),
        torch.tensor([0, 2]),
        fg,
        fg.mean(dim=1),
        torch.rand(2, 3, 64, 64),
        LossWeights(),
    )
    assert float(bd.cls) >= 0
    assert float(bd.edge_b) >= 0
    assert float(bd.region_b) >= 0
    assert len(bd.edge_l) == 4 and len(bd.region_l) == 4

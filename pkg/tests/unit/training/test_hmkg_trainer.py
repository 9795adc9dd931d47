from typing import Any

import pytest
import torch

from hmkg.hmkg_model import HMKG, HMKGConfig
from hmkg.slide_geometry import Cohort
from hmkg.survival_head import assign_bins, discretize_time
from hmkg.training.hmkg_trainer import HMKGTrainer, TrainingDivergedError
from tests.unit.helpers import build_runner_cfg


def build_trainer(cohort: Cohort, **cfg_kwargs: Any) -> HMKGTrainer:
    cfg = build_runner_cfg(**cfg_kwargs)
    records = [cohort.records[s] for s in cohort.slide_ids]
    binning = discretize_time(records, cfg.n_bins)
    model = HMKG(HMKGConfig.from_dict(cfg.get_model_cfg_dict()))
    return HMKGTrainer(
        model=model,
        bags=[cohort.bags[s] for s in cohort.slide_ids],
        records=assign_bins(records, binning),
        cfg=cfg,
    )


def test_training_is_deterministic(tiny_cohort: Cohort):
    first = build_trainer(tiny_cohort).fit()
    second = build_trainer(tiny_cohort).fit()
    assert first.epoch_losses == second.epoch_losses
    for a, b in zip(first.model.parameters(), second.model.parameters()):
        assert torch.equal(a, b)


def test_fit_records_one_loss_per_epoch(tiny_cohort: Cohort):
    trainer = build_trainer(tiny_cohort, epochs=4)
    output = trainer.fit()
    assert len(output.epoch_losses) == 4
    assert trainer.n_epochs_done == 4
    assert trainer.n_training_steps == 4
    assert output.initial_loss == output.epoch_losses[0]
    assert all(loss > 0 for loss in output.epoch_losses)


def test_mini_batches(tiny_cohort: Cohort):
    trainer = build_trainer(tiny_cohort, batch_size=3, epochs=2)
    assert trainer.steps_per_epoch == 3
    trainer.fit()
    assert trainer.n_training_steps == 6


def test_loss_decreases_with_adam(tiny_cohort: Cohort):
    output = build_trainer(tiny_cohort, optimizer="adam", lr=1e-2, epochs=40).fit()
    assert output.final_loss < output.initial_loss



def test_default_sgd_does_not_increase_the_loss(tiny_cohort: Cohort):
    output = build_trainer(tiny_cohort, epochs=20).fit()
    assert output.final_loss <= output.initial_loss


def test_eight_slides_can_be_overfit(tiny_cohort: Cohort):
    assert len(tiny_cohort) == 8
    output = build_trainer(tiny_cohort, epochs=200).fit()
    assert output.final_loss < 0.1 * output.initial_loss

def test_gradient_clipping(tiny_cohort: Cohort):
    output = build_trainer(tiny_cohort, max_grad_norm=0.1, epochs=2).fit()
    assert all(torch.isfinite(p).all() for p in output.model.parameters())


def test_zero_epochs_is_rejected():
    with pytest.raises(ValueError, match="epochs"):
        build_runner_cfg(epochs=0)


def test_non_finite_loss_raises_with_the_epoch(tiny_cohort: Cohort):
    trainer = build_trainer(tiny_cohort)
    with torch.no_grad():
        trainer.model.W_head.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as excinfo:
        trainer.fit()
    assert excinfo.value.epoch == 0


def test_trainer_validates_its_inputs(tiny_cohort: Cohort):
    cfg = build_runner_cfg()
    model = HMKG(HMKGConfig.from_dict(cfg.get_model_cfg_dict()))
    bags = [tiny_cohort.bags[s] for s in tiny_cohort.slide_ids]
    records = [tiny_cohort.records[s] for s in tiny_cohort.slide_ids]
    with pytest.raises(ValueError, match="no time bin"):
        HMKGTrainer(model, bags, records, cfg)
    binned = assign_bins(records, discretize_time(records, cfg.n_bins))
    with pytest.raises(ValueError, match="paired"):
        HMKGTrainer(model, bags, binned[::-1], cfg)
    with pytest.raises(ValueError):
        HMKGTrainer(model, bags[:2], binned, cfg)
    with pytest.raises(ValueError, match="empty"):
        HMKGTrainer(model, [], [], cfg)

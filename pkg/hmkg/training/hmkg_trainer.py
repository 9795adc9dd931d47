import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from tqdm import tqdm

import wandb
from hmkg.config import HMKGRunnerConfig
from hmkg.hmkg_model import HMKG
from hmkg.slide_geometry import FeatureBag, SurvivalRecord
from hmkg.survival_head import HazardOutput, nll_surv_loss_from_tensors
from hmkg.training.optim import get_lr_scheduler, get_optimizer


class TrainingDivergedError(ValueError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainStepOutput:
    output: HazardOutput
    loss: torch.Tensor
    n_slides: int


@dataclass
class TrainOutput:
    model: HMKG
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.epoch_losses[0]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


class HMKGTrainer:
    """
    Minimises the mean NLL survival loss over a fixed list of training slides.

    Slides are visited in the given order every epoch, so a run is a function of the
    model initialisation, the data and the config.
    """

    def __init__(
        self,
        model: HMKG,
        bags: Sequence[FeatureBag],
        records: Sequence[SurvivalRecord],
        cfg: HMKGRunnerConfig,
    ) -> None:
        if len(bags) != len(records):
            raise ValueError(f"{len(bags)} bags for {len(records)} records")
        if not bags:
            raise ValueError("Cannot train on an empty set of slides")
        for bag, record in zip(bags, records):
            if bag.slide_id != record.slide_id:
                raise ValueError(f"bag {bag.slide_id} paired with record {record.slide_id}")
            if record.bin is None:
                raise ValueError(f"{record.slide_id}: no time bin assigned")

        self.model = model
        self.bags = list(bags)
        self.records = list(records)
        self.cfg = cfg

        self.batch_size = cfg.batch_size if cfg.batch_size > 0 else len(self.bags)
        self.steps_per_epoch = math.ceil(len(self.bags) / self.batch_size)
        self.n_training_steps: int = 0
        self.n_epochs_done: int = 0
        self.epoch_losses: list[float] = []

        self._bins = torch.tensor([r.bin for r in self.records], device=model.device)
        self._censored = torch.tensor(
            [float(r.censored) for r in self.records], device=model.device, dtype=model.dtype
        )

        self.optimizer = get_optimizer(list(model.parameters()), cfg)
        self.lr_scheduler = get_lr_scheduler(
            cfg.lr_scheduler_name,
            optimizer=self.optimizer,
            training_steps=cfg.epochs * self.steps_per_epoch,
            warm_up_steps=cfg.lr_warm_up_steps,
            lr_end=0.0,
        )

    def _batches(self) -> list[slice]:
        return [
            slice(start, start + self.batch_size)
            for start in range(0, len(self.bags), self.batch_size)
        ]

    def fit(self) -> TrainOutput:
        pbar = tqdm(total=self.cfg.epochs, desc="Training HMKG", disable=not self.cfg.verbose)

        for epoch in range(self.cfg.epochs):
            epoch_loss = 0.0
            for batch in self._batches():
                step_output = self._train_step(batch, epoch)
                epoch_loss += step_output.loss.item() * step_output.n_slides
                self.n_training_steps += 1
            epoch_loss /= len(self.bags)
            self.epoch_losses.append(epoch_loss)
            self.n_epochs_done = epoch + 1

            logging.info(f"epoch {epoch} | loss {epoch_loss:.6f}")
            if self.cfg.log_to_wandb:
                self._log_epoch(epoch, epoch_loss)
            pbar.set_description(f"{epoch}| NLL {epoch_loss:.4f}")
            pbar.update(1)

        pbar.close()
        return TrainOutput(model=self.model, epoch_losses=self.epoch_losses)

    def _train_step(self, batch: slice, epoch: int) -> TrainStepOutput:
        self.model.train()
        output = self.model.forward_batch(self.bags[batch])
        loss = nll_surv_loss_from_tensors(
            output.hazards,
            self._bins[batch],
            self._censored[batch],
            alpha=self.cfg.censor_alpha,
            eps=self.cfg.eps,
        )
        if not torch.isfinite(loss):
            raise TrainingDivergedError(epoch=epoch, loss=loss.item())

        self.optimizer.zero_grad()
        loss.backward()
        if self.cfg.max_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.max_grad_norm)
        self.optimizer.step()
        self.lr_scheduler.step()

        return TrainStepOutput(output=output, loss=loss.detach(), n_slides=len(self.bags[batch]))

    @torch.no_grad()
    def _log_epoch(self, epoch: int, epoch_loss: float) -> None:
        if (epoch + 1) % self.cfg.wandb_log_frequency == 0:
            wandb.log(
                {
                    "losses/nll_surv_loss": epoch_loss,
                    "details/current_learning_rate": self.optimizer.param_groups[0]["lr"],
                    "details/n_training_steps": self.n_training_steps,
                },
                step=epoch,
            )

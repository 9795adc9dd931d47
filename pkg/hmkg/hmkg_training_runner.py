import logging
import os
import signal
from dataclasses import dataclass
from typing import Any, Optional, Sequence, cast

import wandb
from hmkg.config import HMKGRunnerConfig
from hmkg.hmkg_model import HMKG, HMKGConfig
from hmkg.slide_geometry import Cohort, SurvivalRecord, load_cohort
from hmkg.survival_head import TimeBinning, assign_bins, discretize_time
from hmkg.training.hmkg_trainer import HMKGTrainer, TrainOutput


class InterruptedException(Exception):
    pass


def interrupt_callback(sig_num: Any, stack_frame: Any):
    raise InterruptedException()


@dataclass
class TrainRunOutput:
    model: HMKG
    binning: TimeBinning
    epoch_losses: list[float]
    train_slide_ids: list[str]


class HMKGTrainingRunner:
    """
    Fit the time binning and an HMKG model on the training slides of a cohort.

    Only ``train_slide_ids`` (all slides if None) are looked at: the bin cut points
    and the parameters never see held-out labels.
    """

    cfg: HMKGRunnerConfig
    cohort: Cohort
    model: HMKG

    def __init__(
        self,
        cfg: HMKGRunnerConfig,
        cohort: Optional[Cohort] = None,
        train_slide_ids: Optional[Sequence[str]] = None,
    ):
        self.cfg = cfg
        if cohort is None:
            if cfg.cohort_path is None:
                raise ValueError("Either pass a cohort or set cohort_path in the config")
            cohort = load_cohort(cfg.cohort_path)
        elif cfg.cohort_path is not None:
            logging.warning(
                f"You just passed in a cohort which will override the one specified in your configuration: {cfg.cohort_path}. As a consequence this run will not be reproducible via configuration alone."
            )
        self.cohort = cohort

        if train_slide_ids is None:
            train_slide_ids = cohort.slide_ids
        unknown = set(train_slide_ids) - set(cohort.slide_ids)
        if unknown:
            raise ValueError(f"Training slides not in cohort {cohort.cohort_id}: {sorted(unknown)}")
        self.train_slide_ids = list(train_slide_ids)

        records = cohort.records
        train_records: list[SurvivalRecord] = [records[s] for s in self.train_slide_ids]
        self.binning = discretize_time(train_records, cfg.n_bins)
        self.train_records = assign_bins(train_records, self.binning)

        self.model = HMKG(HMKGConfig.from_dict(self.cfg.get_model_cfg_dict()))
        self.model.time_binning = self.binning

    def run(self, out_path: Optional[str] = None) -> TrainRunOutput:
        """
        Train, optionally save the final model to ``out_path`` and return it.
        """

        if self.cfg.log_to_wandb:
            wandb.init(
                project=self.cfg.wandb_project,
                config=cast(Any, self.cfg),
                name=self.cfg.run_name,
            )

        trainer = HMKGTrainer(
            model=self.model,
            bags=[self.cohort.bags[s] for s in self.train_slide_ids],
            records=self.train_records,
            cfg=self.cfg,
        )
        train_output = self.run_trainer_with_interruption_handling(trainer)

        if out_path is not None:
            self.model.save_model(out_path)
            self.cfg.to_json(os.path.join(out_path, "runner_cfg.json"))

        if self.cfg.log_to_wandb:
            wandb.finish()  # type: ignore

        return TrainRunOutput(
            model=train_output.model,
            binning=self.binning,
            epoch_losses=train_output.epoch_losses,
            train_slide_ids=self.train_slide_ids,
        )

    def run_trainer_with_interruption_handling(self, trainer: HMKGTrainer) -> TrainOutput:
        try:
            # signal handlers (if preempted)
            signal.signal(signal.SIGINT, interrupt_callback)
            signal.signal(signal.SIGTERM, interrupt_callback)

            train_output = trainer.fit()

        except (KeyboardInterrupt, InterruptedException):
            logging.warning("interrupted, saving progress")
            self.save_checkpoint(trainer, checkpoint_name=f"epoch_{trainer.n_epochs_done}")
            logging.warning("done saving")
            raise
        finally:
            signal.signal(signal.SIGINT, signal.default_int_handler)
            signal.signal(signal.SIGTERM, signal.SIG_DFL)

        return train_output

    def save_checkpoint(self, trainer: HMKGTrainer, checkpoint_name: int | str) -> str:
        checkpoint_path = os.path.join(
            self.cfg.checkpoint_path, str(self.cfg.run_name), str(checkpoint_name)
        )
        os.makedirs(checkpoint_path, exist_ok=True)
        trainer.model.save_model(checkpoint_path)
        self.cfg.to_json(os.path.join(checkpoint_path, "runner_cfg.json"))
        return checkpoint_path

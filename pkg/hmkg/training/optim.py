import torch
import torch.optim as optim
import torch.optim.lr_scheduler as lr_scheduler

from hmkg.config import HMKGRunnerConfig


def get_optimizer(
    params: list[torch.nn.Parameter], cfg: HMKGRunnerConfig
) -> optim.Optimizer:
    if cfg.optimizer == "sgd":
        return optim.SGD(
            params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
        )
    elif cfg.optimizer == "adam":
        return optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        raise ValueError(f"Unsupported optimizer: {cfg.optimizer}")


#  Constant
#  Cosine Annealing with Warmup
def get_lr_scheduler(
    scheduler_name: str,
    optimizer: optim.Optimizer,
    training_steps: int,
    warm_up_steps: int,
    lr_end: float,
) -> lr_scheduler.LRScheduler:
    """
    Args:
        scheduler_name (str): "constant" or "cosineannealing"
        optimizer (optim.Optimizer): Optimizer to use
        training_steps (int): Total number of optimizer steps
        warm_up_steps (int): Number of linear warm up steps
        lr_end (float): Final learning rate of the cosine schedule
    """
    if warm_up_steps >= training_steps and warm_up_steps > 0:
        raise ValueError(
            f"warm_up_steps ({warm_up_steps}) must be smaller than training_steps ({training_steps})"
        )
    main_scheduler = _get_main_lr_scheduler(
        scheduler_name.lower(),
        optimizer,
        steps=training_steps - warm_up_steps,
        lr_end=lr_end,
    )
    schedulers: list[lr_scheduler.LRScheduler] = []
    milestones: list[int] = []
    if warm_up_steps > 0:
        schedulers.append(
            lr_scheduler.LinearLR(
                optimizer,
                start_factor=1 / warm_up_steps,
                end_factor=1.0,
                total_iters=warm_up_steps - 1,
            ),
        )
        milestones.append(warm_up_steps)
    schedulers.append(main_scheduler)
    return lr_scheduler.SequentialLR(
        schedulers=schedulers,
        optimizer=optimizer,
        milestones=milestones,
    )


def _get_main_lr_scheduler(
    scheduler_name: str,
    optimizer: optim.Optimizer,
    steps: int,
    lr_end: float,
) -> lr_scheduler.LRScheduler:
    if scheduler_name == "constant":
        return lr_scheduler.LambdaLR(optimizer, lr_lambda=lambda steps: 1.0)
    elif scheduler_name == "cosineannealing":
        return lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(steps, 1), eta_min=lr_end)  # type: ignore
    else:
        raise ValueError(f"Unsupported scheduler: {scheduler_name}")

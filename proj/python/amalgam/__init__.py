"""Adaptive knowledge amalgamation: float64 CPU core with a thin Python layer."""

from ._core import (
    AmalgamError,
    BlockNet,
    BlockNetSpec,
    HeadSpec,
    ResourceCount,
    default_tasks,
    entropy_impurity,
    fa_forward,
    generate,
    gradient_suite,
    load_dataset,
    load_net,
    run_cli,
    save_net,
    select_batch,
    select_teacher,
    soft_target_loss,
    softmax,
    transfer_loss,
    weight_regularization,
)

__all__ = [name for name in dir() if not name.startswith("_")]

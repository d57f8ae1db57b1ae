"""Bindings for the MeanFlow incubation library."""

from ._mfi import (
    Checkpoint,
    Error,
    VelocityNet,
    calibrate_hidden,
    cli,
    count_params,
    meta_budget,
    parse_cifar,
    sample_times,
    target_velocity,
)

__all__ = [
    "Checkpoint",
    "Error",
    "VelocityNet",
    "calibrate_hidden",
    "cli",
    "count_params",
    "meta_budget",
    "parse_cifar",
    "sample_times",
    "target_velocity",
]

"""Experiment front end: datasets, plans, plotting and the CLI."""

from .datasets import (
    IdxFormatError,
    load_mnist_idx,
    split_train_val,
    subset_first_k,
    synth_blobs,
)
from .oracles import oracle_suite
from .plans import ExperimentPlan, PlanError, RunArtifact, builtin_plan, run_plan

"""Search-based tensor program tuning on a deterministic machine model.

The pipeline: declare a compute DAG (`workloads`, `graph`, `expr`),
enumerate schedule sketches (`sketch`), fill them with concrete tile
sizes and annotations (`annotate`), evolve candidates under a learned
cost model (`evolve`, `model`, `features`), price them on the machine
model (`machine`), and split a measurement budget across many tasks
(`sched`).  `interp` executes any program for equivalence checks; `cli`
drives full runs and their logs.
"""

from .annotate import AnnotationPolicy, sample_program
from .evolve import EvolutionConfig, crossover, evolve
from .graph import ComputeDAG, topological_order
from .interp import interpret, random_inputs, reference_outputs
from .ir import Program, naive_program, replay, simplify, validate
from .machine import MachineSpec, MeasureLimits, machine_cost, measure_batch
from .model import CostModel, TrainHyper, TrainingRecord, eval_metrics, train
from .sched import (
    Objective,
    SchedulerParams,
    Task,
    TuneSettings,
    make_task,
    tune,
)
from .sketch import generate_sketches, generate_sketches_traced
from .workloads import REGISTRY, build

__version__ = "0.1.0"

__all__ = [
    "AnnotationPolicy",
    "ComputeDAG",
    "CostModel",
    "EvolutionConfig",
    "MachineSpec",
    "MeasureLimits",
    "Objective",
    "Program",
    "REGISTRY",
    "SchedulerParams",
    "Task",
    "TrainHyper",
    "TrainingRecord",
    "TuneSettings",
    "build",
    "crossover",
    "eval_metrics",
    "evolve",
    "generate_sketches",
    "generate_sketches_traced",
    "interpret",
    "machine_cost",
    "make_task",
    "measure_batch",
    "naive_program",
    "random_inputs",
    "reference_outputs",
    "replay",
    "sample_program",
    "simplify",
    "topological_order",
    "train",
    "tune",
    "validate",
    "__version__",
]

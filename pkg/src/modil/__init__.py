"""Class-incremental modulation recognition on synthetic I/Q frames.

A numpy layer engine, a signal generator, a small CNN with a growable head,
exemplar memory, the iCaRL/BiC/LUCIR learners with Finetune and Joint
baselines, and a scenario runner that records accuracy matrices.
"""

__version__ = "0.1.0"

from .backbone import Backbone, build_backbone
from .learners import LearnerConfig, LearnerState, new_state, predict, train_task
from .memory import ExemplarMemory, herding_select, nme_classify
from .scenario import RunReport, TaskSchedule, make_schedule, memory_sweep, run_scenario
from .sigmod import CATALOG, Dataset, constellation_for, make_dataset, read_dataset, write_dataset

__all__ = [
    "Backbone", "build_backbone", "LearnerConfig", "LearnerState", "new_state", "predict", "train_task",
    "ExemplarMemory", "herding_select", "nme_classify", "RunReport", "TaskSchedule", "make_schedule",
    "memory_sweep", "run_scenario", "CATALOG", "Dataset", "constellation_for", "make_dataset",
    "read_dataset", "write_dataset",
]

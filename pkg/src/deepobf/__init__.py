"""Structural obfuscation of convolutional networks by shallow sequential simulators."""

from .analyzer import (
    ConvParams,
    ReceptiveField,
    SimLayer,
    SimulatorPlan,
    collapse_linear_block,
    plan_simulator,
    receptive_field,
)
from .data import DatasetSpec, ImageBatch, Split, batches, load_cifar_binary, parse_spec, synth_generate
from .distill import JointTrainConfig, hint_loss, task_loss, train_simulator
from .evaluation import (
    AttackConfig,
    DeclinationRow,
    accuracy,
    attack_incremental,
    attack_transfer,
    declination,
    declination_table,
    inference_time,
    model_size,
    overhead,
)
from .graph import BlockSpec, LayerSpec, ModelGraph
from .modelfile import load, save
from .pipeline import ObfuscationPlan, ObfuscationReport, default_plan, finetune, obfuscate, obfuscate_round1, obfuscate_round2
from .tensor import Tensor
from .training import TrainConfig, TrainLog, train_labels
from .zoo import mini_inception

__version__ = "0.1.0"

"""Online learning for streams whose feature set changes underfoot.

The package couples each erratically available ("auxiliary") feature to a
dedicated node in one hidden layer of a streaming neural network.  When a
feature is absent its node is dropped for the step, additional nodes are
dropped at random to keep the total dropout rate steady, and everything a
dropped node or absent input touches is frozen for that update.  Models learn
in a single predict-then-train pass; the harness reproduces whole experiment
grids from seeded configs.
"""
from .auxlayer import (AuxInput, AuxLayerState, DropoutMask, build_aux_input, freeze_masks,
                       make_mask, masked_backward, masked_forward, param_count,
                       register_sudden_feature)
from .errors import ConfigError, DataFormatError, NonFiniteGradientError, RunAbortError
from .harness import (AggregateReport, ExperimentConfig, RunRecord, ablate, compare_baseline,
                      run_experiment, single_run, sweep_probability, windowed_errors)
from .models import (AuxDropModel, ModelConfig, ablation_strategy, build_model,
                     finite_diff_check, hedge_update, predict, train_step)
from .nn import ClassifierHead, DenseLayer, GradientBuffer, sgd_step, softmax, softmax_xent
from .streams import (HaphazardInstance, ScheduleWindow, StreamSpec, bernoulli_stream,
                      load_dense, load_sparse, load_table, schedule_stream, split_base_aux,
                      stream_instances, trapezoidal_stream)

__version__ = "0.1.0"

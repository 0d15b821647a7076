"""On-device personalization sandbox for RNN-T speech models."""

from .autodiff import Tape, apply_op, backward, finite_difference, max_relative_error
from .cache import CacheConfig, Schedule, effective_epoch, generate_schedule, session_window
from .model import (ModelConfig, ParamGroup, RnnTransducer, count_params,
                    dequantize_int8, load_checkpoint, param_breakdown,
                    quantize_int8, save_checkpoint, select_trainable)
from .rnnt_loss import brute_force_loss, rnnt_loss
from .splitgrad import SplitPlan, combined_backward, memory_report, split_backward
from .tensor import MemoryLedger, NonFiniteError, Tensor, track
from .trainer import (MomentumOptimizer, OptimizerConfig, PersonalizationResult,
                      SessionMetrics, SyntheticTaskSpec, evaluate,
                      run_personalization, synth_generate, wer)

__version__ = "0.1.0"

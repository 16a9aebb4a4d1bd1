"""In-context equalization of time-varying MIMO channels.

Channel simulation, a genie-aided LMMSE baseline, adaptive-filter attention
kernels (LMS / multi-step LMS / LRMS) and a small transformer equalizer that
learns from the prompt context.
"""

from .baselines import lmmse_estimate, zero_predictor
from .channel import (ChannelParams, ChannelTrace, Prompt, PromptBatch, evolve_trace, make_prompt,
                      observe, quantize_uniform, read_prompts, sample_qpsk, write_prompts)
from .estimators import ICLEqualizer, LMMSEEqualizer, ZeroEqualizer, check_prompt_batch
from .harness import ResultTable, SweepSpec, emit_csv, emit_plot, evaluate, run_sweep
from .kernels import (lms_step, lrms_step, multi_lms_step, run_recurrent, run_recurrent_grad,
                      softmax_attention)
from .model import ModelConfig
from .numerics import ContractViolation, SingularityError, make_rng, sample_cgauss, solve_hpd
from .training import TrainConfig, train

__version__ = "0.1.0"

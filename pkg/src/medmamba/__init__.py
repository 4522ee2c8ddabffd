"""Multi-scale bidirectional selective state-space engine for multichannel
time-series classification, with centralization analysis, synthetic task
generators, and a verified reverse-mode differentiation core."""

from .analysis import (CentralizationReport, centralization_report, dic,
                       mixer_mi, noise_suppression_bound, optimal_mixer, sci,
                       scale_mismatch, worst_case_mismatch)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Recording, Split, WindowSet, build_windows, load_recordings,
                   subject_split, synth_centralized, synth_multiscale, window,
                   zscore)
from .model import (ModelConfig, attention_pool, bimamba_block,
                    channel_dropout, channel_mix, count_parameters,
                    embed_scale, forward, fuse_and_classify, gated_ffn,
                    init_params, predict, token_count)
from .numerics import Rng, Tape, Tensor, grad_check
from .ssm import (ScanInputs, SsmParams, bidirectional_scan, s4d_init,
                  scan_complexity_probe, selective_projections, selective_scan,
                  zoh_discretize)
from .training import (AdamState, MetricsReport, TrainConfig, TrainResult,
                       adamw_step, clip_grad_norm, compute_metrics,
                       lr_schedule, smoothed_ce, train_loop)

__version__ = "0.1.0"

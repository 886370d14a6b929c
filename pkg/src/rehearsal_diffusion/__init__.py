"""Task-conditioned diffusion over state-action windows, trained across tasks with experience rehearsal."""
from .autodiff import AdamState, adam_step, backward, gradcheck
from .datasets import (GaussianNormalizer, RehearsalBuffer, TrajectoryDataset, WindowSet, build_rehearsal,
                       corrupt_observations, fit_normalizer, sample_batch, split_windows)
from .denoiser import (DenoiserConfig, DenoiserParams, attach_lora, embed_condition, init_denoiser, merge_lora,
                       predict_noise)
from .evaluator import ContinualLog, MetricReport, compute_metrics, evaluate_task, evaluate_tasks
from .sampler import (GenerationRequest, GuidanceConfig, cfg_combine, ddim_step, ddpm_reverse_step,
                      forward_noise, generate, generate_batch)
from .schedule import NoiseSchedule, ddim_subsequence, linear_schedule
from .trainer import TrainConfig, diffusion_loss, run_continual, train_task

__version__ = "0.1.0"

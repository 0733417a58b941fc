"""Backdoor forensics for denoising diffusion models.

Inject backdoors, estimate trigger-shift profiles, invert unknown triggers,
classify models and reinforce known triggers, at desk scale.
"""
from .amplify import AmplifyResult, amplify
from .attacks import (BackdoorSpec, Method, TargetImage, TriggerPattern, VillanSchedulers,
                      backdoor_forward_sample, coefficients_for, ddpm_villan_schedulers, train_backdoor)
from .detection import DetectionConfig, DetectionVerdict, detect, kl_statistic, sim_score
from .diffusion import ImageBatch, TrainConfig, forward_sample, generate, reverse_step, train_clean
from .inversion import InversionConfig, InversionResult, invert_trigger, loss_dc, loss_mds
from .metrics import MetricReport, asr, calibrate_tau, detection_metrics, l2d
from .schedule import NoiseSchedule, desk_schedule, make_linear_schedule
from .shift import ShiftProfile, estimate_lambda_graybox, lambda_whitebox

__version__ = "0.1.0"

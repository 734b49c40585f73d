"""Desk-scale activation-amplification detector and the oblivious attack that evades it."""

from .attacks import (AttackConfig, AttackOutcome, ObliviousResult, margin_loss, oblivious_attack,
                      pgd_targeted, untargeted_success)
from .data import Dataset, SyntheticSpec, load_idx, split, synth_blobs
from .detector import (Detector, DetectorConfig, ImportanceProfile, Verdict, augmented_forward,
                       calibrate, detect, extract_importance)
from .harness import EvalReport, RunConfig, emit_report, eval_attack, eval_clean, run_pipeline
from .model import (ForwardTrace, MlpNetwork, TrainConfig, forward, input_gradient, load_checkpoint,
                    predict, save_checkpoint, train)
from .numcore import Prng

__version__ = "0.1.0"

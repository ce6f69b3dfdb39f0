"""
URA feedback simulator - unsourced random access with threshold-based feedback.
"""

__version__ = "0.3.0"
__description__ = "Link-level Monte-Carlo simulator for unsourced random access with threshold feedback"

from ura_feedback.models import ExperimentConfig, FeedbackVariant
from ura_feedback.harness import run_experiment, run_slot, find_min_ebn0
from ura_feedback.cli import parse_config

__all__ = ["ExperimentConfig", "FeedbackVariant", "run_experiment", "run_slot", "find_min_ebn0", "parse_config"]

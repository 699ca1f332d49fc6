"""Offline RL over the MoE-LM latent space."""

from .critics import CriticSet, ExpertValueFn, LatentNorm, MultiHeadCritic, load_wiring
from .policy import DMPolicy, Scorer, select_action, softmax_probs
from .trainers import ALGOS, RLConfig, make_trainer

__all__ = ["ALGOS", "CriticSet", "DMPolicy", "ExpertValueFn", "LatentNorm", "MultiHeadCritic", "RLConfig", "Scorer",
           "load_wiring", "make_trainer", "select_action", "softmax_probs"]

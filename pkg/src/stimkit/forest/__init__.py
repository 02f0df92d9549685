"""Heterogeneous treatment effects: causal forest, nuisances, and score-based summaries."""

from .causal import CausalForest
from .effects import (BlpResult, EffectSet, blp, conditional_mpc, dr_scores, first_difference,
                      fit_nuisances)

__all__ = ["BlpResult", "CausalForest", "EffectSet", "blp", "conditional_mpc", "dr_scores",
           "first_difference", "fit_nuisances"]

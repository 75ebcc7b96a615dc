"""Utility maximization under proportional transaction costs on finite event trees."""

from .event_tree import EventTree, MarketSpec, Node, load_market, validate
from .portfolio import LogUtility, PowerUtility, Strategy, parse_utility
from .primal_solver import Solution, conditional_value, marginal_value, solve_frictional, solve_frictionless
from .dual_solver import Deflator, DualSolution, dual_value, extract_deflator, verify_deflator
from .cps import PriceSystem, dual_value_via_cps, find_cps, is_martingale
from .shadow import ShadowCandidate, ShadowVerdict, candidate_from_dual, verify_shadow

__version__ = "0.1.0"

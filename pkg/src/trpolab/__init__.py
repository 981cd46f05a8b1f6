"""Trust-region policy optimization, from exact tabular theory to sampled training."""
from .mdp import TabularMdp, TabularPolicy, evaluate_exact
from .policies import NetworkSpec
from .solver import SamplingConfig, TrustRegionConfig

__all__ = ["TabularMdp", "TabularPolicy", "evaluate_exact", "NetworkSpec", "SamplingConfig",
           "TrustRegionConfig"]
__version__ = "0.1.0"

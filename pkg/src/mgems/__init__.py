"""mgems: seedable multi-agent microgrid energy trading simulator.

Three agents (deferrable loads, PV, storage) trade through a uniform-price
bidding market while coordinating through a parameter server that can lose
messages.  The main algorithm couples per-agent double-DQN learners with
Dirichlet beliefs over peers' actions and a belief-based correlated
equilibrium for joint-action selection under failures; Nash-DQN and a
slot-wise consensus-ADMM dispatcher serve as baselines.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config, write_default_config  # noqa: F401
from .harness import run_experiment, run_seed, sweep_experiment   # noqa: F401

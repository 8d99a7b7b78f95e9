"""c2sim: command-and-control attack campaign simulator and PPO trainer.

Subpackages:

- ``net_model``: network domain types and the YAML manifest format
- ``netgen``: probabilistic enterprise network generation
- ``c2_env``: the three-stage attack MDP with firewall dynamics
- ``neural``: minimal feed-forward actor/critic networks and optimizer
- ``ppo``: clipped-surrogate policy optimization training loop
- ``analysis``: attack-path sampling, pruning, and summary statistics
- ``cli``: command-line entry points
"""

__version__ = "0.1.0"

from .net_model import (  # noqa: F401
    NetworkTopology,
    Subnet,
    Host,
    ServiceBinding,
    Vulnerability,
    Firewall,
    FirewallParams,
    AllowRule,
    load_topology,
    save_topology,
    firewall_path,
)

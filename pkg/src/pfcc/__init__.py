"""Propensity formation-containment control for heterogeneous multi-agent
systems on directed graphs.

The package provides the communication-graph machinery, the distributed
influence-propagation algorithm, data-based adaptive observers, model-based
Riccati gain synthesis, an online data-driven learner verified against that
synthesis, and a deterministic tick simulator with a CLI front end.
"""

__version__ = "0.1.0"

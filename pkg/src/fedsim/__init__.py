"""Federated learning orchestration at desk scale.

Server-side round loop with pluggable aggregation strategies, a framed
binary wire protocol over persistent streams, from-scratch trainers for
small models, and simulators for network and compute heterogeneity.
"""

__version__ = "0.1.0"

"""Scheduling toolkit for elastic data-parallel training on ring all-reduce clusters.

The package models per-step communication cost for the common all-reduce
algorithms, fits convergence and speed models online with nonnegative least
squares, allocates GPUs to concurrent jobs with a power-of-two doubling
heuristic, and evaluates strategies in a seeded discrete-event cluster
simulation.
"""

__version__ = "0.1.0"

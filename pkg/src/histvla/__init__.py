"""Hierarchical spatio-temporal planning on synthetic driving scenes.

Submodules: ``geometry``, ``sparsifier``, ``meta_action``, ``policy``,
``planner``, ``scorer``, ``scenario`` and ``cli``; ``kernels`` reports which
scoring backend is active.
"""

__version__ = "0.1.0"

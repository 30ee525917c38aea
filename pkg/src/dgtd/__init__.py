"""Distributional gradient temporal-difference learning under the Cramer distance.

Modules:

``value_distribution``  categorical and finite-support distributions, Cramer metric, Bellman backups
``mdp_env``             tabular MDPs, sampling streams, grid world and cart-pole
``approximator``        parametric CDF models with gradients and Hessian-vector products
``objectives``          exact D-MSPBE, its gradient, MSPBE and the Cramer Bellman error
``algorithms``          distributional GTD2 / TDC / Greedy-GQ and the scalar baselines
``saddle_linear``       the linear saddle-point formulation and its duality-gap certificate
``harness``             configs, presets, seeded runs and CSV output (``dgtd`` CLI)
"""

__version__ = "0.1.0"

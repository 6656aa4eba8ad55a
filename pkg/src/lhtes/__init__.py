"""Co-design toolkit for latent-heat thermal energy storage devices.

Concurrently optimizes the per-element material layout (pseudo-density
field over a quarter-annulus domain) and the choice of the conductive
and phase-change materials (continuous latent coordinates decoded into
physical properties) to maximize the energy discharged over a fixed
horizon under a cost budget.
"""

__version__ = "0.1.0"

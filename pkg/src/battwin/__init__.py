"""battwin: a lithium-ion cell simulator with a CNN surrogate twin.

Modules cover the finite-volume cell simulator (``electrochem``), drive
cycle and dataset generation (``cycles``), the hand-rolled differentiable
layer kit (``nn``), the surrogate network and training loop (``surrogate``),
one-step/K-step evaluation (``evaluate``), and state-of-health estimation
(``soh``).  The ``battwin`` console script orchestrates the full pipeline.
"""

__version__ = "0.1.0"

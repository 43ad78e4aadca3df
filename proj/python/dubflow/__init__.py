"""Self-bootstrapping visual dubbing on a procedural toy world.

Thin re-export of the compiled extension: toy-world rendering with analytic
ground truth, flow-matching utilities, generator/editor training, dubbing,
pair filtering, evaluation, and the oracle verification battery.
"""

try:
    from ._dubflow import *  # noqa: F401,F403  (installed wheel layout)
except ImportError:
    from _dubflow import *  # noqa: F401,F403  (build-tree layout)

"""Neural task programming on a kinematic tabletop simulator.

Modules: ``worldsim`` (simulator), ``taskgen`` (task families and splits),
``expert`` (demonstrations and annotated traces), ``numcore`` (autodiff),
``model`` (networks), ``interpreter`` (recursive runtime), ``trainer`` and
``evalharness`` (experiments and reports).
"""

__version__ = "0.1.0"

"""certiguard: conformal-calibrated measurement-robust CBF safety filtering.

The package splits into the calibration side (``conformal``, ``perception``),
the plant side (``world``), the control side (``barrier``, ``solver``,
``runtime``), and the experiment harness (``montecarlo``, ``cli``).
"""

__version__ = "0.1.0"

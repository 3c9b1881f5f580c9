"""Plot rendering for the scattering harness CSV artifacts.

These scripts never recompute physics; they only draw what the solve
harness emitted.
"""

__version__ = "0.1.0"

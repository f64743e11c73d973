"""Quantum trajectories for systems driven by a superposition of coherent states.

Subpackages by layer:

* :mod:`cattraj.linalg` -- dense complex linear algebra helpers,
* :mod:`cattraj.model` -- system operators, waveforms, drive specification,
* :mod:`cattraj.collision` -- discrete repeated-interaction engine and the
  exact-chain oracle,
* :mod:`cattraj.sme` -- continuous-time stochastic master equation
  integrators plus the deterministic average-evolution hierarchy,
* :mod:`cattraj.cavity` -- closed-form single-mode cavity oracle,
* :mod:`cattraj.cli` -- batch experiment front-end.
"""

from . import errors
from .model import DriveSpec, GridSpec, SystemModel, Waveform

__version__ = "0.1.0"

__all__ = ["errors", "DriveSpec", "GridSpec", "SystemModel", "Waveform", "__version__"]

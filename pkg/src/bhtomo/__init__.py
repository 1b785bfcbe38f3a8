"""Tomographic reconstruction of dynamic emission around a black hole.

Pre-traced curved light rays turn volume rendering into a fixed sparse
integration; a Keplerian rotation model ties the time-varying emission to a
single canonical volume and a rotation axis, both recovered from simulated
interferometric (or image-domain) measurements by gradient descent.
"""

__version__ = "0.1.0"

from . import (cli, dynamics, field, geodesics, geometry, instrument,
               render, solver, synth)

__all__ = ["cli", "dynamics", "field", "geodesics", "geometry",
           "instrument", "render", "solver", "synth", "__version__"]

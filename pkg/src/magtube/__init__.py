"""Magnetic Schroedinger operators in deformed tubes: geometry, gauges,
finite-difference assembly, eigensolvers and experiment drivers."""

__version__ = "0.1.0"

from .geometry import CurveSpec, FrameField, build_curve, disk_section, square_section, validate_tube
from .fields import MagneticField, Gauge, make_field, landau_gauge, mirror_gauge
from .hermitian import HermitianOperator
from .eigsolve import SolveRequest, SpectrumReport, lowest_eigs, dense_fallback
from .operators import (Grid, grid2, grid3, well_potential, assemble_hv, ground_state_2d,
                        lambda1_disk, prepare_tube, assemble_h3d)

__all__ = [
    "CurveSpec", "FrameField", "build_curve", "disk_section", "square_section", "validate_tube",
    "MagneticField", "Gauge", "make_field", "landau_gauge", "mirror_gauge", "HermitianOperator",
    "SolveRequest", "SpectrumReport", "lowest_eigs", "dense_fallback", "Grid", "grid2", "grid3",
    "well_potential", "assemble_hv", "ground_state_2d", "lambda1_disk", "prepare_tube",
    "assemble_h3d",
]

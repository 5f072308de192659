"""Desk-scale simulator of an MRI-guided autonomous robotic ultrasound pipeline.

The package is organized as a numpy/scipy library; each module covers one
stage of the workflow:

* :mod:`robus.geom`       -- frame-tagged rigid/affine transform algebra
* :mod:`robus.volume`     -- scalar volumes, phantom synthesis, surface extraction
* :mod:`robus.sensor`     -- depth-camera simulation and octree change detection
* :mod:`robus.calib`      -- hand-eye calibration, probe geometry, calibration chain
* :mod:`robus.surfmatch`  -- nearest-neighbor index and ICP surface matching
* :mod:`robus.trajectory` -- scan-line sampling and surface projection
* :mod:`robus.robotsim`   -- compliant-contact sweep simulation
* :mod:`robus.acquire`    -- simulated ultrasound frame acquisition
* :mod:`robus.compound`   -- 3D volume compounding from tracked frames
* :mod:`robus.register`   -- intensity-based US/MRI registration and chain update
* :mod:`robus.pipeline`   -- end-to-end orchestration, metrics, file formats
* :mod:`robus.cli`        -- command-line front end over the pipeline stages
"""

from . import errors
from .geom import AffineTransform, RigidTransform

__all__ = ["errors", "AffineTransform", "RigidTransform"]
__version__ = "0.1.0"

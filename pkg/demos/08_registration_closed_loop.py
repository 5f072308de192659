"""The closed loop: detect a chain error by registration, update, re-scan.

A controlled rigid error is injected into the camera-to-MRI member of
the chain. The first sweep's volume registers against the MRI and
recovers that error; folding it back into the patient calibration makes
the second sweep land where it was planned, and its registration only
sees the leftover fraction of a millimetre.
"""

import numpy as np

from robus.pipeline import (
    InjectedErrorSpec, build_scene, calibrate_system, default_config,
    run_closed_loop,
)
from robus.volume import PhantomSpec

cfg = default_config(
    seed=4,
    injected_error=InjectedErrorSpec(translation_range=(4.0, 5.0),
                                     rotation_range=(4.0, 5.0)),
    speckle=0.0,
    phantom=PhantomSpec(dims=(76, 76, 76), spacing=(1.25, 1.25, 1.25)),
)
scene = build_scene(cfg)
system = calibrate_system(scene)
print(f"injected chain error: {np.linalg.norm(system.injected.translation):.2f} mm "
      f"translation component (about the anatomy center)")

metrics = run_closed_loop(cfg, scene, system)
it1, it2 = metrics.iterations
print(f"\nscan #1 registration detected {it1.detected_translation_mm:.2f} mm / "
      f"{it1.detected_rotation_deg:.2f} deg "
      f"(similarity {it1.registration.similarity_before:.3f} -> "
      f"{it1.registration.similarity_after:.3f})")
print(f"scan #1 residual vs ground truth: {it1.residual_translation_mm:.2f} mm / "
      f"{it1.residual_rotation_deg:.2f} deg")
print(f"\nafter the calibration update, scan #2 detected only "
      f"{it2.detected_translation_mm:.2f} mm / {it2.detected_rotation_deg:.2f} deg")
print(f"closed-loop improvement: {it1.detected_translation_mm:.2f} mm -> "
      f"{it2.detected_translation_mm:.2f} mm")

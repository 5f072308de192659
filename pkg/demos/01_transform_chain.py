"""Frame-tagged transform algebra and the calibration chain.

Every spatial relation in the pipeline is a RigidTransform (or
AffineTransform) that knows which frame it maps from and to; composing
mismatched frames is an error, not a silent bug. This script builds the
full ultrasound chain image -> tool -> end-effector -> world and the
patient chain MRI -> camera -> world, then walks one point through both.
"""

import numpy as np

from robus.calib import (
    CalibrationState, UsImageGeometry, chain_mri_to_world, chain_us_to_world,
)
from robus.geom import (
    CAMERA, END_EFFECTOR, MRI, PATIENT, TOOL,
    RigidTransform, compose, invert, rotation_about_axis, rotation_angle_norm,
)

# A transform carries its frames; composition checks them.
t_cam = RigidTransform(rotation_about_axis([0, 0, 1], 30.0), [10.0, 0.0, 1500.0],
                       CAMERA, "World")
print("camera pose maps", t_cam.from_frame, "->", t_cam.to_frame)
print("rotation magnitude:", round(rotation_angle_norm(t_cam), 3), "deg")

try:
    compose(t_cam, t_cam)  # Camera->World twice: inner frames disagree
except Exception as exc:
    print("composing the wrong way round fails loudly:", exc)

# The full chain for one tracked robot pose.
state = CalibrationState.initial(
    geometry=UsImageGeometry(s_x=0.3, s_y=0.3, t_x=-96.0, t_y=0.0,
                             width=192, height=160),
    t_ee_from_tool=RigidTransform(rotation_about_axis([1, 0, 0], 5.0),
                                  [0.0, 25.0, 140.0], TOOL, END_EFFECTOR),
    t_world_from_camera=t_cam,
    t_camera_from_mri=RigidTransform(rotation_about_axis([0, 1, 0], -15.0),
                                     [40.0, -60.0, 900.0], MRI, CAMERA),
)
robot_pose = RigidTransform(rotation_about_axis([0, 1, 0], 180.0),
                            [250.0, 100.0, 400.0], END_EFFECTOR, "World")

us_to_world = chain_us_to_world(state, robot_pose)
print("\nimage pixel (96, 80) lands at world",
      np.round(us_to_world.apply(np.array([96.0, 80.0, 0.0])), 2), "mm")

world_from_mri, mri_from_world = chain_mri_to_world(state)
p_mri = np.array([12.0, -8.0, 30.0])
p_world = world_from_mri.apply(p_mri)
print("MRI point", p_mri, "-> world", np.round(p_world, 2))
print("and back:", np.round(mri_from_world.apply(p_world), 9))

# Inverses swap frames and cancel exactly.
roundtrip = compose(invert(world_from_mri), world_from_mri)
print("chain times its inverse is identity within",
      f"{np.abs(roundtrip.matrix4() - np.eye(4)).max():.2e}")

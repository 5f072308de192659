"""From a planned line in the MRI to a force-controlled sweep on the skin.

Equidistant samples along the planned segment snap to their nearest
surface points; the virtual-spring controller then drives the probe
through the poses while regulating the contact force to the 5 N setpoint
and never exceeding the 25 N safety limit.
"""

import numpy as np

from robus.pipeline import build_scene, calibrate_system, default_config
from robus.robotsim import StiffnessParams, run_sweep
from robus.trajectory import plan_in_world, sample_line

cfg = default_config(seed=1)
scene = build_scene(cfg)
system = calibrate_system(scene)

samples = sample_line(cfg.plan)
print(f"plan: {cfg.plan.length:.0f} mm line, {len(samples)} samples "
      f"at {cfg.plan.sample_spacing:.0f} mm spacing")

poses = plan_in_world(cfg.plan, system.state0, system.patient_cloud_camera)
print(f"projected to {len(poses)} scan poses on the patient surface")
tilts = [np.degrees(np.arccos(min(1, -sp.tool_pose.rotation[2, 2])))
         for sp in poses]
print(f"probe tilt range across the sweep: "
      f"{min(tilts):.1f} to {max(tilts):.1f} deg from vertical")

params = StiffnessParams()
result = run_sweep(poses, params, scene.contact, rate=cfg.sweep_rate)
forces = np.array([f.contact_force for f in result.frames])
print(f"\nsweep {result.status}: {len(result.frames)} tracked frames over "
      f"{result.frames[-1].timestamp:.1f} s")
touchdown = int(np.argmax((forces >= 4.0) & (forces <= 6.0)))
contact = forces[touchdown:] > 0.05
in_band = ((forces[touchdown:][contact] >= 4.0)
           & (forces[touchdown:][contact] <= 6.0))
print(f"force regulation: {100 * in_band.mean():.1f}% of in-contact frames "
      f"within [4, 6] N around the {params.f_desired:.0f} N setpoint")
print(f"peak force: {forces.max():.2f} N (abort limit {params.f_abort:.0f} N)")

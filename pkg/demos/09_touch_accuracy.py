"""Point-touch accuracy under the depth camera's noise model.

Checker-corner targets are picked from the noisy depth cloud and the
robot is commanded through the freshly calibrated chain to touch them;
measured 3D offsets split into the camera's lateral plane (which limits
pose accuracy) and its depth axis (which the force controller absorbs in
practice).
"""

from robus.pipeline import cmd_touch_accuracy, noisy_default_config

cfg = noisy_default_config(seed=0)
print(f"camera noise model: {cfg.camera_noise_xy:.2f} mm per lateral axis, "
      f"{cfg.camera_noise_z:.0f} mm depth")
print(f"marker observation noise: {cfg.marker_noise_mm} mm / "
      f"{cfg.marker_noise_deg} deg")

stats = cmd_touch_accuracy(cfg, n_targets=20, n_seeds=10)
print(f"\n{stats.n_samples} touches over 20 targets x 10 recalibrations")
print(f"lateral (x-y) accuracy: {stats.xy_mean:.2f} +/- {stats.xy_std:.2f} mm")
print(f"depth (z) accuracy:     {stats.z_mean:.2f} +/- {stats.z_std:.2f} mm")
print("\ndepth errors dominate, as expected from the sensor: the sweep's")
print("force control compensates them, so lateral accuracy is what matters.")

"""Evaluation utilities: pose error, recall, ATE, and TUM trajectory I/O.

Shows the metric conventions used throughout the package:
  - pose_error returns (rotation degrees, translation meters)
  - pose_recall counts pairs within BOTH thresholds, inclusive
  - ate_rmse rigidly aligns the estimate to ground truth before the RMSE,
    associating poses by timestamp within a 20 ms window
  - write_tum / read_tum round-trip trajectories in the TUM text format

Run:  python3 demos/demo_metrics.py
"""

import tempfile
from pathlib import Path

import numpy as np

from objreg import (
    RecallThreshold,
    RigidPose,
    Trajectory,
    ate_rmse,
    pose_error,
    pose_recall,
    read_tum,
    write_tum,
)


def main():
    gt = RigidPose(np.array([0.1, -0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    est = RigidPose(gt.angles + np.array([0.01, 0.0, 0.0]),
                    gt.translation + np.array([0.0, 0.05, 0.0]))
    rot, trans = pose_error(est, gt)
    print(f"pose_error: {rot:.3f} deg, {trans * 100:.1f} cm")

    errors = [(2.0, 0.05), (10.0, 0.25), (14.9, 0.30), (16.0, 0.10)]
    th = RecallThreshold(rot_deg=15.0, trans_cm=30.0)
    print(f"pose_recall@15deg/30cm over {errors}: "
          f"{pose_recall(errors, th):.1f}%  (boundary counts, 16 deg does not)")

    # ATE is invariant to a global rigid transform of the estimate
    ts = np.arange(5, dtype=float)
    rng = np.random.default_rng(3)
    gt_poses = [RigidPose(rng.normal(0, 0.3, 3), rng.normal(0, 1.0, 3)) for _ in ts]
    offset = RigidPose(np.array([0.2, 0.1, -0.4]), np.array([5.0, -2.0, 1.0]))
    from objreg import compose
    est_poses = [compose(offset, p) for p in gt_poses]
    ate = ate_rmse(Trajectory(ts, est_poses), Trajectory(ts, gt_poses))
    print(f"ATE of a rigidly offset copy of the trajectory: {ate:.2e} m (aligned away)")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "traj.tum"
        write_tum(Trajectory(ts, gt_poses), path)
        back = read_tum(path)
        ate_rt = ate_rmse(Trajectory(ts, back.poses), Trajectory(ts, gt_poses))
        print(f"TUM round-trip: {len(back)} poses, ATE vs original {ate_rt:.2e} m")
        print("First line of the file:")
        print(" ", path.read_text().splitlines()[0])


if __name__ == "__main__":
    main()

"""Object-grounded registration of low-overlap pairs.

Keypoint-based registration needs the two views to share surface; when
frustum overlap drops below ~10% it has nothing to match. Objects seen in
both frames still anchor the solve: each detection's canonical-coordinate
points tie the depth observations of both frames to a single 9-DoF object
pose, which constrains the relative camera pose even with zero shared
surface.

This demo samples two-frame scenes in the 0-10% overlap bucket with NO
keypoint matches at all, registers each pair with and without object
constraints, and reports recall. Without objects every pair fails;
with them nearly all succeed.

Run:  python3 demos/demo_low_overlap.py
"""

from objreg import (
    RecallThreshold,
    SynthConfig,
    pose_error,
    pose_recall,
    register_pair,
)
from objreg.synth import make_pair_suite


def main():
    cfg = SynthConfig(
        num_objects=1,
        keypoints_per_pair=0,     # force the object-only path
        noise_sigma_depth=0.005,  # 5 mm depth noise
        rng_seed=55,
    )
    suite = make_pair_suite(buckets=[(0.0, 10.0)], n_per_bucket=10, cfg=cfg, radius=0.02)

    errors, failures = [], 0
    for bucket, ov, scene in suite:
        fs, gt = scene
        res = register_pair(fs)
        if not res.success:
            failures += 1
            print(f"  overlap {ov:5.1f}%  FAILED: {res.reason}")
            continue
        rot, trans = pose_error(res.report.camera_poses[1], gt[1])
        errors.append((rot, trans))
        print(f"  overlap {ov:5.1f}%  error {rot:6.2f} deg / {trans * 100:5.2f} cm")

    recall = pose_recall(errors, RecallThreshold(rot_deg=15.0, trans_cm=30.0)) \
        * len(errors) / len(suite) if errors else 0.0
    print(f"\nWith objects: recall@15deg/30cm = {recall:.0f}% "
          f"({failures} hard failures)")

    no_obj_success = sum(
        register_pair(scene.frameset, use_objects=False).success
        for _, _, scene in suite
    )
    print(f"Without objects (keypoints only, none available): "
          f"{no_obj_success}/{len(suite)} pairs register at all")


if __name__ == "__main__":
    main()

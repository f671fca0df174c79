"""Joint Gauss-Newton optimization of camera poses and global object poses.

The energy is w_c * E_c + w_o * E_o, where E_c sums squared distances between
world-transformed matched keypoints and E_o sums squared distances between
world-transformed depth points and object-transformed canonical points. Frame
0 is gauge-fixed to identity; object scales are optimized in log space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    ObjectPose,
    RigidPose,
    apply_object,
    apply_rigid,
    compose,
    invert,
    rotation_derivatives,
)
from .matching import MatchConfig, ObjectTrack, PairMatch, match_pair
from .observations import FrameSet
from .procrustes import (
    DegenerateAlignmentError,
    FilterConfig,
    kabsch_filter,
    kabsch_solve,
    icp_refine,
)

__all__ = [
    "SolverConfig",
    "RegistrationProblem",
    "SolveReport",
    "PairResult",
    "UnsolvableProblemError",
    "build_problem",
    "object_residuals",
    "keypoint_residuals",
    "gauss_newton_solve",
    "numeric_jacobian_check",
    "register_pair",
]

MIN_NOC_PAIRS = 15
MIN_KEYPOINT_PAIRS = 5
_LOG_SCALE_FLOOR = np.log(1e-3)


class UnsolvableProblemError(ValueError):
    """No usable constraint blocks remain after filtering."""


@dataclass
class SolverConfig:
    w_c: float = 1.0
    w_o: float = 1.0
    residual_prune: float = 0.15
    max_iterations: int = 50
    convergence_tol: float = 1e-9
    step_halvings: int = 8

    def __post_init__(self):
        if self.w_c < 0 or self.w_o < 0 or (self.w_c == 0 and self.w_o == 0):
            raise ValueError("weights must be nonnegative and not both zero")
        if self.residual_prune <= 0:
            raise ValueError("residual_prune must be positive")


@dataclass
class KeypointBlock:
    frame_i: int
    frame_j: int
    points_i: np.ndarray
    points_j: np.ndarray
    init_relative: RigidPose  # G with G p_i ~ p_j, i.e. T_j^-1 T_i

    def __len__(self):
        return len(self.points_i)


@dataclass
class ObjectBlock:
    track_id: int
    frames: list[int]
    noc_points: list[np.ndarray]  # per frame, (n, 3)
    depth_points: list[np.ndarray]
    init_pose: ObjectPose
    local_poses: list[RigidPose] = field(default_factory=list)  # per-frame Procrustes

    def total_pairs(self):
        return sum(len(p) for p in self.noc_points)


@dataclass
class RegistrationProblem:
    num_frames: int
    keypoint_blocks: list[KeypointBlock]
    object_blocks: list[ObjectBlock]
    config: SolverConfig
    initial_cameras: list[RigidPose] = field(default_factory=list)
    underconstrained_frames: list[int] = field(default_factory=list)


@dataclass
class SolveReport:
    camera_poses: list[RigidPose]
    object_poses: list[ObjectPose]
    track_ids: list[int]
    iterations: int
    final_cost: float
    pruned_count: int
    block_stats: list[dict]
    success: bool = True


@dataclass
class PairResult:
    success: bool
    reason: str | None = None
    report: SolveReport | None = None
    matches: list[PairMatch] = field(default_factory=list)


def default_keypoint_filter(threshold: float = 0.20) -> FilterConfig:
    return FilterConfig(threshold, min_pairs=MIN_KEYPOINT_PAIRS)


def default_object_filter(threshold: float = 0.20) -> FilterConfig:
    return FilterConfig(threshold, min_pairs=MIN_NOC_PAIRS)


def build_problem(
    fs: FrameSet,
    tracks: list[ObjectTrack],
    cfg: SolverConfig | None = None,
    keypoint_filter: FilterConfig | None = None,
    object_filter: FilterConfig | None = None,
) -> RegistrationProblem:
    """Filter raw constraints into solver blocks and initialize variables.

    Keypoint matches are Kabsch-filtered per frame pair (dropped below 5
    survivors); each object observation's NOC-depth pairs are Kabsch-filtered
    intra-frame (dropped below 15 survivors); tracks observed in fewer than 2
    surviving frames are dropped.
    """
    cfg = cfg or SolverConfig()
    keypoint_filter = keypoint_filter or default_keypoint_filter()
    object_filter = object_filter or default_object_filter()

    kp_blocks = []
    grouped: dict[tuple[int, int], list] = {}
    for km in fs.keypoint_matches:
        i, j = km.frame_i, km.frame_j
        pi, pj = km.points_i, km.points_j
        if i > j:
            i, j, pi, pj = j, i, pj, pi
        grouped.setdefault((i, j), []).append((pi, pj))
    for (i, j), chunks in sorted(grouped.items()):
        pi = np.vstack([c[0] for c in chunks])
        pj = np.vstack([c[1] for c in chunks])
        try:
            res = kabsch_filter(pi, pj, keypoint_filter)
        except DegenerateAlignmentError:
            continue
        keep = res.inlier_flags
        if keep.sum() < MIN_KEYPOINT_PAIRS:
            continue
        kp_blocks.append(KeypointBlock(i, j, pi[keep], pj[keep], res.pose))

    obs_index = {(o.frame, o.detection_id): o for o in fs.observations}
    obj_blocks = []
    for track in tracks:
        frames, nocs, depths, local_poses, scales = [], [], [], [], []
        for frame, det in sorted(track.members):
            obs = obs_index[(frame, det)]
            if len(obs) < MIN_NOC_PAIRS:
                continue
            try:
                res = kabsch_filter(
                    obs.noc_points * obs.scale_estimate, obs.depth_points, object_filter
                )
            except DegenerateAlignmentError:
                continue
            keep = res.inlier_flags
            if keep.sum() < MIN_NOC_PAIRS:
                continue
            frames.append(frame)
            nocs.append(obs.noc_points[keep])
            depths.append(obs.depth_points[keep])
            local_poses.append(res.pose)
            scales.append(obs.scale_estimate)
        if len(frames) < 2:
            continue
        obj_blocks.append(
            ObjectBlock(
                track.track_id,
                frames,
                nocs,
                depths,
                # global pose seeded below once camera initialization is known
                ObjectPose(local_poses[0].angles, local_poses[0].translation, scales[0]),
                local_poses,
            )
        )

    if not kp_blocks and not obj_blocks:
        raise UnsolvableProblemError("no keypoint or object blocks survive filtering")

    # chain camera initialization from frame 0: over keypoint blocks, and
    # (for frames with no keypoint path) indirectly through shared objects
    # via their per-frame local Procrustes poses
    cams = [RigidPose.identity() for _ in range(fs.num_frames)]
    known = {0}
    changed = True
    while changed:
        changed = False
        for blk in kp_blocks:
            g = blk.init_relative  # T_j^-1 T_i
            if blk.frame_i in known and blk.frame_j not in known:
                cams[blk.frame_j] = compose(cams[blk.frame_i], invert(g))
                known.add(blk.frame_j)
                changed = True
            elif blk.frame_j in known and blk.frame_i not in known:
                cams[blk.frame_i] = compose(cams[blk.frame_j], g)
                known.add(blk.frame_i)
                changed = True
        for blk in obj_blocks:
            anchored = [k for k, f in enumerate(blk.frames) if f in known]
            if not anchored:
                continue
            a = anchored[0]
            obj_world = compose(cams[blk.frames[a]], blk.local_poses[a])
            for k, f in enumerate(blk.frames):
                if f not in known:
                    cams[f] = compose(obj_world, invert(blk.local_poses[k]))
                    known.add(f)
                    changed = True

    for blk in obj_blocks:
        local = RigidPose(blk.init_pose.angles, blk.init_pose.translation)
        world = compose(cams[blk.frames[0]], local)
        blk.init_pose = ObjectPose(world.angles, world.translation, blk.init_pose.scale)

    constrained = {0}
    for blk in kp_blocks:
        constrained.update((blk.frame_i, blk.frame_j))
    for blk in obj_blocks:
        constrained.update(blk.frames)
    under = sorted(set(range(fs.num_frames)) - constrained)

    return RegistrationProblem(
        fs.num_frames, kp_blocks, obj_blocks, cfg, cams, underconstrained_frames=under
    )


def object_residuals(cameras, objects, block: ObjectBlock, active=None) -> np.ndarray:
    """Unweighted residual vectors T_c p_depth - T_o p_noc, stacked (N, 3)."""
    rows = []
    for k, frame in enumerate(block.frames):
        depth = block.depth_points[k]
        noc = block.noc_points[k]
        if active is not None:
            depth = depth[active[k]]
            noc = noc[active[k]]
        obj = objects if isinstance(objects, ObjectPose) else objects[block.track_id]
        rows.append(apply_rigid(cameras[frame], depth) - apply_object(obj, noc))
    return np.vstack(rows) if rows else np.zeros((0, 3))


def keypoint_residuals(cameras, block: KeypointBlock, active=None) -> np.ndarray:
    """Unweighted residual vectors T_i p_i - T_j p_j, stacked (N, 3)."""
    pi, pj = block.points_i, block.points_j
    if active is not None:
        pi, pj = pi[active], pj[active]
    return apply_rigid(cameras[block.frame_i], pi) - apply_rigid(cameras[block.frame_j], pj)


class _State:
    """Packed free variables: 6 per camera (frames 1..K-1) + 9 per object."""

    def __init__(self, problem: RegistrationProblem):
        self.num_frames = problem.num_frames
        self.track_ids = [b.track_id for b in problem.object_blocks]
        self.n_cam = 6 * (problem.num_frames - 1)
        self.x = np.zeros(self.n_cam + 9 * len(self.track_ids))
        for i in range(1, problem.num_frames):
            pose = problem.initial_cameras[i]
            self.x[6 * (i - 1) : 6 * (i - 1) + 3] = pose.angles
            self.x[6 * (i - 1) + 3 : 6 * i] = pose.translation
        for k, blk in enumerate(problem.object_blocks):
            off = self.n_cam + 9 * k
            self.x[off : off + 3] = blk.init_pose.angles
            self.x[off + 3 : off + 6] = blk.init_pose.translation
            self.x[off + 6 : off + 9] = np.log(blk.init_pose.scale)

    def cam_offset(self, frame: int) -> int | None:
        return None if frame == 0 else 6 * (frame - 1)

    def obj_offset(self, block_index: int) -> int:
        return self.n_cam + 9 * block_index

    def cameras(self, x=None) -> list[RigidPose]:
        x = self.x if x is None else x
        poses = [RigidPose.identity()]
        for i in range(1, self.num_frames):
            off = 6 * (i - 1)
            poses.append(RigidPose(x[off : off + 3], x[off + 3 : off + 6]))
        return poses

    def objects(self, x=None) -> list[ObjectPose]:
        x = self.x if x is None else x
        out = []
        for k in range(len(self.track_ids)):
            off = self.n_cam + 9 * k
            out.append(
                ObjectPose(x[off : off + 3], x[off + 3 : off + 6], np.exp(x[off + 6 : off + 9]))
            )
        return out


def _assemble(problem: RegistrationProblem, state: _State, x, active_kp, active_obj, jac: bool):
    """Weighted residual vector and (optionally) its Jacobian."""
    cfg = problem.config
    cams = state.cameras(x)
    objs = state.objects(x)
    cam_rd = [rotation_derivatives(c.angles) for c in cams]

    r_parts, j_parts = [], []
    nvar = len(x)

    for b, blk in enumerate(problem.keypoint_blocks):
        mask = active_kp[b]
        n = mask.sum()
        if n == 0 or cfg.w_c == 0:
            continue
        w = np.sqrt(cfg.w_c / len(blk))
        pi, pj = blk.points_i[mask], blk.points_j[mask]
        ri, rj = cam_rd[blk.frame_i], cam_rd[blk.frame_j]
        res = w * (pi @ ri[0].T + cams[blk.frame_i].translation
                   - pj @ rj[0].T - cams[blk.frame_j].translation)
        r_parts.append(res.ravel())
        if jac:
            jb = np.zeros((3 * n, nvar))
            for frame, pts, sign, rd in (
                (blk.frame_i, pi, 1.0, ri),
                (blk.frame_j, pj, -1.0, rj),
            ):
                off = state.cam_offset(frame)
                if off is None:
                    continue
                for a in range(3):
                    jb[:, off + a] += sign * w * (pts @ rd[1][a].T).ravel()
                eye = sign * w * np.tile(np.eye(3), (n, 1))
                jb[:, off + 3 : off + 6] += eye
            j_parts.append(jb)

    for b, blk in enumerate(problem.object_blocks):
        if cfg.w_o == 0:
            continue
        obj = objs[b]
        ro, dro = rotation_derivatives(obj.angles)
        w = np.sqrt(cfg.w_o / blk.total_pairs())
        ooff = state.obj_offset(b)
        for k, frame in enumerate(blk.frames):
            mask = active_obj[b][k]
            n = mask.sum()
            if n == 0:
                continue
            depth = blk.depth_points[k][mask]
            noc = blk.noc_points[k][mask]
            scaled = noc * obj.scale
            rc = cam_rd[frame]
            res = w * (depth @ rc[0].T + cams[frame].translation
                       - scaled @ ro.T - obj.translation)
            r_parts.append(res.ravel())
            if jac:
                jb = np.zeros((3 * n, nvar))
                coff = state.cam_offset(frame)
                if coff is not None:
                    for a in range(3):
                        jb[:, coff + a] = w * (depth @ rc[1][a].T).ravel()
                    jb[:, coff + 3 : coff + 6] = w * np.tile(np.eye(3), (n, 1))
                for a in range(3):
                    jb[:, ooff + a] = -w * (scaled @ dro[a].T).ravel()
                jb[:, ooff + 3 : ooff + 6] = -w * np.tile(np.eye(3), (n, 1))
                # d/d log(s_a) of -R (p * s) = -s_a p_a R[:, a]
                for a in range(3):
                    jb[:, ooff + 6 + a] = -w * np.outer(scaled[:, a], ro[:, a]).ravel()
                j_parts.append(jb)

    r = np.concatenate(r_parts) if r_parts else np.zeros(0)
    if not jac:
        return r, None
    j = np.vstack(j_parts) if j_parts else np.zeros((0, nvar))
    return r, j


def _prune(problem, state, x, active_kp, active_obj, threshold):
    """Deactivate correspondences whose current residual norm exceeds the
    threshold. Returns the number newly pruned; sets are monotone."""
    cams = state.cameras(x)
    objs = state.objects(x)
    pruned = 0
    for b, blk in enumerate(problem.keypoint_blocks):
        norms = np.linalg.norm(keypoint_residuals(cams, blk), axis=1)
        bad = active_kp[b] & (norms > threshold)
        # never let a block drop below the survivable minimum
        if (active_kp[b].sum() - bad.sum()) >= MIN_KEYPOINT_PAIRS:
            pruned += int(bad.sum())
            active_kp[b] &= ~bad
    for b, blk in enumerate(problem.object_blocks):
        for k in range(len(blk.frames)):
            res = apply_rigid(cams[blk.frames[k]], blk.depth_points[k]) - apply_object(
                objs[b], blk.noc_points[k]
            )
            norms = np.linalg.norm(res, axis=1)
            bad = active_obj[b][k] & (norms > threshold)
            if (active_obj[b][k].sum() - bad.sum()) >= MIN_NOC_PAIRS:
                pruned += int(bad.sum())
                active_obj[b][k] &= ~bad
    return pruned


def gauss_newton_solve(problem: RegistrationProblem) -> SolveReport:
    """Damped Gauss-Newton solve of the joint energy with per-iteration
    residual pruning (monotone active set)."""
    cfg = problem.config
    if cfg.w_o == 0 and problem.object_blocks:
        problem = replace(problem, object_blocks=[])
    if cfg.w_c == 0 and problem.keypoint_blocks:
        problem = replace(problem, keypoint_blocks=[])
    if not problem.keypoint_blocks and not problem.object_blocks:
        raise UnsolvableProblemError("problem has no blocks")
    state = _State(problem)
    active_kp = [np.ones(len(b), dtype=bool) for b in problem.keypoint_blocks]
    active_obj = [
        [np.ones(len(p), dtype=bool) for p in b.noc_points] for b in problem.object_blocks
    ]

    x = state.x.copy()
    lam = 1e-6
    total_pruned = 0
    iterations = 0
    cost = None
    for it in range(cfg.max_iterations):
        iterations = it + 1
        total_pruned += _prune(problem, state, x, active_kp, active_obj, cfg.residual_prune)
        r, j = _assemble(problem, state, x, active_kp, active_obj, jac=True)
        cost = float(r @ r)
        if cost < 1e-28:
            break
        jtj = j.T @ j
        jtr = j.T @ r
        accepted = False
        for _ in range(cfg.step_halvings):
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(len(x)), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + delta
            # clamp log-scales from below
            for k in range(len(state.track_ids)):
                off = state.obj_offset(k) + 6
                x_new[off : off + 3] = np.maximum(x_new[off : off + 3], _LOG_SCALE_FLOOR)
            with np.errstate(over="ignore", invalid="ignore"):
                r_new, _ = _assemble(problem, state, x_new, active_kp, active_obj, jac=False)
                cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost + 1e-15:
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        x = x_new
        lam = max(lam / 10, 1e-12)
        if cost - cost_new <= cfg.convergence_tol * max(cost, 1e-30):
            cost = cost_new
            break
        cost = cost_new

    if cost is None:
        r, _ = _assemble(problem, state, x, active_kp, active_obj, jac=False)
        cost = float(r @ r)

    state.x = x
    cams = state.cameras()
    objs = state.objects()
    stats = []
    for b, blk in enumerate(problem.keypoint_blocks):
        norms = np.linalg.norm(keypoint_residuals(cams, blk, active_kp[b]), axis=1)
        stats.append(
            {
                "kind": "keypoint",
                "frames": (blk.frame_i, blk.frame_j),
                "active": int(active_kp[b].sum()),
                "total": len(blk),
                "rms": float(np.sqrt(np.mean(norms**2))) if len(norms) else 0.0,
            }
        )
    for b, blk in enumerate(problem.object_blocks):
        norms = np.linalg.norm(
            object_residuals(cams, objs[b], blk, active_obj[b]), axis=1
        )
        stats.append(
            {
                "kind": "object",
                "track_id": blk.track_id,
                "frames": tuple(blk.frames),
                "active": int(sum(m.sum() for m in active_obj[b])),
                "total": blk.total_pairs(),
                "rms": float(np.sqrt(np.mean(norms**2))) if len(norms) else 0.0,
            }
        )
    return SolveReport(
        cams, objs, state.track_ids, iterations, cost, total_pruned, stats
    )


def numeric_jacobian_check(problem: RegistrationProblem, h: float = 1e-6) -> float:
    """Max relative error between analytic and central finite-difference
    Jacobians at the problem's initial state."""
    state = _State(problem)
    active_kp = [np.ones(len(b), dtype=bool) for b in problem.keypoint_blocks]
    active_obj = [
        [np.ones(len(p), dtype=bool) for p in b.noc_points] for b in problem.object_blocks
    ]
    x = state.x.copy()
    _, j_analytic = _assemble(problem, state, x, active_kp, active_obj, jac=True)
    j_num = np.zeros_like(j_analytic)
    for k in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        rp, _ = _assemble(problem, state, xp, active_kp, active_obj, jac=False)
        rm, _ = _assemble(problem, state, xm, active_kp, active_obj, jac=False)
        j_num[:, k] = (rp - rm) / (2 * h)
    mag = np.maximum(np.abs(j_analytic), np.abs(j_num))
    mask = mag > 1e-8
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(j_analytic - j_num)[mask] / mag[mask]))


def register_pair(
    fs: FrameSet,
    mcfg: MatchConfig | None = None,
    scfg: SolverConfig | None = None,
    icp: bool = True,
    use_objects: bool = True,
    use_keypoints: bool = True,
    keypoint_filter: FilterConfig | None = None,
    object_filter: FilterConfig | None = None,
) -> PairResult:
    """Full pairwise registration: object matching, joint solve, optional ICP."""
    if fs.num_frames != 2:
        raise ValueError("register_pair expects exactly 2 frames")
    mcfg = mcfg or MatchConfig()
    scfg = scfg or SolverConfig()
    object_filter = object_filter or default_object_filter()

    keypoints = [km for km in fs.keypoint_matches if len(km)] if use_keypoints else []
    obs_a = fs.observations_in_frame(0)
    obs_b = fs.observations_in_frame(1)
    matches = []
    if use_objects:
        matches = match_pair(obs_a, obs_b, mcfg, bool(keypoints), object_filter)
    if not keypoints and not matches:
        return PairResult(False, "no keypoint matches and no object matches")

    tracks = []
    for t, m in enumerate(matches):
        tracks.append(
            ObjectTrack(
                t,
                obs_a[m.index_a].class_label,
                [(0, obs_a[m.index_a].detection_id), (1, obs_b[m.index_b].detection_id)],
            )
        )
    sub = FrameSet(fs.frames, keypoints, fs.observations, fs.ground_truth)
    try:
        problem = build_problem(sub, tracks, scfg, keypoint_filter, object_filter)
        report = gauss_newton_solve(problem)
    except (UnsolvableProblemError, DegenerateAlignmentError) as e:
        return PairResult(False, str(e), matches=matches)

    if icp:
        pts = {0: [], 1: []}
        for o in fs.observations:
            pts[o.frame].append(o.depth_points)
        for km in keypoints:
            pts[km.frame_i].append(km.points_i)
            pts[km.frame_j].append(km.points_j)
        if pts[0] and pts[1]:
            src = np.vstack(pts[1])
            tgt = np.vstack(pts[0])
            res = icp_refine(
                src, tgt, report.camera_poses[1], max_corr_dist=scfg.residual_prune
            )
            # accept only small corrections: an "improvement" that moves the
            # pose beyond the association radius means ICP slid disjoint
            # surfaces onto each other (common at near-zero overlap)
            if res.converged:
                drot = np.degrees(
                    np.arccos(
                        np.clip(
                            (np.trace(res.pose.rotation.T @ report.camera_poses[1].rotation) - 1) / 2,
                            -1.0,
                            1.0,
                        )
                    )
                )
                dtrans = float(
                    np.linalg.norm(res.pose.translation - report.camera_poses[1].translation)
                )
                if dtrans <= scfg.residual_prune and drot <= 10.0:
                    report.camera_poses[1] = res.pose
    return PairResult(True, None, report, matches)

"""Evaluation metrics over rollout records and per-object report generation.

All metrics are pure functions of immutable rollout logs. The success window
and the SimDist window both start at the record's eval_window_start (the
moment the support surface is removed).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .control import RolloutRecord
from .hand import HandModel
from .se3 import Pose, geodesic_distance, quat_conj, quat_rotate
from .sim import ObjectBody, Shape

FALL_THRESHOLD = 0.25        # m drop that counts as "the object fell"
SUCCESS_WINDOW_S = 5.0
MC_SAMPLES = 100_000

CSV_COLUMNS = ("object", "simdist_mean", "simdist_std", "success", "interpenetration")


def _window(record: RolloutRecord) -> tuple[int, int]:
    start = int(record.meta["eval_window_start"])
    dt = float(record.meta["action_dt"])
    steps = int(round(SUCCESS_WINDOW_S / dt))
    return start, min(start + steps, len(record.steps))


def success(record: RolloutRecord, fall_threshold: float = FALL_THRESHOLD) -> bool:
    """A grasp holds if the object never drops more than fall_threshold below
    its window-start height over the (up to) 5 s window."""
    lo, hi = _window(record)
    if lo >= len(record.steps):
        raise ValueError("rollout has no post-grasp window")
    z0 = record.steps[lo]["obj_pose"][2]
    for row in record.steps[lo:hi]:
        if row["obj_pose"][2] < z0 - fall_threshold:
            return False
    return True


def success_rate(records: list[RolloutRecord],
                 fall_threshold: float = FALL_THRESHOLD) -> float:
    if not records:
        raise ValueError("no rollouts")
    return float(np.mean([success(r, fall_threshold) for r in records]))


def _relative_positions(record: RolloutRecord, lo: int, hi: int) -> np.ndarray:
    out = np.empty((hi - lo, 3))
    for i, row in enumerate(record.steps[lo:hi]):
        hp = np.asarray(row["hand_pose"])
        op = np.asarray(row["obj_pose"])
        out[i] = quat_rotate(quat_conj(hp[3:]), op[:3] - hp[:3])
    return out


def sim_dist(record: RolloutRecord,
             fall_threshold: float = FALL_THRESHOLD) -> tuple[float, float]:
    """Mean and std of the wrist-object relative displacement in mm/s.

    Per-step displacements of the wrist-frame object position are accumulated
    into one-second bins over the window, truncated when the object falls or
    hits the surface again.
    """
    lo, hi = _window(record)
    z0 = record.steps[lo]["obj_pose"][2]
    end = hi
    for i in range(lo + 1, hi):
        row = record.steps[i]
        fell = row["obj_pose"][2] < z0 - fall_threshold
        hit = any(c[0] == -1 for c in row["contacts"])
        if fell or hit:
            end = i
            break
    rel = _relative_positions(record, lo, end)
    if len(rel) < 2:
        return 0.0, 0.0
    deltas = np.linalg.norm(np.diff(rel, axis=0), axis=1) * 1000.0  # mm
    dt = float(record.meta["action_dt"])
    per_bin = max(int(round(1.0 / dt)), 1)
    rates = []
    for k in range(0, len(deltas), per_bin):
        chunk = deltas[k:k + per_bin]
        rates.append(chunk.sum() / (len(chunk) * dt))
    return float(np.mean(rates)), float(np.std(rates))


def object_from_meta(meta: dict) -> ObjectBody:
    om = meta["object"]
    shape = Shape(om["kind"], radius=om["radius"],
                  half_extents=None if om["half_extents"] is None else tuple(om["half_extents"]),
                  half_height=om["half_height"])
    return ObjectBody(shape, om["mass"], om["friction"])


def _points_inside(points: np.ndarray, obj: ObjectBody) -> np.ndarray:
    inv = obj.pose.inverse()
    local = quat_rotate(inv.quat, points) + inv.position
    s = obj.shape
    if s.kind == "sphere":
        return (local * local).sum(axis=1) <= s.radius ** 2
    if s.kind == "box":
        he = np.asarray(s.half_extents)
        return (np.abs(local) <= he).all(axis=1)
    rho2 = local[:, 0] ** 2 + local[:, 1] ** 2
    return (rho2 <= s.radius ** 2) & (np.abs(local[:, 2]) <= s.half_height)


def interpenetration(model: HandModel, wrist: Pose, q: np.ndarray,
                     obj: ObjectBody, n_samples: int = MC_SAMPLES,
                     rng: np.random.Generator | None = None
                     ) -> tuple[float, float]:
    """Monte Carlo estimate (cm^3, standard error) of the hand-collider volume
    inside the object.

    Samples are drawn per collider sphere proportional to volume and weighted
    by 1/multiplicity inside the union, so overlapping colliders are not
    double counted.
    """
    from .hand import forward_kinematics
    if rng is None:
        rng = np.random.default_rng(0)
    poses, _ = forward_kinematics(model, wrist, q)
    centers = np.stack([p.transform_point(l.collider_center)
                        for p, l in zip(poses, model.links)])
    radii = np.array([l.collider_radius for l in model.links])
    vols = 4.0 / 3.0 * np.pi * radii ** 3
    alloc = np.maximum((n_samples * vols / vols.sum()).astype(int), 1)
    total = 0.0
    var = 0.0
    for i in range(len(radii)):
        n = int(alloc[i])
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = radii[i] * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
        pts = centers[i] + d * r[:, None]
        mult = np.zeros(n)
        for j in range(len(radii)):
            mult += ((pts - centers[j]) ** 2).sum(axis=1) <= radii[j] ** 2 + 1e-15
        vals = _points_inside(pts, obj) / np.maximum(mult, 1.0)
        total += vols[i] * float(vals.mean())
        var += (vols[i] ** 2 / n) * float(vals.var())
    return total * 1e6, float(np.sqrt(var)) * 1e6


def interpenetration_from_record(model: HandModel, record: RolloutRecord,
                                 n_samples: int = MC_SAMPLES,
                                 rng: np.random.Generator | None = None
                                 ) -> tuple[float, float]:
    """Interpenetration at the last time step of the grasping phase."""
    idx = max(int(record.meta["grasp_steps"]) - 1, 0)
    row = record.steps[idx]
    obj = object_from_meta(record.meta)
    obj.pose = Pose.from_array(row["obj_pose"])
    return interpenetration(model, Pose.from_array(row["hand_pose"]),
                            np.asarray(row["q"]), obj, n_samples, rng)


def contact_ratio(record: RolloutRecord) -> float:
    """Mean over all steps of achieved desired contacts over desired contacts."""
    desired = np.asarray(record.meta["desired_contacts"])
    total = desired.sum()
    if total == 0:
        raise ValueError("label has no desired contacts")
    vals = []
    for row in record.steps:
        f = np.asarray(row["forces"])
        vals.append(((f > 0) & (desired > 0)).sum() / total)
    return float(np.mean(vals))


def mpe(obj_pose: Pose, goal: Pose) -> float:
    """Object position error in mm."""
    return float(np.linalg.norm(obj_pose.position - goal.position)) * 1000.0


def geodesic_err(obj_pose: Pose, goal: Pose) -> float:
    return geodesic_distance(obj_pose.rotation_matrix(), goal.rotation_matrix())


def final_pose_errors(record: RolloutRecord) -> tuple[float, float] | None:
    if record.meta.get("goal") is None:
        return None
    goal = Pose.from_array(record.meta["goal"])
    last = Pose.from_array(record.steps[-1]["obj_pose"])
    return mpe(last, goal), geodesic_err(last, goal)


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    average: dict | None = None

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for row in self.rows + [self.average]:
                w.writerow([row["object"]] + [f"{row[c]:.6f}" for c in CSV_COLUMNS[1:]])

    @staticmethod
    def from_csv(path: str) -> "MetricsReport":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            rows = [{k: (v if k == "object" else float(v)) for k, v in r.items()}
                    for r in reader]
        avg = rows.pop() if rows and rows[-1]["object"] == "average" else None
        return MetricsReport(rows=rows, average=avg)

    def to_text(self) -> str:
        cols = ["object", "success", "simdist_mean", "simdist_std",
                "interpenetration", "contact_ratio", "mpe_mm", "geodesic_rad"]
        out = io.StringIO()
        fmt = "{:<14}" + "{:>14}" * (len(cols) - 1)
        out.write(fmt.format(*cols) + "\n")
        for row in self.rows + [self.average]:
            cells = [row["object"]]
            for c in cols[1:]:
                v = row.get(c)
                cells.append("-" if v is None else f"{v:.4f}")
            out.write(fmt.format(*cells) + "\n")
        return out.getvalue()


def build_report(model: HandModel, records: list[RolloutRecord],
                 mc_samples: int = MC_SAMPLES, seed: int = 0) -> MetricsReport:
    """Per-object metric rows plus the unweighted average row."""
    if not records:
        raise ValueError("no rollouts to report on")
    groups: dict[str, list[RolloutRecord]] = {}
    for rec in records:
        groups.setdefault(rec.meta["object_id"], []).append(rec)

    report = MetricsReport()
    for gi, obj_id in enumerate(sorted(groups)):
        recs = groups[obj_id]
        rng = np.random.default_rng(np.random.SeedSequence((seed, gi)).spawn(1)[0])
        rates = []
        for r in recs:
            m, s = sim_dist(r)
            rates.append((m, s))
        inter = [interpenetration_from_record(model, r, mc_samples, rng)[0]
                 for r in recs]
        ratios = [contact_ratio(r) for r in recs
                  if r.meta.get("desired_contacts") is not None
                  and np.asarray(r.meta["desired_contacts"]).sum() > 0]
        errs = [e for e in (final_pose_errors(r) for r in recs) if e is not None]
        row = {
            "object": obj_id,
            "n": len(recs),
            "success": success_rate(recs),
            "simdist_mean": float(np.mean([m for m, _ in rates])),
            "simdist_std": float(np.mean([s for _, s in rates])),
            "interpenetration": float(np.mean(inter)),
            "contact_ratio": float(np.mean(ratios)) if ratios else None,
            "mpe_mm": float(np.mean([e[0] for e in errs])) if errs else None,
            "geodesic_rad": float(np.mean([e[1] for e in errs])) if errs else None,
        }
        report.rows.append(row)

    avg = {"object": "average", "n": sum(r["n"] for r in report.rows)}
    for key in ("success", "simdist_mean", "simdist_std", "interpenetration",
                "contact_ratio", "mpe_mm", "geodesic_rad"):
        vals = [r[key] for r in report.rows if r[key] is not None]
        avg[key] = float(np.mean(vals)) if vals else None
    report.average = avg
    return report

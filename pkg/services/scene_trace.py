"""
Scene traces: where every user stands and looks in each time slot, and how many
other avatars each user sees at each visual attention level.

Attention levels come from the horizontal angle between a user's gaze and the
bearing to another avatar:

    3  central vision             [0, 30)
    2  peripheral binocular       [30, 60)
    1  monocular                  [60, 90)
    0  blind spot                 [90, 180]

Trace files are JSON lines, one record per slot:

    {"slot": 0, "users": [{"id": 0, "pos": [x, y], "gaze": [gx, gy]}, ...]}
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from utils import DomainError, make_rng

logger = logging.getLogger(__name__)

ATTENTION_LEVELS = 4
LEVEL_EDGES_DEG = (30.0, 60.0, 90.0)
GAZE_TOLERANCE = 1e-9


@dataclass
class ScenePose:
    user_id: int
    position: np.ndarray
    gaze: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        self.gaze = np.asarray(self.gaze, dtype=float).reshape(2)
        if abs(np.linalg.norm(self.gaze) - 1.0) > GAZE_TOLERANCE:
            raise ValueError(f"gaze of user {self.user_id} is not a unit vector: {self.gaze}")


@dataclass
class SceneTrace:
    """Per-slot poses. Every slot holds exactly one pose per user."""

    slots: List[List[ScenePose]]
    bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not self.slots:
            raise ValueError("trace must contain at least one slot")
        users = len(self.slots[0])
        for t, poses in enumerate(self.slots):
            if len(poses) != users:
                raise ValueError(f"slot {t} has {len(poses)} poses, expected {users}")
            if self.bounds is not None:
                for pose in poses:
                    if np.any(pose.position < 0) or np.any(pose.position > np.asarray(self.bounds)):
                        raise ValueError(f"user {pose.user_id} at slot {t} is outside the scene bounds")

    @property
    def duration(self) -> int:
        return len(self.slots)

    @property
    def users(self) -> int:
        return len(self.slots[0])


@dataclass
class AttentionSnapshot:
    """counts[k, a] = number of other avatars user k sees at attention level a."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((0, ATTENTION_LEVELS), dtype=int))

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def attention_level(angle: float) -> int:
    """
    Map an absolute horizontal angle (degrees) to an attention level.

    Examples:
        >>> attention_level(15), attention_level(30), attention_level(180)
        (3, 2, 0)
    """
    if not 0.0 <= angle <= 180.0:
        raise DomainError(f"angle {angle} outside [0, 180]")
    if angle < LEVEL_EDGES_DEG[0]:
        return 3
    if angle < LEVEL_EDGES_DEG[1]:
        return 2
    if angle < LEVEL_EDGES_DEG[2]:
        return 1
    return 0


def attention_snapshot(poses: List[ScenePose]) -> AttentionSnapshot:
    """Classify every ordered pair (k, j != k) by the angle of j seen from k."""
    if len(poses) < 2:
        raise ValueError("attention needs at least 2 users")
    counts = np.zeros((len(poses), ATTENTION_LEVELS), dtype=int)
    for k, viewer in enumerate(poses):
        for j, other in enumerate(poses):
            if j == k:
                continue
            bearing = other.position - viewer.position
            distance = np.linalg.norm(bearing)
            if distance < 1e-12:
                # Coincident avatars get full attention
                counts[k, 3] += 1
                continue
            cosine = np.clip(np.dot(bearing / distance, viewer.gaze), -1.0, 1.0)
            counts[k, attention_level(float(np.degrees(np.arccos(cosine))))] += 1
    return AttentionSnapshot(counts=counts)


def synth_trace(
    users: int,
    slots: int,
    bounds: Tuple[float, float] = (10.0, 10.0),
    seed=None,
    step_sigma: float = 0.3,
    max_turn_deg: float = 30.0,
) -> SceneTrace:
    """
    Seeded random-walk trace: positions take Gaussian steps clipped to the scene,
    gaze headings turn by at most `max_turn_deg` per slot.
    """
    if users < 2:
        raise ValueError("synth_trace needs at least 2 users (nobody to observe otherwise)")
    if slots < 1:
        raise ValueError("synth_trace needs at least 1 slot")
    rng = make_rng(seed)
    upper = np.asarray(bounds, dtype=float)
    positions = rng.uniform(0.0, 1.0, size=(users, 2)) * upper
    headings = rng.uniform(0.0, 2.0 * np.pi, size=users)
    max_turn = np.radians(max_turn_deg)

    trace_slots = []
    for t in range(slots):
        if t > 0:
            positions = np.clip(positions + rng.normal(0.0, step_sigma, size=(users, 2)), 0.0, upper)
            headings = (headings + rng.uniform(-max_turn, max_turn, size=users)) % (2.0 * np.pi)
        gazes = np.stack([np.cos(headings), np.sin(headings)], axis=1)
        gazes /= np.linalg.norm(gazes, axis=1, keepdims=True)
        trace_slots.append([ScenePose(k, positions[k].copy(), gazes[k]) for k in range(users)])
    return SceneTrace(slots=trace_slots, bounds=tuple(bounds))


def trace_snapshots(trace: SceneTrace) -> List[AttentionSnapshot]:
    return [attention_snapshot(poses) for poses in trace.slots]


def write_trace(trace: SceneTrace, path: str):
    """Write a trace as JSON lines (one record per slot)."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for t, poses in enumerate(trace.slots):
            record = {
                "slot": t,
                "users": [
                    {"id": p.user_id, "pos": [float(v) for v in p.position], "gaze": [float(v) for v in p.gaze]}
                    for p in poses
                ],
            }
            f.write(json.dumps(record) + "\n")


def read_trace(path: str, bounds: Optional[Tuple[float, float]] = None) -> SceneTrace:
    """Read a JSON-lines trace file written by write_trace."""
    slots = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                poses = [ScenePose(u["id"], u["pos"], u["gaze"]) for u in record["users"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{line_number}: bad trace record ({e})") from e
            if record.get("slot", len(slots)) != len(slots):
                raise ValueError(f"{path}:{line_number}: slot {record.get('slot')} out of order")
            slots.append(poses)
    return SceneTrace(slots=slots, bounds=bounds)


def list_traces(directory: str) -> List[str]:
    """Trace files of a directory, sorted by name."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"trace directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".jsonl"))
    return [os.path.join(directory, n) for n in names]

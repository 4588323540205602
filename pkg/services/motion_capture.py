"""
This module reads Biovision Hierarchy (BVH) motion capture files and turns them into
scene poses for the simulator.

A BVH file has a HIERARCHY section (one ROOT, nested JOINTs, optional End Sites,
each with an OFFSET in millimetres and a CHANNELS list) and a MOTION section
("Frames:", "Frame Time:", then one line of channel values per frame).

Rotation convention: the rotation channels of a joint are composed in the order
they are listed, as intrinsic rotations. For "CHANNELS 3 Zrotation Xrotation
Yrotation" the local rotation matrix is Rz @ Rx @ Ry. Position channels are added
to the joint's OFFSET. A joint's global position is

    p_j = p_parent + R_parent_global @ (offset_j + translation_j)

with R_global accumulated from the root down. The ground plane is (x, z) and
y points up.
"""

import logging
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from services.scene_trace import ScenePose, SceneTrace
from utils import BvhParseError, IngestionError, make_rng

logger = logging.getLogger(__name__)

ROTATION_CHANNELS = {"Xrotation": "X", "Yrotation": "Y", "Zrotation": "Z"}
POSITION_CHANNELS = {"Xposition": 0, "Yposition": 1, "Zposition": 2}
VALID_CHANNELS = set(ROTATION_CHANNELS) | set(POSITION_CHANNELS)

DEFAULT_GAZE_JOINTS = ("Head", "LeftShoulder", "RightShoulder")


@dataclass
class Joint:
    name: str
    parent: Optional[int]
    offset: np.ndarray
    channels: List[str] = field(default_factory=list)
    end_site: bool = False


@dataclass
class MotionClip:
    """Skeleton plus per-frame channel values (frames x channels)."""

    joints: List[Joint]
    frames: np.ndarray
    frame_time: float

    def __post_init__(self):
        if not self.joints or self.joints[0].parent is not None:
            raise ValueError("root joint must come first and have no parent")
        if any(j.parent is None for j in self.joints[1:]):
            raise ValueError("only one root joint is supported")
        if self.frame_time <= 0:
            raise ValueError("frame_time must be positive")
        self.frames = np.asarray(self.frames, dtype=float).reshape(-1, self.channel_count)

    @property
    def channel_count(self) -> int:
        return sum(len(j.channels) for j in self.joints)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def channel_offsets(self) -> List[int]:
        """Column index of each joint's first channel."""
        offsets, cursor = [], 0
        for joint in self.joints:
            offsets.append(cursor)
            cursor += len(joint.channels)
        return offsets

    def joint_index(self, name: str) -> int:
        for index, joint in enumerate(self.joints):
            if joint.name == name:
                return index
        raise KeyError(name)


class _Lines:
    """Line cursor that remembers 1-based line numbers for error messages."""

    def __init__(self, text: Union[str, Iterable[str]]):
        raw = text.splitlines() if isinstance(text, str) else [line.rstrip("\n") for line in text]
        self.items = [(number, line.strip()) for number, line in enumerate(raw, start=1) if line.strip()]
        self.position = 0

    def peek(self) -> Tuple[int, str]:
        if self.position >= len(self.items):
            last = self.items[-1][0] if self.items else 0
            raise BvhParseError("unexpected end of file", last + 1)
        return self.items[self.position]

    def next(self) -> Tuple[int, str]:
        item = self.peek()
        self.position += 1
        return item

    def remaining(self) -> List[Tuple[int, str]]:
        rest = self.items[self.position:]
        self.position = len(self.items)
        return rest


def _parse_floats(tokens: Sequence[str], number: int, what: str) -> List[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise BvhParseError(f"non-numeric {what}: {' '.join(tokens)}", number)


def _parse_joint(lines: _Lines, name: str, parent: Optional[int], joints: List[Joint], end_site=False):
    number, line = lines.next()
    if line != "{":
        raise BvhParseError(f"expected '{{' after {name}", number)
    joint = Joint(name=name, parent=parent, offset=np.zeros(3), end_site=end_site)
    index = len(joints)
    joints.append(joint)

    seen_offset = False
    while True:
        number, line = lines.next()
        tokens = line.split()
        keyword = tokens[0]
        if keyword == "}":
            break
        if keyword == "OFFSET":
            if len(tokens) != 4:
                raise BvhParseError("OFFSET needs 3 values", number)
            joint.offset = np.array(_parse_floats(tokens[1:], number, "offset"))
            seen_offset = True
        elif keyword == "CHANNELS":
            if end_site:
                raise BvhParseError("End Site with channels is not supported", number)
            if len(tokens) < 2 or not tokens[1].isdigit():
                raise BvhParseError("CHANNELS needs a count", number)
            count = int(tokens[1])
            names = tokens[2:]
            if len(names) != count:
                raise BvhParseError(f"CHANNELS declares {count} but lists {len(names)}", number)
            unknown = [c for c in names if c not in VALID_CHANNELS]
            if unknown:
                raise BvhParseError(f"unknown channel {unknown[0]}", number)
            joint.channels = names
        elif keyword == "JOINT":
            if end_site or len(tokens) != 2:
                raise BvhParseError("malformed JOINT", number)
            _parse_joint(lines, tokens[1], index, joints)
        elif keyword == "End" and len(tokens) == 2 and tokens[1] == "Site":
            _parse_joint(lines, f"{name}_End", index, joints, end_site=True)
        elif keyword == "ROOT":
            raise BvhParseError("multiple roots are not supported", number)
        else:
            raise BvhParseError(f"unexpected token {keyword}", number)
    if not seen_offset:
        raise BvhParseError(f"joint {name} has no OFFSET", number)


def parse_bvh(text: Union[str, Iterable[str]]) -> MotionClip:
    """
    Parse BVH text into a MotionClip.

    Args:
        text: Whole file as a string, or an iterable of lines (e.g. an open file)

    Returns:
        MotionClip whose joints, channel order and frame matrix mirror the file

    Raises:
        BvhParseError: malformed header, channel/value count mismatch, non-numeric
            motion value, or a "Frames:" count that disagrees with the data
    """
    lines = _Lines(text)
    number, line = lines.next()
    if line != "HIERARCHY":
        raise BvhParseError("expected HIERARCHY", number)
    number, line = lines.next()
    tokens = line.split()
    if tokens[0] != "ROOT" or len(tokens) != 2:
        raise BvhParseError("expected ROOT <name>", number)
    joints: List[Joint] = []
    _parse_joint(lines, tokens[1], None, joints)

    number, line = lines.next()
    if line != "MOTION":
        raise BvhParseError("expected MOTION", number)
    number, line = lines.next()
    match = re.fullmatch(r"Frames:\s*(\d+)", line)
    if not match:
        raise BvhParseError("expected 'Frames: <count>'", number)
    declared = int(match.group(1))
    number, line = lines.next()
    match = re.fullmatch(r"Frame Time:\s*(\S+)", line)
    if not match:
        raise BvhParseError("expected 'Frame Time: <seconds>'", number)
    frame_time = _parse_floats([match.group(1)], number, "frame time")[0]
    if frame_time <= 0:
        raise BvhParseError("frame time must be positive", number)

    channel_count = sum(len(j.channels) for j in joints)
    rows = []
    for number, line in lines.remaining():
        values = line.split()
        if len(values) != channel_count:
            raise BvhParseError(f"expected {channel_count} values, got {len(values)}", number)
        rows.append(_parse_floats(values, number, "motion value"))
    if len(rows) != declared:
        raise BvhParseError(f"Frames: {declared} but {len(rows)} motion lines", number + 1)

    frames = np.array(rows, dtype=float).reshape(len(rows), channel_count)
    return MotionClip(joints=joints, frames=frames, frame_time=frame_time)


def serialize_bvh(clip: MotionClip) -> str:
    """Write a clip back to BVH text; parse_bvh(serialize_bvh(c)) reproduces c."""
    children = {index: [] for index in range(len(clip.joints))}
    for index, joint in enumerate(clip.joints[1:], start=1):
        children[joint.parent].append(index)

    out = ["HIERARCHY"]

    def write(index: int, depth: int):
        joint = clip.joints[index]
        pad = "  " * depth
        if joint.end_site:
            out.append(f"{pad}End Site")
        else:
            out.append(f"{pad}{'ROOT' if joint.parent is None else 'JOINT'} {joint.name}")
        out.append(f"{pad}{{")
        out.append(f"{pad}  OFFSET " + " ".join(repr(float(v)) for v in joint.offset))
        if joint.channels:
            out.append(f"{pad}  CHANNELS {len(joint.channels)} " + " ".join(joint.channels))
        for child in children[index]:
            write(child, depth + 1)
        out.append(f"{pad}}}")

    write(0, 0)
    out.append("MOTION")
    out.append(f"Frames: {clip.frame_count}")
    out.append(f"Frame Time: {clip.frame_time!r}")
    for row in clip.frames:
        out.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def _local_rotation(channels: List[str], values: np.ndarray) -> Rotation:
    axes = "".join(ROTATION_CHANNELS[c] for c in channels if c in ROTATION_CHANNELS)
    angles = [v for c, v in zip(channels, values) if c in ROTATION_CHANNELS]
    if not axes:
        return Rotation.identity()
    # Uppercase sequence = intrinsic rotations, matrix product in listed order.
    return Rotation.from_euler(axes, angles[0] if len(axes) == 1 else angles, degrees=True)


def forward_kinematics(clip: MotionClip, frame: int) -> np.ndarray:
    """
    Global joint positions (mm) for one frame.

    Returns:
        Array of shape (joints, 3) in the order of clip.joints
    """
    if not 0 <= frame < clip.frame_count:
        raise IndexError(f"frame {frame} out of range for {clip.frame_count} frames")
    values = clip.frames[frame]
    offsets = clip.channel_offsets()
    positions = np.zeros((len(clip.joints), 3))
    rotations: List[Rotation] = []
    for index, joint in enumerate(clip.joints):
        joint_values = values[offsets[index]:offsets[index] + len(joint.channels)]
        translation = joint.offset.astype(float).copy()
        for channel, value in zip(joint.channels, joint_values):
            if channel in POSITION_CHANNELS:
                translation[POSITION_CHANNELS[channel]] += value
        local = _local_rotation(joint.channels, joint_values)
        if joint.parent is None:
            positions[index] = translation
            rotations.append(local)
        else:
            parent_rotation = rotations[joint.parent]
            positions[index] = positions[joint.parent] + parent_rotation.apply(translation)
            rotations.append(parent_rotation * local)
    return positions


def gaze_and_position(
    clip: MotionClip,
    frame: int,
    user_id: int = 0,
    joint_names: Tuple[str, str, str] = DEFAULT_GAZE_JOINTS,
    scale: float = 0.001,
) -> ScenePose:
    """
    Ground-plane position and facing direction of the skeleton in one frame.

    The gaze is the unit normal of the left->right shoulder axis in the (x, z)
    plane, oriented toward the side of the shoulder midpoint where the head lies.
    Position is the root's (x, z) scaled from millimetres to metres.

    Args:
        clip: Parsed motion clip
        frame: Frame index
        user_id: Id stored on the pose
        joint_names: (head, left shoulder, right shoulder) joint names
        scale: Metres per file unit

    Returns:
        ScenePose with 2D position and unit gaze
    """
    names = [j.name for j in clip.joints]
    missing = [n for n in joint_names if n not in names]
    if missing:
        raise IngestionError(f"clip is missing joints {missing}; required: {list(joint_names)}")
    positions = forward_kinematics(clip, frame)
    head, left, right = (positions[clip.joint_index(n)][[0, 2]] for n in joint_names)

    axis = right - left
    length = np.linalg.norm(axis)
    if length < 1e-9:
        raise IngestionError(f"shoulders coincide in frame {frame}; gaze undefined")
    normal = np.array([-axis[1], axis[0]]) / length
    if np.dot(normal, head - (left + right) / 2.0) < 0:
        normal = -normal
    root = positions[0][[0, 2]] * scale
    return ScenePose(user_id=user_id, position=root, gaze=normal)


def _rotate2d(vector: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * vector[0] - s * vector[1], s * vector[0] + c * vector[1]])


def trace_from_clips(
    clips: Sequence[MotionClip],
    slots: int,
    frames_per_slot: int,
    bounds: Tuple[float, float] = (10.0, 10.0),
    rng=None,
    joint_names: Tuple[str, str, str] = DEFAULT_GAZE_JOINTS,
    scale: float = 0.001,
) -> SceneTrace:
    """
    Build a multi-user trace from one clip per user.

    Each clip is rotated about the vertical axis by a random angle and translated
    so that its first-frame position lands at a random point in the scene; then one
    frame per slot (every `frames_per_slot` frames) is sampled.
    """
    if len(clips) < 2:
        raise ValueError("need at least 2 clips (one per user)")
    rng = make_rng(rng)
    width, depth = bounds
    per_user = []
    for user_id, clip in enumerate(clips):
        needed = slots * frames_per_slot
        if clip.frame_count < needed:
            raise IngestionError(f"clip {user_id} has {clip.frame_count} frames, needs {needed}")
        angle = rng.uniform(0.0, 2.0 * np.pi)
        anchor = np.array([rng.uniform(0.0, width), rng.uniform(0.0, depth)])
        origin = None
        poses = []
        for slot in range(slots):
            pose = gaze_and_position(clip, slot * frames_per_slot, user_id, joint_names, scale)
            if origin is None:
                origin = pose.position.copy()
            position = anchor + _rotate2d(pose.position - origin, angle)
            clipped = np.clip(position, [0.0, 0.0], [width, depth])
            if not np.allclose(clipped, position):
                logger.debug(f"user {user_id} slot {slot} clipped into scene bounds")
            gaze = _rotate2d(pose.gaze, angle)
            poses.append(ScenePose(user_id, clipped, gaze / np.linalg.norm(gaze)))
        per_user.append(poses)
    slots_list = [[per_user[k][t] for k in range(len(clips))] for t in range(slots)]
    return SceneTrace(slots=slots_list)


def load_clips(directory: str) -> List[MotionClip]:
    """Parse every .bvh file of a directory, in file-name order."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"BVH directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".bvh"))
    if not names:
        raise IngestionError(f"no .bvh files in {directory}")
    clips = []
    for name in names:
        with open(os.path.join(directory, name), "r", encoding="utf-8") as f:
            clips.append(parse_bvh(f))
    logger.info(f"loaded {len(clips)} clips from {directory}")
    return clips

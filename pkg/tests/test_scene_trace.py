import numpy as np
import pytest

from services.scene_trace import (
    ScenePose,
    SceneTrace,
    attention_level,
    attention_snapshot,
    list_traces,
    read_trace,
    synth_trace,
    trace_snapshots,
    write_trace,
)
from utils import DomainError


@pytest.mark.parametrize("angle, level", [
    (0.0, 3), (15.0, 3), (29.999, 3), (30.0, 2), (59.9, 2), (60.0, 1), (89.9, 1), (90.0, 0), (180.0, 0),
])
def test_attention_level_edges(angle, level):
    assert attention_level(angle) == level


@pytest.mark.parametrize("angle", [-0.5, 180.5])
def test_attention_level_outside_range(angle):
    with pytest.raises(DomainError):
        attention_level(angle)


def test_gaze_must_be_unit():
    with pytest.raises(ValueError):
        ScenePose(0, [0.0, 0.0], [1.0, 1.0])


def test_snapshot_classifies_front_and_back():
    poses = [
        ScenePose(0, [5.0, 5.0], [1.0, 0.0]),
        ScenePose(1, [6.0, 5.0], [1.0, 0.0]),   # straight ahead of user 0
        ScenePose(2, [4.0, 5.0], [1.0, 0.0]),   # straight behind user 0
    ]
    counts = attention_snapshot(poses).counts
    assert counts[0].tolist() == [1, 0, 0, 1]
    assert counts.sum(axis=1).tolist() == [2, 2, 2]


def test_snapshot_side_view_is_monocular():
    poses = [ScenePose(0, [5.0, 5.0], [1.0, 0.0]), ScenePose(1, [5.5, 6.0], [0.0, 1.0])]
    # bearing (0.5, 1.0) is ~63.4 degrees off the gaze of user 0
    assert attention_snapshot(poses).counts[0].tolist() == [0, 1, 0, 0]


def test_coincident_avatars_count_as_central():
    poses = [ScenePose(0, [5.0, 5.0], [1.0, 0.0]), ScenePose(1, [5.0, 5.0], [0.0, 1.0])]
    assert attention_snapshot(poses).counts.tolist() == [[0, 0, 0, 1], [0, 0, 0, 1]]


def test_synth_trace_is_seeded_and_in_bounds():
    first = synth_trace(users=4, slots=20, bounds=(10.0, 6.0), seed=3)
    second = synth_trace(users=4, slots=20, bounds=(10.0, 6.0), seed=3)
    assert first.duration == 20 and first.users == 4
    for a, b in zip(first.slots, second.slots):
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p.position, q.position)
            np.testing.assert_array_equal(p.gaze, q.gaze)
    positions = np.array([[p.position for p in poses] for poses in first.slots])
    assert positions.min() >= 0.0
    assert positions[..., 0].max() <= 10.0 and positions[..., 1].max() <= 6.0


def test_synth_trace_needs_two_users():
    with pytest.raises(ValueError):
        synth_trace(users=1, slots=5, seed=0)


def test_trace_rejects_ragged_slots():
    pose = ScenePose(0, [1.0, 1.0], [1.0, 0.0])
    other = ScenePose(1, [2.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        SceneTrace(slots=[[pose, other], [pose]])


def test_every_snapshot_row_counts_all_others():
    trace = synth_trace(users=5, slots=10, seed=8)
    for snapshot in trace_snapshots(trace):
        assert snapshot.totals.tolist() == [4] * 5


def test_trace_file_roundtrip(tmp_path):
    trace = synth_trace(users=3, slots=6, seed=2)
    path = tmp_path / "trace_00000.jsonl"
    write_trace(trace, str(path))
    loaded = read_trace(str(path))
    assert loaded.duration == 6 and loaded.users == 3
    for a, b in zip(trace.slots, loaded.slots):
        for p, q in zip(a, b):
            assert p.user_id == q.user_id
            np.testing.assert_array_equal(p.position, q.position)


def test_read_trace_reports_bad_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"slot": 0, "users": [{"id": 0, "pos": [0, 0], "gaze": [1, 0]}]}\nnot json\n')
    with pytest.raises(ValueError, match="bad.jsonl:2"):
        read_trace(str(path))


def test_list_traces_sorted(tmp_path):
    for name in ("trace_00002.jsonl", "trace_00000.jsonl", "notes.txt", "trace_00001.jsonl"):
        (tmp_path / name).write_text("")
    names = [p.split("/")[-1] for p in list_traces(str(tmp_path))]
    assert names == ["trace_00000.jsonl", "trace_00001.jsonl", "trace_00002.jsonl"]


def test_list_traces_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        list_traces(str(tmp_path / "nope"))

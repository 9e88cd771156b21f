import numpy as np
import pytest

from actionimage.ingest import (
    DatasetManifest,
    ManifestEntry,
    ParseError,
    SynthSpec,
    format_jsonl,
    format_ntu_skeleton,
    generate_synthetic,
    load_sequence,
    parse_jsonl,
    parse_ntu_skeleton,
    synth_sequence,
)
from actionimage.mapping import encode_proposed
from actionimage.skeleton import ConfigError, SkeletonSequence, default_layout, reorder_joints

from conftest import random_sequence


def ntu_text(frames):
    """frames: list of frames, each a list of (body_id, (25, 3) array)."""
    out = [str(len(frames))]
    for bodies in frames:
        out.append(str(len(bodies)))
        for body_id, joints in bodies:
            out.append(f"{body_id} 0 0 0 0 0 0 0 0.1 0.2")
            out.append("25")
            for x, y, z in joints:
                out.append(f"{x} {y} {z} 0.5 0.5 100 200 1 0 0 0 2")
    return "\n".join(out) + "\n"


def test_ntu_minimal_file(rng):
    joints = rng.normal(size=(25, 3))
    seq = parse_ntu_skeleton(ntu_text([[(72057594037931101, joints)]]).encode())
    assert (seq.frame_count, seq.actor_count, seq.joint_count) == (1, 1, 25)
    np.testing.assert_array_equal(seq.coords[0, 0], joints)
    assert seq.actor_ids == (72057594037931101,)


def test_ntu_truncated_frame():
    joints = np.zeros((25, 3))
    text = ntu_text([[(1, joints)]]).replace("1\n1\n", "2\n1\n", 1)
    with pytest.raises(ParseError, match="frame 2/2") as e:
        parse_ntu_skeleton(text)
    assert e.value.line == 30  # 29-line file: 1 + 1 + 1 + 1 + 25


def test_ntu_two_bodies_stable_order(rng):
    a, b = rng.normal(size=(2, 3, 25, 3))
    frames = [[(7, a[t]), (3, b[t])] if t != 1 else [(3, b[t]), (7, a[t])] for t in range(3)]
    seq = parse_ntu_skeleton(ntu_text(frames))
    assert seq.actor_ids == (7, 3)
    np.testing.assert_array_equal(seq.coords[:, 0], a)
    np.testing.assert_array_equal(seq.coords[:, 1], b)


def test_ntu_missing_actor_zero_filled(rng):
    a, b = rng.normal(size=(2, 3, 25, 3))
    frames = [[(1, a[0]), (2, b[0])], [(1, a[1])], [(1, a[2]), (2, b[2])]]
    with pytest.warns(UserWarning, match="missing"):
        seq = parse_ntu_skeleton(ntu_text(frames))
    assert seq.actor_count == 2
    assert (seq.coords[1, 1] == 0).all()


def test_ntu_extra_bodies_keep_most_active(rng):
    still = np.zeros((4, 25, 3))
    moving = rng.normal(size=(2, 4, 25, 3))
    frames = [[(1, still[t]), (2, moving[0, t]), (3, moving[1, t])] for t in range(4)]
    with pytest.warns(UserWarning, match="3 bodies"):
        seq = parse_ntu_skeleton(ntu_text(frames))
    assert seq.actor_ids == (2, 3)


@pytest.mark.parametrize("mutate,msg", [
    (lambda t: t.replace("\n25\n", "\n24\n", 1), "expected 25 joints"),
    (lambda t: t.replace(" 0.5 0.5 100", " abc 0.5 100", 1), "non-numeric"),
    (lambda t: t + "1\n", "trailing"),
    (lambda t: t.replace(" 0 0 0 2\n", " 0 0 2\n", 1), "expected 12 values"),
])
def test_ntu_malformed(mutate, msg):
    text = ntu_text([[(1, np.zeros((25, 3)))]])
    with pytest.raises(ParseError, match=msg):
        parse_ntu_skeleton(mutate(text))


def test_ntu_roundtrip(rng):
    seq = SkeletonSequence(rng.normal(size=(4, 2, 25, 3)), source_id="s", actor_ids=(5, 9))
    again = parse_ntu_skeleton(format_ntu_skeleton(seq), source_id="s")
    assert again == seq


def test_jsonl_minimal():
    text = '{"label": 2, "joints": 2, "actors": 1}\n' \
           '{"actors": [[[0, 0, 0], [1, 1, 1]]]}\n' \
           '{"actors": [[[0, 1, 0], [1, 2, 1]]]}\n'
    seq = parse_jsonl(text)
    assert (seq.frame_count, seq.joint_count, seq.actor_count, seq.label) == (2, 2, 1, 2)


def test_jsonl_wrong_joint_count():
    text = '{"joints": 2, "actors": 1}\n{"actors": [[[0, 0, 0]]]}\n'
    with pytest.raises(ParseError, match="line 2: expected 2 joints, got 1"):
        parse_jsonl(text)


def test_jsonl_wrong_actor_count():
    text = '{"joints": 1, "actors": 2}\n{"actors": [[[0, 0, 0]]]}\n'
    with pytest.raises(ParseError, match="expected 2 actors"):
        parse_jsonl(text)


def test_jsonl_roundtrip(rng):
    for _ in range(20):
        seq = random_sequence(rng, actors=int(rng.integers(1, 3)), label=int(rng.integers(0, 9)))
        assert parse_jsonl(format_jsonl(seq)) == seq


def test_load_sequence_dispatch(tmp_path, rng):
    seq = random_sequence(rng, joints=25)
    (tmp_path / "a.jsonl").write_text(format_jsonl(seq))
    (tmp_path / "b.skeleton").write_text(format_ntu_skeleton(seq))
    assert load_sequence(tmp_path / "a.jsonl").coords.tolist() == seq.coords.tolist()
    assert load_sequence(tmp_path / "b.skeleton", label=4).label == 4
    with pytest.raises(ParseError, match="cannot read"):
        load_sequence(tmp_path / "missing.jsonl")


def test_manifest_validation_and_roundtrip(tmp_path):
    m = DatasetManifest([ManifestEntry("a.jsonl", 0, "train"), ManifestEntry("b.jsonl", 1, "test")], ["x", "y"])
    m.save(tmp_path / "manifest.json")
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back == m and back.root == tmp_path
    with pytest.raises(ConfigError):
        DatasetManifest([ManifestEntry("a", 2, "train")], ["x", "y"])
    with pytest.raises(ConfigError):
        DatasetManifest([ManifestEntry("a", 0, "train"), ManifestEntry("a", 1, "test")], ["x", "y"])


def test_synth_is_deterministic():
    spec = SynthSpec(class_count=3, sequences_per_class=4, test_per_class=1, seed=5)
    m1, s1 = generate_synthetic(spec)
    m2, s2 = generate_synthetic(spec)
    assert m1 == m2 and s1 == s2


def test_synth_counts_and_balance():
    m, seqs = generate_synthetic(SynthSpec(class_count=5, sequences_per_class=60, test_per_class=20))
    assert len(seqs) == 300
    labels = np.array([s.label for s in seqs])
    assert np.bincount(labels).tolist() == [60] * 5
    for c in range(5):
        assert sum(e.split == "test" and e.label == c for e in m.entries) == 20
    assert all(40 <= s.frame_count <= 80 for s in seqs)


def test_synth_scale_does_not_change_image():
    spec = SynthSpec()
    layout = default_layout(25)
    a = synth_sequence(spec, 2, 7, scale=0.5)
    b = synth_sequence(spec, 2, 7, scale=2.0, translation=(30.0, -4.0, 9.0))
    ia = encode_proposed(reorder_joints(a, layout)).pixels.astype(int)
    ib = encode_proposed(reorder_joints(b, layout)).pixels.astype(int)
    assert np.abs(ia - ib).max() <= 1
    assert not np.allclose(a.coords, b.coords)


def test_synth_injects_scale_and_translation():
    spec = SynthSpec(class_count=2, sequences_per_class=20, test_per_class=0)
    _, seqs = generate_synthetic(spec)
    spans = [np.ptp(s.coords[..., 1]) for s in seqs]
    centers = [s.coords.mean(axis=(0, 1, 2)) for s in seqs]
    assert max(spans) / min(spans) > 1.5
    assert np.ptp(np.array(centers), axis=0).min() > 1.0


def test_synth_two_actors():
    _, seqs = generate_synthetic(SynthSpec(class_count=2, sequences_per_class=2, test_per_class=1, actor_count=2))
    assert all(s.actor_count == 2 for s in seqs)


@pytest.mark.parametrize("kw", [dict(class_count=1), dict(frame_range=(4, 10)), dict(joint_count=17)])
def test_synth_spec_validation(kw):
    with pytest.raises(ConfigError):
        SynthSpec(**kw)

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stepkit.datamodel import (
    HEADER_SIZE,
    FeatureSequence,
    Manifest,
    VideoRecord,
    load_manifest,
    read_feature_store,
    save_dataset,
    validate_record,
    write_feature_store,
)
from stepkit.errors import CorruptionError, DataError, FormatError


def test_small_store_layout_and_roundtrip(tmp_path):
    seq = FeatureSequence("rgb", [[1, 2, 3], [4, 5, 6]])
    path = tmp_path / "x.stpf"
    write_feature_store(seq, path)
    raw = path.read_bytes()
    assert len(raw) == 24 + 24
    assert raw[:4] == b"STPF"
    assert struct.unpack("<IQQ", raw[4:24]) == (1, 2, 3)
    assert np.frombuffer(raw[24:], "<f4").tolist() == [1, 2, 3, 4, 5, 6]
    assert read_feature_store(path, modality_name="rgb") == seq


def test_zero_payload(tmp_path):
    path = tmp_path / "z.stpf"
    write_feature_store(FeatureSequence("a", [[0.0]]), path)
    assert path.read_bytes()[HEADER_SIZE:] == b"\x00" * 4


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (100, 16), elements=st.floats(-1e6, 1e6, width=32)))
def test_random_roundtrip_is_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "r.stpf"
    seq = FeatureSequence("m", data)
    write_feature_store(seq, path)
    back = read_feature_store(path, modality_name="m")
    assert back.data.tobytes() == seq.data.tobytes()


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.stpf"
    write_feature_store(FeatureSequence("a", np.ones((3, 2))), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_feature_store(path)


def test_wrong_version(tmp_path):
    path = tmp_path / "v.stpf"
    path.write_bytes(struct.pack("<4sIQQ", b"STPF", 7, 1, 1) + b"\x00" * 4)
    with pytest.raises(FormatError, match="version"):
        read_feature_store(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.stpf"
    # header claims 10 x 4 floats, only 3 rows present
    path.write_bytes(struct.pack("<4sIQQ", b"STPF", 1, 10, 4) + np.zeros(12, "<f4").tobytes())
    with pytest.raises(CorruptionError):
        read_feature_store(path)


def test_non_finite_rejected_with_frame(tmp_path):
    data = np.zeros((5, 2))
    data[3, 1] = np.nan
    with pytest.raises(DataError, match="frame 3"):
        write_feature_store(FeatureSequence("a", data), tmp_path / "n.stpf")


def _record(T1=10, T2=10, labels=None):
    return VideoRecord(
        "v",
        {"a": FeatureSequence("a", np.zeros((T1, 3))), "b": FeatureSequence("b", np.ones((T2, 2)))},
        step_labels=labels,
    )


def test_validate_consistent_record():
    assert validate_record(_record(labels=np.zeros(10))) == []


def test_validate_frame_count_mismatch():
    v = validate_record(_record(10, 11))
    assert len(v) == 1 and v[0].startswith("frame-count mismatch")


def test_validate_label_length():
    v = validate_record(_record(labels=np.zeros(9)))
    assert len(v) == 1 and v[0].startswith("label length")


def test_validate_bad_timestamps():
    seq = FeatureSequence("a", np.zeros((3, 2)), timestamps=[0.0, 2.0, 1.0])
    v = validate_record(VideoRecord("v", {"a": seq}))
    assert len(v) == 1 and v[0].startswith("timestamps")


def test_arrays_are_read_only():
    seq = FeatureSequence("a", np.zeros((3, 2)))
    with pytest.raises(ValueError):
        seq.data[0, 0] = 1.0


def test_manifest_roundtrip(tmp_path):
    ts = np.array([0.0, 0.5, 1.5, 2.0])
    rec = VideoRecord(
        "clip",
        {
            "rgb": FeatureSequence("rgb", np.arange(8.0).reshape(4, 2), fps=2.0, timestamps=ts),
            "flow": FeatureSequence("flow", np.ones((4, 3)), fps=2.0, timestamps=ts),
        },
        step_labels=[0, 0, -1, 1],
        phase_labels=[0, 0, 1, 1],
    )
    path = save_dataset(Manifest([rec], ["rgb", "flow"]), tmp_path)
    doc = json.loads(path.read_text())
    assert doc["videos"][0]["features"] == {"rgb": "clip.rgb.stpf", "flow": "clip.flow.stpf"}
    back = load_manifest(path)
    r = back.records[0]
    assert back.modality_names == ["rgb", "flow"]
    assert r.modalities["rgb"] == rec.modalities["rgb"]
    assert np.array_equal(r.timestamps, ts)
    assert r.step_labels.tolist() == [0, 0, -1, 1]
    assert back.violations() == []


def test_manifest_missing_file(tmp_path):
    rec = _record()
    path = save_dataset(Manifest([rec], ["a", "b"]), tmp_path)
    (tmp_path / "v.b.stpf").unlink()
    with pytest.raises(DataError, match="missing feature file"):
        load_manifest(path)

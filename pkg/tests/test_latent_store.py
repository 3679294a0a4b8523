import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tailfuse.errors import ConfigError, FormatError, PartitionError
from tailfuse.latent_store import (
    DatasetManifest,
    Record,
    SynthConfig,
    class_prototypes,
    class_regions,
    decode_tensor,
    encode_tensor,
    load_manifest,
    partition_head_tail,
    read_tensor,
    save_manifest,
    synth_longtail,
    write_tensor,
)


def test_roundtrip_random_tensor(tmp_path, rng):
    t = rng.normal(size=(8, 8, 4)).astype(np.float32)
    write_tensor(t, tmp_path / "t.lta")
    back = read_tensor(tmp_path / "t.lta")
    assert back.dtype == np.float32
    assert back.tobytes() == t.tobytes()


def test_header_layout_for_2x3():
    buf = encode_tensor(np.zeros((2, 3), np.float32))
    assert buf[:4] == b"LTA1"
    assert buf[4:16] == bytes.fromhex("02000000" "02000000" "03000000")
    assert len(buf) == 16 + 6 * 4


def test_payload_is_little_endian_row_major():
    buf = encode_tensor(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32))
    assert struct.unpack("<4f", buf[16:]) == (1.0, 2.0, 3.0, 4.0)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.lta"
    p.write_bytes(b"LTA2" + encode_tensor(np.zeros(3))[4:])
    with pytest.raises(FormatError, match="magic"):
        read_tensor(p)


def test_truncated_payload():
    buf = encode_tensor(np.ones((4, 4), np.float32))
    with pytest.raises(FormatError, match="truncated"):
        decode_tensor(buf[:-1])


def test_truncated_header():
    with pytest.raises(FormatError):
        decode_tensor(b"LTA1" + struct.pack("<I", 3) + struct.pack("<I", 2))


def test_dim_overflow_on_read():
    # dims whose product cannot possibly be backed by the payload
    buf = b"LTA1" + struct.pack("<I", 2) + struct.pack("<II", 2**32 - 1, 2**32 - 1)
    with pytest.raises(FormatError):
        decode_tensor(buf)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(arr):
    back = decode_tensor(encode_tensor(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


# ---------------------------------------------------------------------------


def test_synth_counts(default_manifest):
    train = default_manifest.split("train")
    assert len(train) == 660
    assert default_manifest.class_counts("train").tolist() == [200, 200, 200, 20, 20, 20]


def test_synth_deterministic():
    cfg = SynthConfig(head_count=30, tail_count=5, test_count=3)
    a, b = synth_longtail(cfg, 7), synth_longtail(cfg, 7)
    assert a.to_json() == b.to_json()
    for r in a.records:
        assert a.tensor(r.id).tobytes() == b.tensor(r.id).tobytes()
    c = synth_longtail(cfg, 8)
    assert any(a.tensor(r.id).tobytes() != c.tensor(r.id).tobytes() for r in a.records)


def test_synth_latent_matches_planted_prototypes():
    cfg = SynthConfig(head_count=10, tail_count=2, test_count=1, noise_std=0.0, cooccurrence=0.3)
    m = synth_longtail(cfg, 3)
    protos = class_prototypes(cfg, 3)
    regions = class_regions(cfg.num_classes, 8, 8)
    for r in m.records[:20]:
        expected = np.zeros(cfg.dims, np.float32)
        for c in r.positives():
            expected[regions[c]] += protos[c]
        np.testing.assert_array_equal(m.tensor(r.id), expected)


def test_region_energy_separation(default_manifest):
    # oracle: recompute region energies straight from the planted layout
    cfg = SynthConfig()
    regions = class_regions(cfg.num_classes, *cfg.dims[:2])
    _, z, y = default_manifest.arrays("train")
    idx = np.random.default_rng(0).choice(len(z), 500, replace=False)
    z, y = z[idx], y[idx]
    for c, (rs, cs) in enumerate(regions):
        energy = (z[:, rs, cs, :] ** 2).mean(axis=(1, 2, 3))
        on, off = energy[y[:, c] > 0], energy[y[:, c] == 0]
        if len(on) == 0:
            continue
        assert on.mean() > off.mean()
        assert on.mean() - off.mean() >= 3 * cfg.noise_std


def test_regions_disjoint():
    regions = class_regions(6, 8, 8)
    grid = np.zeros((8, 8), int)
    for rs, cs in regions:
        grid[rs, cs] += 1
    assert grid.max() == 1


def test_regions_do_not_fit():
    with pytest.raises(ConfigError):
        class_regions(30, 4, 4)
    with pytest.raises(ConfigError):
        synth_longtail(SynthConfig(k_head=20, k_tail=20, dims=(4, 4, 1)), 0)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(dims=(3, 8, 4))
    with pytest.raises(ValueError):
        SynthConfig(head_count=0)


def test_multilabel_cooccurrence():
    cfg = SynthConfig(head_count=100, tail_count=10, test_count=1, cooccurrence=0.5)
    m = synth_longtail(cfg, 1)
    per_record = [sum(r.labels) for r in m.split("train")]
    assert max(per_record) > 1
    assert min(per_record) >= 1


# ---------------------------------------------------------------------------


def test_manifest_save_load_roundtrip(tmp_path):
    m = synth_longtail(SynthConfig(head_count=12, tail_count=3, test_count=2), 5)
    path = save_manifest(m, tmp_path / "data" / "manifest.json")
    doc = json.loads(path.read_text())
    assert set(doc) == {"dims", "class_names", "records"}
    assert set(doc["records"][0]) == {"id", "tensor", "labels", "split"}
    back = load_manifest(path)
    assert back.dims == m.dims
    for r in m.records:
        assert back.tensor(r.id).tobytes() == m.tensor(r.id).tobytes()


def test_load_rejects_degenerate_manifest(tmp_path):
    write_tensor(np.zeros((4, 4, 1)), tmp_path / "a.lta")
    doc = {"dims": [4, 4, 1], "class_names": ["x", "y"],
           "records": [{"id": "a", "tensor": "a.lta", "labels": [1, 0], "split": "train"}]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="degenerate"):
        load_manifest(tmp_path / "m.json")


def test_load_rejects_duplicate_ids_and_missing_tensors(tmp_path):
    write_tensor(np.zeros((4, 4, 1)), tmp_path / "a.lta")
    rec = {"id": "a", "tensor": "a.lta", "labels": [1], "split": "train"}
    (tmp_path / "m.json").write_text(json.dumps({"dims": [4, 4, 1], "class_names": ["x"], "records": [rec, rec]}))
    with pytest.raises(FormatError, match="duplicate"):
        load_manifest(tmp_path / "m.json")
    rec2 = dict(rec, tensor="missing.lta")
    (tmp_path / "m.json").write_text(json.dumps({"dims": [4, 4, 1], "class_names": ["x"], "records": [rec2]}))
    with pytest.raises(FormatError, match="unresolvable"):
        load_manifest(tmp_path / "m.json")


# ---------------------------------------------------------------------------


def test_partition_threshold(default_manifest):
    p = partition_head_tail(default_manifest, threshold=100)
    assert p.head_classes == {0, 1, 2}
    assert p.tail_classes == {3, 4, 5}


def test_partition_explicit_passthrough(default_manifest):
    p = partition_head_tail(default_manifest, head=[0, 2, 4], tail=[1, 3, 5])
    assert p.head_classes == {0, 2, 4} and p.tail_classes == {1, 3, 5}


def test_partition_five_five():
    m = DatasetManifest((4, 4, 1), [f"c{i}" for i in range(10)],
                        [Record(f"r{i}", "", tuple(int(j == i) for j in range(10)), "train") for i in range(10)])
    p = partition_head_tail(m, head=range(5), tail=range(5, 10))
    assert len(p.head_classes) == 5 and len(p.tail_classes) == 5
    assert p.head_classes | p.tail_classes == set(range(10))


@pytest.mark.parametrize("head,tail,thr", [
    ([0, 1, 2, 3, 4, 5], [], None),
    ([0, 1], [1, 2, 3, 4, 5], None),
    ([0, 1], [2, 3], None),
    (None, None, 1000),
    (None, None, 0),
])
def test_partition_errors(default_manifest, head, tail, thr):
    with pytest.raises(PartitionError):
        partition_head_tail(default_manifest, head=head, tail=tail, threshold=thr)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=2, max_size=8), st.integers(0, 50))
def test_partition_is_disjoint_cover(counts, thr):
    k = len(counts)
    records = []
    for c, n in enumerate(counts):
        records += [Record(f"{c}_{i}", "", tuple(int(j == c) for j in range(k)), "train") for i in range(n)]
    m = DatasetManifest((4, 4, 1), [str(i) for i in range(k)], records)
    try:
        p = partition_head_tail(m, threshold=thr)
    except PartitionError:
        assert all(n > thr for n in counts) or all(n <= thr for n in counts)
        return
    assert not (p.head_classes & p.tail_classes)
    assert p.head_classes | p.tail_classes == set(range(k))

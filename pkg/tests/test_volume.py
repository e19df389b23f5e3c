import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vesselgraph.memory import MemoryTracker
from vesselgraph.volume import (BLOCK_EDGE, UNASSIGNED, VolumeFormatError, VolumeHeader, VoxelState,
                                copy_volume, create_volume, import_raw, open_volume, pack_block,
                                unpack_block, volume_from_array, volume_to_array)


@given(arrays(np.uint8, (32, 32, 32), elements=st.integers(0, 3)))
@settings(max_examples=25, deadline=None)
def test_pack_unpack_roundtrip(values):
    packed = pack_block(values)
    assert packed.nbytes == 8192
    assert np.array_equal(unpack_block(packed).reshape(32, 32, 32), values)


def test_packing_bit_layout():
    values = np.zeros(BLOCK_EDGE ** 3, dtype=np.uint8)
    values[0], values[1], values[5] = 1, 2, 3
    packed = pack_block(values)
    # voxel i occupies bits [2i, 2i+2), little endian within each byte
    assert packed[0] == 0b1001
    assert packed[1] == 0b1100


def test_header_roundtrip_and_file_layout(tmp_path):
    path = tmp_path / "v.vgv"
    v = create_volume((40, 33, 5), (0.5, 1.0, 2.0), path=path)
    v.set((39, 32, 4), VoxelState.FOREGROUND)
    v.close()
    raw = path.read_bytes()
    line, _, body = raw.partition(b"\n")
    assert line == b"VGV1 40 33 5 0.5 1.0 2.0 binary2bit"
    # 2 x 2 x 1 blocks of 32^3 voxels at 2 bits = 8192 bytes, x fastest
    assert len(body) == 4 * 8192
    last = np.frombuffer(body[3 * 8192:], dtype=np.uint8)
    i = 7 + 32 * (0 + 32 * 4)
    assert (last[i // 4] >> (2 * (i % 4))) & 3 == 1
    w = open_volume(path, "r")
    assert w.dims == (40, 33, 5) and w.spacing == (0.5, 1.0, 2.0)
    assert w.get((39, 32, 4)) == VoxelState.FOREGROUND
    assert w.count() == 1


@pytest.mark.parametrize("line", [b"VGV2 1 1 1 1 1 1 binary2bit", b"VGV1 1 1 1 1 1 binary2bit",
                                  b"VGV1 0 1 1 1 1 1 binary2bit", b"VGV1 1 1 1 1 -1 1 binary2bit",
                                  b"VGV1 1 1 1 1 1 1 float"])
def test_header_rejects_malformed(line):
    with pytest.raises(VolumeFormatError):
        VolumeHeader.decode(line)


def test_header_rejects_truncated_file(tmp_path):
    path = tmp_path / "v.vgv"
    create_volume((40, 40, 40), (1, 1, 1), path=path).close()
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(VolumeFormatError):
        open_volume(path)


def test_out_of_range_reads_are_background():
    v = volume_from_array(np.ones((3, 3, 3), dtype=bool))
    assert v.get((-1, 0, 0)) == VoxelState.BACKGROUND
    assert v.get((3, 3, 3)) == VoxelState.BACKGROUND
    box = v.read_box((-2, -2, -2), (5, 5, 5))
    assert box.shape == (7, 7, 7)
    assert box.sum() == 27 and box[2:5, 2:5, 2:5].all()
    with pytest.raises(IndexError):
        v.set((3, 0, 0), 1)


@given(st.tuples(st.integers(1, 70), st.integers(1, 40), st.integers(1, 40)), st.integers(0, 2 ** 31))
@settings(max_examples=15, deadline=None)
def test_array_roundtrip_and_box_reads(shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.random(shape) < 0.3
    v = volume_from_array(a)
    assert v.dims == shape[::-1]
    assert np.array_equal(volume_to_array(v) == VoxelState.FOREGROUND, a)
    lo = [int(rng.integers(-3, d)) for d in v.dims]
    hi = [int(rng.integers(l + 1, d + 4)) for l, d in zip(lo, v.dims)]
    padded = np.pad(a, 3)
    expect = padded[lo[2] + 3:hi[2] + 3, lo[1] + 3:hi[1] + 3, lo[0] + 3:hi[0] + 3]
    assert np.array_equal(v.read_box(lo, hi) == 1, expect)
    v.close()


def test_label_volume_defaults_and_sparse_blocks():
    v = create_volume((70, 5, 5), (1, 1, 1), "label")
    assert v.get((0, 0, 0)) == int(UNASSIGNED)
    v.write_box((40, 1, 1), np.full((1, 1, 3), 7, dtype=np.uint32))
    assert v.block_is_empty((0, 0, 0)) and not v.block_is_empty((1, 0, 0))
    assert list(v.iter_blocks(nonempty=True)) == [(1, 0, 0)]
    c = copy_volume(v)
    assert c.get((42, 1, 1)) == 7 and c.get((43, 1, 1)) == int(UNASSIGNED)


def test_stream_slabs_visits_every_voxel_once():
    rng = np.random.default_rng(0)
    a = rng.random((7, 9, 11)) < 0.5
    v = volume_from_array(a)
    for axis, n in (("x", 11), ("y", 9), ("z", 7)):
        slabs = list(v.stream_slabs(axis))
        assert len(slabs) == n
        assert sum(int((s == 1).sum()) for s in slabs) == int(a.sum())


def test_import_raw(tmp_path):
    rng = np.random.default_rng(1)
    a = (rng.random((6, 5, 40)) < 0.4).astype(np.uint8) * rng.integers(1, 255, (6, 5, 40)).astype(np.uint8)
    raw = tmp_path / "in.raw"
    a.tofile(raw)
    v = import_raw(raw, (40, 5, 6), (1.0, 1.0, 3.0), out_path=tmp_path / "out.vgv")
    assert np.array_equal(volume_to_array(v) == 1, a != 0)
    with pytest.raises(VolumeFormatError):
        import_raw(raw, (40, 5, 7), (1, 1, 1))


def test_tracked_cache_stays_within_budget():
    tracker = MemoryTracker(budget=64 * 1024)
    rng = np.random.default_rng(2)
    v = volume_from_array(rng.random((96, 96, 96)) < 0.5, tracker=tracker)
    tracker.reset_peak()
    for b in v.iter_blocks():
        v.read_block(b)
    # block cache plus one block of working buffer
    assert tracker.peak <= tracker.budget + BLOCK_EDGE ** 3 * 8
    assert tracker.whole_volume_materializations == 0
    volume_to_array(v)
    assert tracker.whole_volume_materializations == 1

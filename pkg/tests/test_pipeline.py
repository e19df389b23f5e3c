import numpy as np
import pytest
from scipy import ndimage

from conftest import STRUCT6, random_blobs
from vesselgraph.harness import preset, synth_phantom
from vesselgraph.memory import MemoryTracker
from vesselgraph.pipeline import PipelineConfig, fill_cavities, fixed_voxels_of, median_filter, run_pipeline
from vesselgraph.volume import is_foreground, volume_from_array, volume_to_array


def dense(v):
    return is_foreground(volume_to_array(v))


def cavity_fill_oracle(m, min_size):
    lab, n = ndimage.label(~m, structure=STRUCT6)
    out = m.copy()
    border = set(np.unique(np.concatenate([lab[0].ravel(), lab[-1].ravel(), lab[:, 0].ravel(),
                                           lab[:, -1].ravel(), lab[:, :, 0].ravel(), lab[:, :, -1].ravel()])))
    sizes = np.bincount(lab.ravel())
    for k in range(1, n + 1):
        if k not in border and sizes[k] < min_size:
            out[lab == k] = True
    return out


@pytest.mark.parametrize("seed", range(4))
def test_fill_cavities_matches_dense_labeling(seed):
    rng = np.random.default_rng(seed)
    m = ~random_blobs(rng, tuple(int(s) for s in rng.integers(20, 70, 3)), density=0.02, grow=1)
    for min_size in (2, 10, 10 ** 6):
        got = dense(fill_cavities(volume_from_array(m), min_size))
        assert np.array_equal(got, cavity_fill_oracle(m, min_size))


@pytest.mark.parametrize("radius", [1, 2])
def test_median_filter_matches_majority_vote(radius):
    rng = np.random.default_rng(radius)
    m = rng.random((40, 35, 37)) < 0.5
    got = dense(median_filter(volume_from_array(m), radius))
    k = 2 * radius + 1
    votes = ndimage.uniform_filter(m.astype(float), k, mode="constant") * k ** 3
    assert np.array_equal(got, votes > k ** 3 / 2 - 1e-6)


def test_preprocessing_rejects_bad_arguments():
    v = volume_from_array(np.ones((3, 3, 3), bool))
    with pytest.raises(ValueError):
        median_filter(v, 0)
    with pytest.raises(ValueError):
        fill_cavities(v, -1)
    with pytest.raises(ValueError):
        PipelineConfig(max_iterations=0)
    with pytest.raises(ValueError):
        PipelineConfig(bulge_threshold=-1)


def test_iterations_stop_at_a_fixed_point():
    pv = synth_phantom(preset("y_junction", radius=4, length=16))
    g, history = run_pipeline(pv.volume)
    assert (g.n_nodes, g.n_edges) == (4, 3)
    assert history[-1].edge_count == history[-2].edge_count
    assert history[0].fixed_voxels == 0 and history[1].fixed_voxels > 0
    assert all(h.edge_count <= h.proto_edge_count for h in history)


def test_max_iterations_and_callback():
    pv = synth_phantom(preset("bumpy_tube", length=60, bump_count=6))
    seen = []
    g, history = run_pipeline(pv.volume, PipelineConfig(max_iterations=1), on_iteration=seen.append)
    assert len(history) == 1 and seen == history


def test_fixed_voxels_are_leaf_nodes_and_loop_anchors():
    g, _ = run_pipeline(synth_phantom(preset("torus")).volume)
    (n,) = g.nodes.values()
    assert fixed_voxels_of(g).tolist() == sorted(n.voxels.tolist())
    g, _ = run_pipeline(synth_phantom(preset("cylinder")).volume)
    assert len(fixed_voxels_of(g)) == sum(n.voxel_count for n in g.nodes.values())


def test_empty_volume_gives_empty_graph():
    g, history = run_pipeline(volume_from_array(np.zeros((8, 8, 8), bool)))
    assert (g.n_nodes, g.n_edges, len(history)) == (0, 0, 1)


def test_input_volume_is_not_modified():
    pv = synth_phantom(preset("cylinder"))
    before = volume_to_array(pv.volume).copy()
    run_pipeline(pv.volume)
    assert np.array_equal(volume_to_array(pv.volume), before)


def test_peak_memory_is_reported_per_iteration():
    pv = synth_phantom(preset("cylinder"))
    tracker = MemoryTracker()
    _, history = run_pipeline(pv.volume, tracker=tracker)
    assert all(0 < h.peak_tracked_bytes <= tracker.budget for h in history)

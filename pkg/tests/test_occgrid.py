import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occ4d.occgrid import (
    TOY_CLASSES,
    VEHICLE,
    GridDataError,
    GridFormatError,
    SemanticGrid,
    ToySpec,
    generate_toy_scene,
    read_grid,
    render_bev,
    write_grid,
)

HEADER_SIZE = 24  # 4 magic + 1 version + 4*4 dims + 2 classes + 1 reserved


def small_grid(labels, num_classes=6):
    return SemanticGrid(labels=np.asarray(labels, dtype=np.uint8), num_classes=num_classes)


class TestFormat:
    def test_smallest_grid_file_size(self, tmp_path):
        g = small_grid(np.zeros((1, 1, 1, 1)))
        path = tmp_path / "g.ocg"
        write_grid(g, path)
        assert path.stat().st_size == HEADER_SIZE + 1

    def test_roundtrip_identity(self, tmp_path, rng):
        labels = rng.integers(0, 6, size=(3, 4, 5, 2))
        g = small_grid(labels)
        path = tmp_path / "g.ocg"
        write_grid(g, path)
        g2 = read_grid(path)
        assert g2 == g
        # bit-exact payload round trip
        write_grid(g2, tmp_path / "g2.ocg")
        assert (tmp_path / "g.ocg").read_bytes() == (tmp_path / "g2.ocg").read_bytes()

    def test_label_out_of_range_on_write(self, tmp_path):
        g = small_grid(np.zeros((1, 2, 2, 1)))
        g.labels[0, 0, 0, 0] = 7  # mutate past construction-time validation
        with pytest.raises(GridDataError):
            write_grid(g, tmp_path / "bad.ocg")

    def test_construction_rejects_out_of_range(self):
        with pytest.raises(GridDataError):
            small_grid(np.full((1, 1, 1, 1), 7), num_classes=6)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ocg"
        path.write_bytes(b"XXXX" + bytes(24))
        with pytest.raises(GridFormatError, match="magic"):
            read_grid(path)

    def test_truncated_payload(self, tmp_path):
        g = small_grid(np.zeros((2, 3, 3, 2)))
        path = tmp_path / "g.ocg"
        write_grid(g, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(GridFormatError, match="truncated"):
            read_grid(path)

    def test_label_exceeds_classes_on_read(self, tmp_path):
        g = small_grid(np.full((1, 1, 1, 1), 5), num_classes=6)
        path = tmp_path / "g.ocg"
        write_grid(g, path)
        raw = bytearray(path.read_bytes())
        raw[-1] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(GridFormatError):
            read_grid(path)

    def test_linearization_t_slowest(self, tmp_path):
        labels = np.arange(2 * 2 * 2 * 2, dtype=np.uint8).reshape(2, 2, 2, 2)
        g = small_grid(labels, num_classes=16)
        path = tmp_path / "g.ocg"
        write_grid(g, path)
        payload = path.read_bytes()[HEADER_SIZE:]
        # index = ((t*X + x)*Y + y)*Z + z
        assert payload[((1 * 2 + 0) * 2 + 1) * 2 + 0] == labels[1, 0, 1, 0]
        assert list(payload) == list(labels.reshape(-1))

    @settings(max_examples=20, deadline=None)
    @given(
        t=st.integers(1, 3), x=st.integers(1, 4), y=st.integers(1, 4),
        z=st.integers(1, 3), seed=st.integers(0, 10_000),
    )
    def test_roundtrip_property(self, t, x, y, z, seed):
        import tempfile

        rng = np.random.default_rng(seed)
        g = small_grid(rng.integers(0, 6, size=(t, x, y, z)))
        with tempfile.TemporaryDirectory() as td:
            path = f"{td}/p.ocg"
            write_grid(g, path)
            assert read_grid(path) == g


class TestToyScene:
    def test_determinism(self):
        a = generate_toy_scene(42, ToySpec())
        b = generate_toy_scene(42, ToySpec())
        assert a == b

    def test_different_seeds_differ(self):
        a = generate_toy_scene(1, ToySpec())
        b = generate_toy_scene(2, ToySpec())
        assert a != b

    def test_static_scene_frames_identical(self):
        g = generate_toy_scene(3, ToySpec(n_vehicles=0, n_pedestrians=0))
        for t in range(1, g.shape[0]):
            assert np.array_equal(g.labels[t], g.labels[0])

    def test_dims_out_of_range(self):
        with pytest.raises(GridDataError):
            ToySpec(t=2)
        with pytest.raises(GridDataError):
            ToySpec(x=300)

    def test_road_slab_static(self):
        g = generate_toy_scene(5, ToySpec())
        assert (g.labels[:, :, :, 0] != 0).all()

    def test_vehicle_centroids_move_linearly(self):
        # independent oracle: per-frame connected components, tracks associated
        # by optimal assignment between consecutive frames
        from scipy import ndimage
        from scipy.optimize import linear_sum_assignment

        g = generate_toy_scene(1, ToySpec(t=8, x=32, y=32, z=8,
                                          n_vehicles=2, n_pedestrians=1))
        frames = []
        for t in range(g.shape[0]):
            mask = g.labels[t] == VEHICLE
            labeled, n = ndimage.label(mask)
            assert n == 2, "vehicles must stay disjoint for tracking"
            frames.append(np.stack(
                [np.array(c) for c in
                 ndimage.center_of_mass(mask, labeled, range(1, n + 1))]
            ))
        tracks = [[c] for c in frames[0]]
        for t in range(1, len(frames)):
            prev = np.stack([tr[-1] for tr in tracks])
            cost = np.linalg.norm(prev[:, None, :] - frames[t][None, :, :], axis=2)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                tracks[r].append(frames[t][c])
        for pts in tracks:
            pts = np.stack(pts)
            vel = pts[1] - pts[0]
            for t in range(len(pts)):
                assert np.allclose(pts[t], pts[0] + t * vel, atol=1e-9)

    def test_agent_counts(self):
        from scipy import ndimage

        g = generate_toy_scene(9, ToySpec(n_vehicles=3, n_pedestrians=2))
        _, nv = ndimage.label(g.labels[0] == VEHICLE)
        _, np_ = ndimage.label(g.labels[0] == 4)
        assert nv == 3 and np_ == 2


class TestBev:
    def test_all_free(self):
        g = small_grid(np.zeros((1, 4, 5, 3)))
        img = render_bev(g, 0, TOY_CLASSES)
        assert img.shape == (4, 5, 3)
        assert (img == np.array(TOY_CLASSES.colors[0])).all()

    def test_single_voxel(self):
        labels = np.zeros((1, 8, 8, 2), dtype=np.uint8)
        labels[0, 2, 5, 0] = 3
        img = render_bev(small_grid(labels), 0, TOY_CLASSES)
        hits = np.argwhere((img != np.array(TOY_CLASSES.colors[0])).any(axis=2))
        assert hits.tolist() == [[2, 5]]
        assert tuple(img[2, 5]) == TOY_CLASSES.colors[3]

    def test_max_z_rule(self):
        labels = np.zeros((1, 4, 4, 4), dtype=np.uint8)
        labels[0, 1, 1, 0] = 1  # road below
        labels[0, 1, 1, 2] = 3  # vehicle above
        img = render_bev(small_grid(labels), 0, TOY_CLASSES)
        assert tuple(img[1, 1]) == TOY_CLASSES.colors[3]

    def test_frame_out_of_range(self):
        g = small_grid(np.zeros((2, 4, 4, 2)))
        with pytest.raises(GridDataError):
            render_bev(g, 2, TOY_CLASSES)

    def test_depends_only_on_selected_frame(self):
        labels = np.zeros((2, 4, 4, 2), dtype=np.uint8)
        labels[1, 0, 0, 0] = 3
        a = render_bev(small_grid(labels), 0, TOY_CLASSES)
        labels2 = labels.copy()
        labels2[1] = 0
        b = render_bev(small_grid(labels2), 0, TOY_CLASSES)
        assert np.array_equal(a, b)

import numpy as np
import pytest
from conftest import make_cfg

from pillarfuse import dataio
from pillarfuse.errors import DataError, TruncatedFile
from pillarfuse.geometry import GeoFence
from pillarfuse.render import (
    DET_RED,
    GT_GREEN,
    POINT_GRAY,
    bev_image,
    draw_box_outline,
    draw_line,
    draw_points,
    image_shape,
    read_ppm,
    render_run,
    to_pixel,
    write_ppm,
)

WIN = GeoFence((0.0, 8.0), (0.0, 8.0), (0.0, 2.0))


def line_pixels(r0, c0, r1, c1, shape=(32, 32)):
    img = np.zeros((*shape, 1), dtype=np.uint8)
    draw_line(img, r0, c0, r1, c1, (1,))
    return set(zip(*np.nonzero(img[:, :, 0])))


def rect_perimeter(rmin, rmax, cmin, cmax):
    """Axis-aligned outline pixel set, derived by plain arithmetic."""
    out = set()
    for r in range(rmin, rmax + 1):
        out.add((r, cmin))
        out.add((r, cmax))
    for c in range(cmin, cmax + 1):
        out.add((rmin, c))
        out.add((rmax, c))
    return out


class TestPixelMapping:
    def test_row_zero_is_max_y(self):
        assert to_pixel(0.5, 7.5, WIN, 1.0) == (0, 0)
        assert to_pixel(7.5, 0.5, WIN, 1.0) == (7, 7)

    def test_image_shape_ceils(self):
        assert image_shape(WIN, 1.0) == (8, 8)
        assert image_shape(WIN, 3.0) == (3, 3)

    def test_points_clamp_on_closed_max_edges(self):
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        draw_points(img, np.array([[8.0, 0.0], [0.0, 8.0]]), WIN, 1.0)
        assert tuple(img[7, 7]) == POINT_GRAY
        assert tuple(img[0, 0]) == POINT_GRAY
        assert (img != 0).sum() == 2 * 3

    def test_points_outside_dropped(self):
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        draw_points(img, np.array([[8.1, 2.0], [2.0, -0.1]]), WIN, 1.0)
        assert not img.any()


class TestDrawLine:
    def test_horizontal_vertical_diagonal_exact(self):
        assert line_pixels(2, 1, 2, 5) == {(2, c) for c in range(1, 6)}
        assert line_pixels(1, 3, 6, 3) == {(r, 3) for r in range(1, 7)}
        assert line_pixels(0, 0, 3, 3) == {(0, 0), (1, 1), (2, 2), (3, 3)}

    def test_single_pixel(self):
        assert line_pixels(4, 4, 4, 4) == {(4, 4)}

    def test_clipping_keeps_inside_part(self):
        px = line_pixels(-3, 5, 5, 5, shape=(8, 8))
        assert px == {(r, 5) for r in range(0, 6)}

    def test_monotone_eight_connected(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            r0, c0, r1, c1 = rng.integers(0, 30, 4)
            px = sorted(line_pixels(r0, c0, r1, c1))
            assert len(px) == max(abs(r1 - r0), abs(c1 - c0)) + 1
            assert (min(r0, r1), min(c0, c1)) <= px[0]
            chain = sorted(px, key=lambda p: (abs(p[0] - r0), abs(p[1] - c0)))
            assert chain[0] == (r0, c0) and chain[-1] == (r1, c1)
            for (ra, ca), (rb, cb) in zip(chain, chain[1:]):
                assert max(abs(rb - ra), abs(cb - ca)) == 1


class TestBoxOutline:
    def test_axis_aligned_matches_perimeter_arithmetic(self):
        # center (4, 4), length 4 along +x, width 2 along +y, yaw 0:
        # corners x in {2, 6}, y in {3, 5} -> rows 3..5, cols 2..6
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        box = np.array([4.0, 4.0, 1.0, 2.0, 4.0, 1.0, 0.0])
        draw_box_outline(img, box, WIN, 1.0, GT_GREEN)
        got = set(zip(*np.nonzero(img[:, :, 1])))
        assert got == rect_perimeter(3, 5, 2, 6)
        assert not img[:, :, 0].any() and not img[:, :, 2].any()

    def test_quarter_turn_swaps_extents(self):
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        box = np.array([4.0, 4.0, 1.0, 2.0, 4.0, 1.0, np.pi / 2])
        draw_box_outline(img, box, WIN, 1.0, GT_GREEN)
        got = set(zip(*np.nonzero(img[:, :, 1])))
        assert got == rect_perimeter(2, 6, 3, 5)


class TestBevImage:
    def test_layering_detections_over_truth(self):
        box = np.array([[4.0, 4.0, 1.0, 2.0, 4.0, 1.0, 0.0]])
        img = bev_image(np.zeros((0, 2)), box, box, WIN, 1.0)
        assert not img[:, :, 1].any()  # same outline: red repaints green
        reds = set(zip(*np.nonzero(img[:, :, 0])))
        assert reds == rect_perimeter(3, 5, 2, 6)

    def test_disjoint_colors_coexist(self):
        gt = np.array([[2.0, 6.0, 1.0, 1.0, 1.0, 1.0, 0.0]])
        det = np.array([[6.0, 2.0, 1.0, 1.0, 1.0, 1.0, 0.0]])
        pts = np.array([[0.5, 0.5]])
        img = bev_image(pts, gt, det, WIN, 1.0)
        assert tuple(img[7, 0]) == POINT_GRAY
        assert (img[:, :, 1] == 255).sum() == len(rect_perimeter(1, 2, 1, 2))
        assert (img[:, :, 0] == 255).sum() == len(rect_perimeter(5, 6, 5, 6))


class TestPpmIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        p = tmp_path / "img.ppm"
        write_ppm(p, img)
        assert p.read_bytes()[:11] == b"P6\n7 5\n255\n"
        np.testing.assert_array_equal(read_ppm(p), img)

    def test_rejects_bad_shape(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "x.ppm", np.zeros((4, 4), dtype=np.uint8))

    def test_parse_errors(self, tmp_path):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
        with pytest.raises(DataError, match="not a P6"):
            read_ppm(bad)
        bad.write_bytes(b"P6\ntwo two\n255\n" + bytes(12))
        with pytest.raises(DataError, match="bad pixmap header"):
            read_ppm(bad)
        bad.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(TruncatedFile, match="payload"):
            read_ppm(bad)


class TestRenderRun:
    def test_writes_deterministic_frame(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path / "run")
        out = render_run(cfg, split="val")
        assert out == tmp_path / "run" / "render" / "val_000000.ppm"
        img = read_ppm(out)
        assert img.shape == (512, 512, 3)
        gray = np.all(img == 128, axis=2)
        green = (img[:, :, 1] == 255) & (img[:, :, 0] == 0)
        assert gray.sum() > 1000  # lidar returns cover the window
        assert green.sum() > 50  # eight actors outlined
        assert not (img[:, :, 0] == 255).any()  # no detections written yet
        first = out.read_bytes()
        render_run(cfg, split="val")
        assert out.read_bytes() == first

    def test_overlays_written_detections(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path / "run")
        det_dir = tmp_path / "run" / "detections" / "val"
        det_dir.mkdir(parents=True)
        rec = dataio.LabelRecord("car", 1.5, 1.9, 4.6, 5.0, 5.0, 0.0, 0.4,
                                 score=0.9)
        dataio.write_labels(det_dir / "000000.txt", [rec])
        img = read_ppm(render_run(cfg, split="val"))
        assert ((img[:, :, 0] == 255) & (img[:, :, 1] == 0)).sum() > 20

    def test_unknown_frame_or_split(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path / "run")
        with pytest.raises(DataError, match="no frames"):
            render_run(cfg, split="nope")
        with pytest.raises(DataError, match="not in split"):
            render_run(cfg, split="val", fid="000042")

"""
Unit tests for geometry module
Tests polylines, resampling, Frechet distance, box overlap and the BEV window
"""

import pytest
import numpy as np
import os

# Import the modules to test
import sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from errors import GeometryError
from geometry import (BBox2D, BevWindow, Polyline3D, endpoint_gap, frechet, frechet_matrix, giou, giou_loss,
                      iou, pairwise_giou, pairwise_iou, resample)
from numerics import TensorNode


def _line(y=0.0, n=3, length=2.0):
    xs = np.linspace(0.0, length, n)
    return np.column_stack([xs, np.full(n, y), np.zeros(n)])


def _coupling_frechet(a, b):
    """Frechet distance as the minimum leash over every monotone coupling"""
    def walks(i, j):
        if (i, j) == (len(a) - 1, len(b) - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < len(a) and j + dj < len(b):
                for rest in walks(i + di, j + dj):
                    yield [(i, j)] + rest

    return min(max(np.linalg.norm(a[i] - b[j]) for i, j in walk) for walk in walks(0, 0))


@pytest.mark.unit
class TestPolyline:
    """Test Polyline3D validation and resampling"""

    def test_valid_polyline(self):
        """Test basic properties"""
        poly = Polyline3D(_line(length=4.0, n=5))

        assert poly.n_points == 5
        np.testing.assert_array_equal(poly.start, [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(poly.end, [4.0, 0.0, 0.0])
        assert poly.length() == pytest.approx(4.0)

    def test_rejects_wrong_shape(self):
        """Test points must be N x 3"""
        with pytest.raises(GeometryError, match="N x 3"):
            Polyline3D(np.zeros((3, 2)))

    def test_rejects_single_point(self):
        """Test at least two points"""
        with pytest.raises(GeometryError, match="at least 2"):
            Polyline3D(np.zeros((1, 3)))

    def test_rejects_coincident_points(self):
        """Test all-coincident points"""
        with pytest.raises(GeometryError, match="coincident"):
            Polyline3D(np.ones((4, 3)))

    def test_equality_by_value(self):
        """Test polylines compare by coordinates"""
        assert Polyline3D(_line()) == Polyline3D(_line())
        assert Polyline3D(_line()) != Polyline3D(_line(y=1.0))

    def test_resample_equal_spacing(self):
        """Test arc-length resampling of a straight segment"""
        poly = resample(np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]), 11)

        np.testing.assert_allclose(poly.points[:, 0], np.arange(11.0))
        np.testing.assert_array_equal(poly.points[0], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(poly.points[-1], [10.0, 0.0, 0.0])

    def test_resample_bent_line_keeps_endpoints(self):
        """Test endpoints survive resampling of an L shape"""
        pts = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.0, 4.0, 1.0]])
        poly = resample(pts, 7)

        assert poly.n_points == 7
        np.testing.assert_array_equal(poly.start, pts[0])
        np.testing.assert_array_equal(poly.end, pts[-1])
        steps = np.linalg.norm(np.diff(poly.points, axis=0), axis=1)
        assert steps.max() <= Polyline3D(pts).length() / 6 + 1e-9

    def test_resample_needs_two_points(self):
        """Test n >= 2"""
        with pytest.raises(GeometryError):
            resample(_line(), 1)


@pytest.mark.unit
class TestFrechet:
    """Test the discrete Frechet distance"""

    def test_identical_is_zero(self):
        """Test d(a, a) = 0"""
        assert frechet(_line(), _line()) == 0.0

    def test_parallel_offset(self):
        """Test parallel lines one meter apart"""
        assert frechet(_line(), _line(y=1.0)) == pytest.approx(1.0)

    def test_outlier_point_dominates(self):
        """Test the leash must reach an outlier vertex"""
        bent = np.array([[0.0, 0.0, 0.0], [1.0, 5.0, 0.0], [2.0, 0.0, 0.0]])

        assert frechet(_line(), bent) == pytest.approx(5.0)

    def test_symmetric(self):
        """Test d(a, b) = d(b, a) for different point counts"""
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))

        assert frechet(a, b) == pytest.approx(frechet(b, a))

    def test_reversed_direction_is_far(self):
        """Test direction matters"""
        line = _line(length=10.0, n=5)

        assert frechet(line, line[::-1]) == pytest.approx(10.0)

    def test_matches_coupling_enumeration(self):
        """Test the dynamic programme against every monotone coupling"""
        rng = np.random.default_rng(5)
        for trial in range(40):
            a = rng.normal(size=(int(rng.integers(1, 6)), 3))
            b = rng.normal(size=(int(rng.integers(1, 6)), 3))

            assert frechet(a, b) == pytest.approx(_coupling_frechet(a, b))

    def test_matrix_matches_pairwise(self):
        """Test the batched matrix agrees with single calls"""
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(3, 6, 3)), rng.normal(size=(2, 6, 3))

        matrix = frechet_matrix(a, b)

        assert matrix.shape == (3, 2)
        for i in range(3):
            for j in range(2):
                assert matrix[i, j] == pytest.approx(frechet(a[i], b[j]))

    def test_matrix_empty(self):
        """Test empty inputs give an empty matrix"""
        assert frechet_matrix(np.zeros((0, 4, 3)), np.ones((2, 4, 3))).shape == (0, 2)

    def test_endpoint_gap(self):
        """Test end-to-start distance"""
        assert endpoint_gap(_line(), _line(y=0.5) + [2.0, 0.0, 0.0]) == pytest.approx(0.5)


@pytest.mark.unit
class TestBoxes:
    """Test IoU, GIoU and the differentiable GIoU loss"""

    def setup_method(self):
        """Set up test fixtures"""
        self.a = BBox2D(0.0, 0.0, 1.0, 1.0)
        self.half = BBox2D(0.5, 0.0, 1.5, 1.0)
        self.far = BBox2D(2.0, 0.0, 3.0, 1.0)

    def test_degenerate_box(self):
        """Test zero-width boxes are rejected"""
        with pytest.raises(GeometryError):
            BBox2D(0.0, 0.0, 0.0, 1.0)

    def test_from_center(self):
        """Test center construction"""
        assert BBox2D.from_center(0.5, 0.5, 1.0, 1.0) == self.a
        assert self.a.area == pytest.approx(1.0)

    def test_overlap(self):
        """Test IoU and GIoU of half-overlapping boxes"""
        assert iou(self.a, self.half) == pytest.approx(1.0 / 3.0)
        assert giou(self.a, self.half) == pytest.approx(1.0 / 3.0)

    def test_disjoint_giou_is_negative(self):
        """Test GIoU penalizes the empty hull fraction"""
        assert iou(self.a, self.far) == 0.0
        assert giou(self.a, self.far) == pytest.approx(-1.0 / 3.0)

    def test_pairwise_shapes(self):
        """Test pairwise matrices"""
        boxes = np.stack([self.a.as_array(), self.half.as_array(), self.far.as_array()])

        assert pairwise_iou(boxes, boxes[:2]).shape == (3, 2)
        np.testing.assert_allclose(np.diag(pairwise_giou(boxes, boxes)), 1.0)

    def test_giou_loss_values(self):
        """Test 1 - GIoU per row"""
        pred = TensorNode(np.stack([self.a.as_array(), self.a.as_array()]), requires_grad=True)
        target = np.stack([self.a.as_array(), self.far.as_array()])

        loss = giou_loss(pred, target).values

        np.testing.assert_allclose(loss, [0.0, 1.0 + 1.0 / 3.0], atol=1e-6)


@pytest.mark.unit
class TestBevWindow:
    """Test window normalization"""

    def test_normalize_corners(self):
        """Test the window maps onto [-1, 1]"""
        window = BevWindow()

        np.testing.assert_allclose(window.normalize([[25.0, 12.5, 0.5], [-25.0, -12.5, 0.0]]),
                                   [[1.0, 1.0, 0.5], [-1.0, -1.0, 0.0]])

    def test_denormalize_inverts(self):
        """Test denormalize(normalize(p)) = p"""
        window = BevWindow((-10.0, 30.0), (-5.0, 5.0), 2.0)
        pts = np.array([[3.0, -1.0, 0.4], [29.0, 4.0, -1.0]])

        np.testing.assert_allclose(window.denormalize(window.normalize(pts)), pts)

    def test_contains(self):
        """Test window membership"""
        window = BevWindow()

        assert window.contains(np.array([[0.0, 0.0, 3.0], [25.0, -12.5, 0.0]]))
        assert not window.contains(np.array([[26.0, 0.0, 0.0]]))

"""Colour coding of flow fields."""

import numpy as np

from dmp.viz import WHEEL_SEGMENTS, flow_to_color, make_colorwheel


class TestColorWheel:
    def test_size_and_anchors(self):
        wheel = make_colorwheel()
        assert wheel.shape == (55, 3) and sum(WHEEL_SEGMENTS) == 55
        np.testing.assert_array_equal(wheel[0], [255, 0, 0])
        np.testing.assert_array_equal(wheel[15], [255, 255, 0])
        np.testing.assert_array_equal(wheel[21], [0, 255, 0])
        np.testing.assert_array_equal(wheel[25], [0, 255, 255])
        np.testing.assert_array_equal(wheel[36], [0, 0, 255])
        np.testing.assert_array_equal(wheel[49], [255, 0, 255])


class TestFlowToColor:
    def test_zero_is_white(self):
        assert (flow_to_color(np.zeros((2, 3, 3))) == 255).all()

    def test_positive_u_is_wheel_start(self):
        flow = np.zeros((2, 1, 1))
        flow[0] = 4.0
        np.testing.assert_array_equal(flow_to_color(flow, 4.0)[0, 0], [255, 0, 0])

    def test_half_magnitude_desaturates(self):
        flow = np.zeros((2, 1, 1))
        flow[0] = 2.0
        np.testing.assert_array_equal(flow_to_color(flow, 4.0)[0, 0], [255, 128, 128])

    def test_cardinal_directions_distinct(self):
        flow = np.array([[1, 0, -1, 0], [0, 1, 0, -1]], float)[:, None, :]
        colors = flow_to_color(flow, 1.0)[0]
        assert len({tuple(c) for c in colors}) == 4
        assert colors.dtype == np.uint8 and colors.shape == (4, 3)

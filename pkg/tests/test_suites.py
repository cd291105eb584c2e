import numpy as np

from nsmae import ndgrad as ng
from nsmae.suites import (aligned_scene, convergence_sweep, exactness_errors, halving_ratios, primitive_errors,
                          tiny_config)


class TestPrimitiveSuite:
    def test_every_primitive_covered(self):
        errs = primitive_errors(0)
        assert set(errs) == set(ng.PRIMITIVES)
        assert max(errs.values()) < 1e-5


class TestExactness:
    def test_few_fields(self):
        errs = exactness_errors(n_fields=4, n_rays=4)
        assert max(errs.values()) < 1e-10

    def test_aligned_faces(self):
        scene = aligned_scene(3, 0.1, 0.0, 40)
        for prim in scene.primitives:
            lo, hi = prim.bounds()
            # x-faces sit on multiples of the sample spacing
            np.testing.assert_allclose(np.array([lo[0], hi[0]]) / 0.1, np.round(np.array([lo[0], hi[0]]) / 0.1),
                                       atol=1e-9)


class TestConvergence:
    def test_ratios_near_two(self):
        rows = convergence_sweep((0.4, 0.2, 0.1), n_rays=5)
        assert [r["delta"] for r in rows] == [0.4, 0.2, 0.1]
        for ratio in halving_ratios(rows, "depth"):
            assert 1.7 <= ratio <= 2.3

    def test_halving_ratios(self):
        rows = [{"e": 8.0}, {"e": 4.0}, {"e": 1.0}]
        assert halving_ratios(rows, "e") == [2.0, 4.0]


def test_tiny_config_shape():
    cfg = tiny_config(3)
    assert cfg["seed"] == 3 and cfg["optim"]["batch"] == 1
    lo, hi, size = (np.asarray(cfg["grid"][k]) for k in ("lo", "hi", "size"))
    np.testing.assert_array_equal((hi - lo) / size, [4, 4, 4])

import math

import numpy as np
import pytest

from nsmae import ndgrad as ng
from nsmae.objective import (COLOR, DEPTH_BEV, DEPTH_PER, LossConfig, LossError, LossTerm, color_loss,
                             modality_loss, total_loss)


class TestColorLoss:
    def test_zero_when_equal(self):
        c = np.random.default_rng(0).uniform(size=(5, 3))
        assert color_loss(c, c) == 0.0

    def test_unit_difference(self):
        assert color_loss(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 3))) == 1.0

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(10, 3)), rng.uniform(size=(10, 3))
        ref = math.fsum(sum((a[r, k] - b[r, k]) ** 2 for k in range(3)) for r in range(10)) / 10
        np.testing.assert_allclose(color_loss(a, b), ref, rtol=0, atol=1e-12)

    def test_empty(self):
        with pytest.raises(LossError):
            color_loss(np.zeros((0, 3)), np.zeros((0, 3)))


class TestModalityLoss:
    def test_l1_single(self):
        np.testing.assert_allclose(modality_loss(np.array([1.3]), np.array([1.0]), 1), 0.3, atol=1e-15)

    def test_invalid_rays_excluded(self):
        rng = np.random.default_rng(2)
        pred, tgt = rng.uniform(size=5), rng.uniform(size=5)
        base = modality_loss(pred, tgt, 1)
        pred2 = np.concatenate([pred, rng.uniform(size=100)])
        tgt2 = np.concatenate([tgt, np.full(100, np.nan)])
        valid = np.concatenate([np.ones(5, bool), np.zeros(100, bool)])
        assert modality_loss(pred2, tgt2, 1, valid) == base

    def test_p2_matches_color(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(7, 3)), rng.uniform(size=(7, 3))
        np.testing.assert_allclose(modality_loss(a, b, 2), color_loss(a, b), rtol=1e-15)

    def test_no_valid_rays(self):
        with pytest.raises(LossError, match="no valid"):
            modality_loss(np.ones(3), np.ones(3), 1, np.zeros(3, bool))

    def test_gradient_through_tape(self):
        tape = ng.Tape()
        x0 = np.array([0.2, -0.4, 1.5])
        x = tape.input(x0)
        modality_loss(x, np.array([0.0, 0.0, 1.0]), 1, np.array([True, True, False]))
        (g,) = ng.grad(tape, ng.Var(tape, len(tape.nodes) - 1))
        np.testing.assert_allclose(g, [0.5, -0.5, 0.0])


class TestTotal:
    def raws(self):
        return {COLOR: 0.3, DEPTH_PER: 1.7, DEPTH_BEV: 0.4}

    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.weights == (1e4, 1e-2, 1e-2)
        assert cfg.term(COLOR).p == 2 and cfg.term(DEPTH_PER).p == 1 and cfg.term(DEPTH_BEV).p == 1

    def test_all_zero_weights(self):
        cfg = LossConfig().scaled(0.0)
        assert total_loss(self.raws(), cfg).total == 0.0

    def test_doubling(self):
        a = total_loss(self.raws(), LossConfig()).total
        b = total_loss(self.raws(), LossConfig().scaled(2.0)).total
        assert b == 2.0 * a

    def test_missing_target(self):
        with pytest.raises(LossError, match="missing"):
            total_loss({COLOR: 1.0}, LossConfig())

    def test_invalid_terms(self):
        with pytest.raises(LossError):
            LossTerm(COLOR, 3, 1.0)
        with pytest.raises(LossError):
            LossTerm(COLOR, 2, -1.0)
        with pytest.raises(LossError, match="duplicate"):
            LossConfig((LossTerm(COLOR, 2, 1.0), LossTerm(COLOR, 1, 1.0)))

    def test_list_round_trip(self):
        cfg = LossConfig()
        assert LossConfig.from_list(cfg.to_list()) == cfg

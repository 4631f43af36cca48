"""Finite-difference checks of every analytic gradient used in training and adaptation."""
import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import model
import tensorcore as tc
import ttaengine

TOLERANCE = 1e-5
SEEDS = range(100)


def _check(build, params):
    """Compare tape gradients against central differences."""
    _, analytic = tc.evaluate_with_grad(build, params)

    def f(values):
        tape = tc.Tape()
        nodes = {name: tape.param(value, name) for name, value in values.items()}
        return float(build(tape, nodes).value)

    numeric = tc.finite_diff_grad(f, params)
    for name in params:
        assert tc.relative_error(analytic[name], numeric[name]) <= TOLERANCE, name


@pytest.mark.unit
class TestPrimitiveGradients:
    """Gradient checks for the composite building blocks."""

    def test_batch_standardize(self):
        """Batch standardization matches central differences."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((6, 3))
            c = rng.standard_normal((6, 3))
            _check(lambda tape, p: tc.sum(tc.mul(tc.batch_standardize(p["x"]), c)), {"x": x})

    def test_l2_normalize_and_matmul(self):
        """Normalized rows times a matrix."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            h = rng.standard_normal((4, 5))
            w = rng.standard_normal((3, 5))
            c = rng.standard_normal((4, 3))
            build = lambda tape, p: tc.sum(tc.mul(tc.matmul(tc.l2_normalize(p["h"]), tc.transpose(p["w"])), c))
            _check(build, {"h": h, "w": w})

    def test_entropy_of_logits(self):
        """Entropy computed through log_softmax."""
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            z = rng.standard_normal((5, 4)) * 2.0

            def build(tape, p):
                log_p = tc.log_softmax(p["z"])
                return tc.mean(tc.mul(tc.sum(tc.mul(tc.exp(log_p), log_p), axis=1), -1.0))

            _check(build, {"z": z})

    def test_cross_entropy(self):
        """Training loss with respect to the logits."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            z = rng.standard_normal((6, 3))
            onehot = np.eye(3)[rng.integers(0, 3, 6)]
            _check(lambda tape, p: model.cross_entropy(p["z"], onehot), {"z": z})


@pytest.mark.unit
class TestAlignmentLossGradients:
    """The three alignment losses, differentiated with respect to the feature."""

    @pytest.mark.parametrize("variant", ["infonce", "l2", "triplet"])
    def test_loss_nc_feature_gradient(self, variant):
        """Gradient with respect to h matches finite differences over 100 seeds."""
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            classes, width = 5, 6
            h = rng.standard_normal(width)
            omega = rng.standard_normal((classes, width))
            k = int(rng.integers(1, classes))
            target = rng.permutation(classes)[:k]
            # margin above the largest possible gap keeps the triplet hinge active
            margin = 2.5 if variant == "triplet" else 1.0
            build = lambda tape, p: ttaengine.loss_nc(p["h"], omega, target, variant, margin)
            _check(build, {"h": h})


@pytest.mark.unit
class TestTotalLossGradients:
    """The full adaptation objective through the model."""

    @pytest.mark.parametrize("variant", ["infonce", "l2", "triplet"])
    def test_total_loss_affine_gradient(self, variant):
        """Gradient of the batch objective with respect to the affine parameters.
        Sample weights are unit here since they are constants of the analytic pass."""
        cfg = ttaengine.AdaptConfig(loss_variant=variant, use_weight=False, k=2, tau_margin=2.5)
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            params, norm = model.init_params(4, (6,), 3, seed=seed, activation="tanh")
            x = rng.standard_normal((8, 4))
            run_cfg = replace(cfg, gamma_ent=np.log(3) + 1.0).resolved(3)
            names = model.affine_param_names(params)
            start = {name: params.named_arrays()[name] for name in names}

            def objective(values):
                tape = tc.Tape()
                trial = params.with_arrays(values)
                out = model.forward(trial, norm, x, mode="train", tape=tape, trainable=names, update_stats=False)
                return tape, ttaengine.total_loss(out.H, out.Z, trial.classifier, run_cfg).loss

            tape, loss = objective(start)
            analytic = tc.backward(tape, loss)
            numeric = tc.finite_diff_grad(lambda values: float(objective(values)[1].value), start)
            for name in names:
                assert tc.relative_error(analytic[name], numeric[name]) <= TOLERANCE, (seed, name)

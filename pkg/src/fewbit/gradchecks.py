"""Finite-difference checks for every layer and the full pipeline, in 64-bit mode."""
from __future__ import annotations

import numpy as np

from ._rng import child_rng
from .diffcore import (BatchNorm, Conv2d, Dense, GradCheckReport, Tensor, functional as F, grad_check,
                       precision, relative_error)
from .featcomp import FeatComp, FeatCompConfig, to_signs
from .tasks import FrameExtractor, TaskPerformer, question_onehot


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # a random projection so every output entry carries a distinct gradient
    return F.sum_all(F.mul(y, w))


def layer_checks(seed: int = 0, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    rng = child_rng(seed, "eval", 11)
    u = lambda *s: rng.uniform(-1, 1, size=s)
    out = {}
    with precision("float64"):
        x = Tensor(u(4, 5), requires_grad=True)
        layer = Dense(5, 3, rng)
        w = u(4, 3)
        out["dense"] = grad_check(lambda: _weighted_sum(layer(x), w), [x, layer.weight, layer.bias],
                                  ["x", "weight", "bias"], tolerance=tolerance)

        x = Tensor(u(2, 2, 6, 6), requires_grad=True)
        conv = Conv2d(2, 3, rng)
        w = u(2, 3, 6, 6)
        out["conv2d"] = grad_check(lambda: _weighted_sum(conv(x), w), [x, conv.weight, conv.bias],
                                   ["x", "weight", "bias"], tolerance=tolerance)

        x = Tensor(u(2, 3, 4, 4), requires_grad=True)
        w = u(2, 3, 2, 2)
        out["mean_pool2d"] = grad_check(lambda: _weighted_sum(F.mean_pool2d(x), w), [x], ["x"], tolerance=tolerance)

        bn = BatchNorm(3)
        bn.gamma.data[:] = u(3)
        bn.beta.data[:] = u(3)
        x = Tensor(u(6, 3) * 2, requires_grad=True)
        w = u(6, 3)
        out["batchnorm"] = grad_check(lambda: _weighted_sum(bn(x), w), [x, bn.gamma, bn.beta],
                                      ["x", "gamma", "beta"], tolerance=tolerance)

        x = Tensor(u(3, 4) * 2, requires_grad=True)
        w = u(3, 4)
        out["tanh"] = grad_check(lambda: _weighted_sum(F.tanh(x), w), [x], ["x"], tolerance=tolerance)
        x = Tensor(u(3, 4) + 0.05, requires_grad=True)
        out["relu"] = grad_check(lambda: _weighted_sum(F.relu(x), w), [x], ["x"], tolerance=tolerance)

        z = Tensor(u(4, 6) * 3, requires_grad=True)
        labels = rng.integers(0, 6, size=4)
        out["softmax_cross_entropy"] = grad_check(lambda: F.softmax_cross_entropy(z, labels), [z], ["logits"],
                                                  tolerance=tolerance)
        a = Tensor(u(3, 4), requires_grad=True)
        b = Tensor(u(3, 4), requires_grad=True)
        out["mse"] = grad_check(lambda: F.mse(a, b), [a, b], ["a", "b"], tolerance=tolerance)

        fc = FeatComp(FeatCompConfig(5, (2, 2, 3)), rng)
        x = Tensor(u(4, 2, 2, 3), requires_grad=True)
        w = u(4, 2, 2, 3)
        out["featcomp_surrogate"] = grad_check(
            lambda: _weighted_sum(fc(x, binarizer="identity")[0], w),
            [x] + fc.parameters(), ["x"] + [n for n, _ in fc.named_parameters()], tolerance=tolerance)
    return out


def pipeline_check(seed: int = 0, tolerance: float = 1e-3, n_bits: int = 10,
                   max_elements: int = 24) -> GradCheckReport:
    """Extractor -> FeatComp -> answer head -> cross-entropy.

    The straight-through gradient of the sign binarizer is the gradient of
    the same network with the binarizer replaced by identity, so the
    backward pass with hard bits is compared against finite differences of
    that surrogate.
    """
    rng = child_rng(seed, "eval", 12)
    with precision("float64"):
        ext = FrameExtractor(rng)
        fc = FeatComp(FeatCompConfig(n_bits), rng)
        head = TaskPerformer(rng)
        video = Tensor(rng.uniform(0, 1, size=(3, 8, 16, 16)), requires_grad=True)
        q = question_onehot(np.array([0, 1, 1]))
        labels = np.array([1, 5, 7])
        params = ext.parameters() + fc.parameters() + head.parameters()
        for p in params:
            # zero-initialized biases put relu inputs exactly on the kink
            # wherever a unit's inputs are all dead; probe a generic point
            if not p.data.any():
                p.data[...] = rng.uniform(-0.1, 0.1, size=p.shape)
        names = (["video"] + [f"extractor.{n}" for n, _ in ext.named_parameters()]
                 + [f"featcomp.{n}" for n, _ in fc.named_parameters()]
                 + [f"head.{n}" for n, _ in head.named_parameters()])

        def loss(binarizer):
            x_dec, _ = fc(ext(video), binarizer=binarizer)
            return F.softmax_cross_entropy(head(x_dec, q), labels)

        tensors = [video] + params
        report = grad_check(lambda: loss("identity"), tensors, names, tolerance=tolerance,
                            max_elements=max_elements, seed=seed, kink_guard=True)
        # with hard bits the backward pass must treat the binarizer as identity:
        # the gradient reaching the tanh output equals the gradient at x_bin
        h = fc.activate(fc.encode(ext(video)))
        b, _ = fc.binarize(h, "sign", None)
        F.softmax_cross_entropy(head(fc.decode(b), q), labels).backward()
        mirror = Tensor(to_signs(fc.compress(ext(video).data)), requires_grad=True)
        F.softmax_cross_entropy(head(fc.decode(mirror), q), labels).backward()
        err = relative_error(h.grad, mirror.grad).max()
        report.max_rel_error["straight_through"] = float(err)
        if err > 1e-12:
            report.failures.append(f"straight_through: gradient at tanh output differs from gradient at bits ({err:.3e})")
    return report


def run_all(seed: int = 0, tolerance: float = 1e-4, pipeline_tolerance: float = 1e-3) -> dict[str, GradCheckReport]:
    reports = layer_checks(seed, tolerance)
    reports["pipeline"] = pipeline_check(seed, pipeline_tolerance)
    return reports

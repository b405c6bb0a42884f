"""Gradient-check suite covering every differentiable operation, including
the two-view hypergraph integration path. Used by the gradcheck CLI command
and the acceptance tests."""

from __future__ import annotations

import numpy as np

from mscada import hypergraph
from mscada.pseudo import identity_transform
from mscada.tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    gradient_check,
    masked_weighted_cross_entropy,
    matmul,
    mul,
    reduce_max_with_index,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    slice_,
    softmax,
    transpose,
)


def _check_matmul(r):
    a = r.standard_normal((4, 5))
    b = r.standard_normal((5, 3))
    return gradient_check(lambda t: reduce_sum(matmul(t, Tensor(b))), Tensor(a))


def _check_conv2d(r):
    x = r.standard_normal((2, 3, 5, 5))
    w = r.standard_normal((2, 3, 3, 3)) * 0.5
    bias = r.standard_normal(2)
    err_x = gradient_check(
        lambda t: reduce_mean(mul(conv2d(t, Tensor(w), Tensor(bias)), 0.3)), Tensor(x))
    err_w = gradient_check(
        lambda t: reduce_mean(mul(conv2d(Tensor(x), t, Tensor(bias)), 0.3)), Tensor(w))
    return max(err_x, err_w)


def _check_softmax(r):
    x = r.standard_normal((3, 6))
    coef = r.standard_normal((3, 6))
    return gradient_check(
        lambda t: reduce_sum(mul(softmax(t, axis=1), Tensor(coef))), Tensor(x))


def _check_cross_entropy(r):
    labels = r.integers(0, 4, size=(2, 4, 4))
    labels[0, 0, 0] = 255
    weights = r.uniform(0.1, 1.0, size=(2, 4, 4))
    x = r.standard_normal((2, 4, 4, 4))
    return gradient_check(
        lambda t: masked_weighted_cross_entropy(t, labels, weights), Tensor(x))


def _check_elementwise_chain(r):
    x = r.standard_normal((2, 3, 4))
    other = r.standard_normal((2, 3, 4))
    coef = r.standard_normal((3, 8))

    def f(t):
        h = relu(add(mul(t, Tensor(other)), 0.2))
        h = concat([h, mul(h, -0.5)], axis=2)
        h = transpose(h, (1, 0, 2))
        h = reshape(h, (3, 8))
        mx, _ = reduce_max_with_index(h, axis=1)
        return add(reduce_mean(mul(h, Tensor(coef))), mul(reduce_sum(mx), 0.1))

    return gradient_check(f, Tensor(x))


def _check_slice(r):
    x = r.standard_normal((3, 5, 5))
    return gradient_check(
        lambda t: reduce_sum(mul(slice_(t, (slice(1, 3), slice(None), slice(0, 4))), 0.7)),
        Tensor(x))


def _check_two_view_head(r):
    head = hypergraph.init_integration_head(r, num_sources=2, n_f=3, height=4, width=4,
                                            out_classes=4, k_spatial=5, k_feature=2)
    maps = [r.standard_normal((1, 3, 4, 4)) for _ in range(3)]
    pseudo_labels = r.integers(0, 4, size=(1, 4, 4))
    gate = np.ones((1, 4, 4))
    transforms = [identity_transform(4, 4)]

    def loss_of_feature_map(t):
        logits = hypergraph.integrate(head, [t, Tensor(maps[1]), Tensor(maps[2])])
        return hypergraph.multi_domain_loss(logits, pseudo_labels, gate, transforms)

    err_x = gradient_check(loss_of_feature_map, Tensor(maps[0]))

    theta = head.spatial_layers[0].theta

    def loss_of_theta(t):
        head.spatial_layers[0].theta = t
        logits = hypergraph.integrate(head, [Tensor(m) for m in maps])
        return hypergraph.multi_domain_loss(logits, pseudo_labels, gate, transforms)

    err_t = gradient_check(loss_of_theta, Tensor(theta.data))
    head.spatial_layers[0].theta = theta
    return max(err_x, err_t)


CHECKS = (
    ("matmul", _check_matmul, 1e-6),
    ("conv2d", _check_conv2d, 1e-5),
    ("softmax", _check_softmax, 1e-6),
    ("cross_entropy", _check_cross_entropy, 1e-6),
    ("elementwise_chain", _check_elementwise_chain, 1e-4),
    ("slice", _check_slice, 1e-8),
    ("two_view_head", _check_two_view_head, 1e-4),
)


def gradient_suite(num_seeds: int = 20) -> list[tuple[str, float, float]]:
    """(name, max error across seeds, threshold) for every check."""
    results = []
    for name, fn, threshold in CHECKS:
        worst = 0.0
        for seed in range(num_seeds):
            worst = max(worst, fn(np.random.default_rng(10_000 + seed)))
        results.append((name, worst, threshold))
    return results

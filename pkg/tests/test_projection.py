"""Projection: nearest-patch snapping, diversity, greedy behavior, idempotence."""

import itertools
import math

import numpy as np
import pytest

from protopart import model as M
from protopart.errors import ConfigurationError
from protopart.projection import project_prototypes


def exhaustive_single(protos, latents):
    """Nearest patch over all images/patches, ignoring diversity (m_k = 1 case)."""
    out = []
    for p in protos:
        best = None
        for i in range(latents.shape[0]):
            for r in range(latents.shape[1]):
                for c in range(latents.shape[2]):
                    d = math.sqrt(((latents[i, r, c] - p) ** 2).sum())
                    if best is None or d < best[0]:
                        best = (d, i, r, c)
        out.append(best)
    return out


def test_single_prototype_per_class_plain_nearest(rng):
    latents = rng.normal(size=(6, 3, 3, 4))
    labels = np.array([0, 0, 0, 1, 1, 1])
    ids = [f"img_{i}" for i in range(6)]
    protos = rng.normal(size=(2, 4))
    proto_classes = np.array([0, 1])
    new, result = project_prototypes(protos, proto_classes, latents, labels, ids)
    for j, cls in enumerate(proto_classes):
        sub = np.flatnonzero(labels == cls)
        best = exhaustive_single(protos[j:j + 1], latents[sub])[0]
        a = result.assignments[j]
        assert a.image == ids[sub[best[1]]]
        assert (a.row, a.col) == (best[2], best[3])
        np.testing.assert_array_equal(new[j], latents[sub[best[1]], best[2], best[3]])


def test_projected_prototypes_bitwise_equal_patches(rng):
    latents = rng.normal(size=(8, 2, 2, 3))
    labels = np.array([0] * 4 + [1] * 4)
    ids = [f"i{i}" for i in range(8)]
    protos = rng.normal(size=(4, 3))
    proto_classes = np.array([0, 0, 1, 1])
    new, result = project_prototypes(protos, proto_classes, latents, labels, ids)
    lookup = {ids[i]: i for i in range(8)}
    for j, a in enumerate(result.assignments):
        patch = latents[lookup[a.image], a.row, a.col]
        assert new[j].tobytes() == patch.tobytes()
        assert a.distance >= 0.0


def test_per_class_source_images_distinct(rng):
    latents = rng.normal(size=(20, 3, 3, 5))
    labels = np.array([0] * 10 + [1] * 10)
    ids = [f"im{i:02d}" for i in range(20)]
    protos = rng.normal(size=(18, 5))
    proto_classes = np.repeat([0, 1], 9)
    _, result = project_prototypes(protos, proto_classes, latents, labels, ids)
    assert result.diversity_ok
    for cls in (0, 1):
        imgs = {a.image for a in result.assignments if proto_classes[a.proto_id] == cls}
        assert len(imgs) == 9


def test_insufficient_images_names_class(rng):
    latents = rng.normal(size=(3, 2, 2, 3))
    labels = np.array([0, 0, 1])
    protos = rng.normal(size=(4, 3))
    proto_classes = np.array([0, 0, 1, 1])
    with pytest.raises(ConfigurationError, match="class 1"):
        project_prototypes(protos, proto_classes, latents, labels, ["a", "b", "c"])


def test_greedy_documented_outcome_vs_exhaustive_oracle():
    # Two prototypes, two single-patch images. Greedy lets the nearer-first
    # prototype win image A even though the assignment-optimal solution differs.
    latents = np.zeros((2, 1, 1, 1))
    latents[0, 0, 0, 0] = 0.0   # image A
    latents[1, 0, 0, 0] = 2.2   # image B
    protos = np.array([[1.0], [-1.1]])   # p0: dA=1.0 dB=1.2; p1: dA=1.1 dB=3.3
    proto_classes = np.array([0, 0])
    labels = np.array([0, 0])
    ids = ["A", "B"]
    new, result = project_prototypes(protos, proto_classes, latents, labels, ids)
    assert result.assignments[0].image == "A"   # nearer-first prototype wins its image
    assert result.assignments[1].image == "B"
    greedy_total = sum(a.distance for a in result.assignments)

    # exhaustive assignment oracle over all image permutations
    dmat = np.abs(protos[:, 0][:, None] - latents[:, 0, 0, 0][None, :])
    optimal = min(sum(dmat[j, perm[j]] for j in range(2))
                  for perm in itertools.permutations(range(2)))
    assert optimal == pytest.approx(2.3, abs=1e-12)
    assert greedy_total > optimal   # the crafted instance separates the two


def test_projection_idempotent(rng):
    latents = rng.normal(size=(8, 3, 3, 4))
    labels = np.array([0] * 4 + [1] * 4)
    ids = [f"q{i}" for i in range(8)]
    protos = rng.normal(size=(4, 4))
    proto_classes = np.array([0, 0, 1, 1])
    once, r1 = project_prototypes(protos, proto_classes, latents, labels, ids)
    twice, r2 = project_prototypes(once, proto_classes, latents, labels, ids)
    np.testing.assert_array_equal(once, twice)
    for a, b in zip(r1.assignments, r2.assignments):
        assert (a.image, a.row, a.col) == (b.image, b.row, b.col)
        assert b.distance == 0.0


def test_post_projection_similarity_hits_ceiling(rng):
    latents = rng.normal(size=(4, 2, 2, 3))
    labels = np.array([0, 0, 1, 1])
    ids = list("abcd")
    protos = rng.normal(size=(2, 3))
    proto_classes = np.array([0, 1])
    new, result = project_prototypes(protos, proto_classes, latents, labels, ids)
    lookup = {i: k for k, i in enumerate(ids)}
    for j, a in enumerate(result.assignments):
        smap = M.similarity_map(latents[lookup[a.image]], new[j], epsilon=1e-4)
        assert smap[a.row, a.col] == pytest.approx(math.log(1e4), abs=1e-9)
        assert M.topk_pool(smap, 1) == pytest.approx(math.log(1e4), abs=1e-9)

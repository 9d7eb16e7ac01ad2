"""Toy-face corpus: determinism, validity, and identity separability."""

import numpy as np
import pytest

from purifybench.dataset import (
    IdentitySplit,
    generate_toy_dataset,
    render_face,
    split_identity,
    _identity_params,
)


def test_generate_shapes_and_range():
    ds = generate_toy_dataset(4, 3, seed=0, size=16)
    assert len(ds) == 12
    assert ds.n_identities == 4
    for img in ds.images:
        assert img.shape == (16, 16, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert np.isfinite(img).all()


def test_generate_is_deterministic():
    a = generate_toy_dataset(4, 2, seed=123)
    b = generate_toy_dataset(4, 2, seed=123)
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)
    assert a.identity_ids == b.identity_ids


def test_different_seeds_differ():
    a = generate_toy_dataset(4, 1, seed=1)
    b = generate_toy_dataset(4, 1, seed=2)
    assert any(not np.array_equal(x, y) for x, y in zip(a.images, b.images))


def test_instances_within_identity_differ():
    ds = generate_toy_dataset(4, 2, seed=5)
    by = ds.by_identity()
    for imgs in by.values():
        assert not np.array_equal(imgs[0], imgs[1])


@pytest.mark.parametrize("seed", [0, 7, 42])
def test_within_identity_mse_below_cross_identity(seed):
    ds = generate_toy_dataset(5, 6, seed=seed)
    by = ds.by_identity()
    idents = sorted(by)
    within, cross = [], []
    for i in idents:
        a = np.stack(by[i])
        for j in idents:
            if j < i:
                continue
            b = np.stack(by[j])
            mse = ((a[:, None] - b[None]) ** 2).mean(axis=(2, 3, 4))
            if i == j:
                iu = np.triu_indices(len(a), k=1)
                within.append(mse[iu].mean())
            else:
                cross.append(mse.mean())
    assert np.mean(within) < np.mean(cross)


def test_rejects_too_few_identities():
    with pytest.raises(ValueError):
        generate_toy_dataset(3, 5, seed=0)


def test_rejects_zero_images():
    with pytest.raises(ValueError):
        generate_toy_dataset(4, 0, seed=0)


def test_render_without_jitter_is_pure():
    params = _identity_params(9, 2)
    a = render_face(params, 32)
    b = render_face(params, 32)
    np.testing.assert_array_equal(a, b)


def test_split_identity_sizes_and_disjointness():
    ds = generate_toy_dataset(4, 17, seed=3)
    sp = split_identity(ds, identity=1, set_size=5)
    assert isinstance(sp, IdentitySplit)
    assert len(sp.reference) == 5
    assert len(sp.instance) == 5
    assert len(sp.holdout) == 5
    assert len(sp.rest) == 2
    groups = [sp.reference, sp.instance, sp.holdout, sp.rest]
    flat = [img.tobytes() for g in groups for img in g]
    assert len(set(flat)) == len(flat)  # no image appears twice


def test_split_identity_errors():
    ds = generate_toy_dataset(4, 10, seed=3)
    with pytest.raises(ValueError):
        split_identity(ds, identity=99)
    with pytest.raises(ValueError):
        split_identity(ds, identity=0, set_size=5)  # 10 < 15


def test_by_identity_grouping():
    ds = generate_toy_dataset(4, 3, seed=0)
    by = ds.by_identity()
    assert sorted(by) == [0, 1, 2, 3]
    assert all(len(v) == 3 for v in by.values())

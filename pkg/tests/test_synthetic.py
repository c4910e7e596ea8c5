import numpy as np
import pytest

from refseg.config import SyntheticSpec
from refseg.errors import ConfigError, GenerationError
from refseg.synthetic import generate_synthetic, orthonormal_prototypes


def small_spec(**changes):
    base = SyntheticSpec(grid_h=12, grid_w=12, feature_dim=16, num_items=40, min_side=2, max_side=5, patch_px=4)
    for k, v in changes.items():
        setattr(base, k, v)
    return base


def test_same_seed_is_byte_identical():
    a = generate_synthetic(small_spec(seed=3)).tobytes()
    b = generate_synthetic(small_spec(seed=3)).tobytes()
    c = generate_synthetic(small_spec(seed=4)).tobytes()
    assert a == b and a != c


def test_degenerate_full_grid_scene():
    # noise-free, one instance that must cover the whole 4x4 grid
    spec = small_spec(grid_h=4, grid_w=4, min_side=4, max_side=4, max_instances=1, noise_std=0.0, num_items=2)
    data = generate_synthetic(spec)
    assert data.labels.all()
    for i in range(2):
        np.testing.assert_array_equal(data.visual[i], np.broadcast_to(data.textual[i], (16, 16)))
        assert data.gt_mask(i).shape == (16, 16) and data.gt_mask(i).all()


def test_nearest_prototype_recovers_planted_regions():
    spec = SyntheticSpec(num_items=60, seed=1)  # default grid, width, groups and noise
    data = generate_synthetic(spec)
    g = spec.num_groups
    truth = np.full(data.labels.shape, g)  # background index
    for i in range(len(data)):
        for inst, group in enumerate(data.instance_groups[i]):
            truth[i][data.labels[i] == inst + 1] = group
    scores = data.visual @ data.prototypes.T  # (M, N, G + 1)
    predicted = scores.argmax(axis=-1).reshape(truth.shape)
    assert (predicted == truth).mean() > 0.99


def test_invariants_of_generated_items():
    data = generate_synthetic(small_spec(referent_arity=2, max_instances=4, seed=2))
    for i in range(len(data)):
        count = len(data.instance_groups[i])
        assert 2 <= count <= 4
        assert len(data.referred[i]) == 2
        assert set(np.unique(data.labels[i])) <= set(range(count + 1))
        assert all((data.labels[i] == k + 1).any() for k in range(count))
        assert data.gt_patch_masks[i].any()
        px = data.spec.patch_px
        np.testing.assert_array_equal(data.gt_mask(i)[::px, ::px], data.gt_patch_masks[i])


def test_prototypes_are_orthonormal():
    p = orthonormal_prototypes(7, 16, np.random.default_rng(0))
    np.testing.assert_allclose(p @ p.T, np.eye(7), atol=1e-12)


def test_split_is_deterministic_80_20():
    data = generate_synthetic(small_spec(num_items=50))
    tr, ev = data.split(0.8, 5)
    tr2, _ = data.split(0.8, 5)
    assert (len(tr), len(ev)) == (40, 10)
    assert tr.tobytes() == tr2.tobytes()
    assert not np.shares_memory(tr.visual, data.visual)


def test_infeasible_placement_raises():
    with pytest.raises(GenerationError):
        generate_synthetic(small_spec(grid_h=4, grid_w=4, min_side=3, max_side=4, max_instances=4, referent_arity=4))


@pytest.mark.parametrize(
    "changes",
    [dict(num_groups=16), dict(num_groups=0), dict(max_instances=0), dict(referent_arity=5), dict(min_side=6, max_side=5),
     dict(num_items=0), dict(grid_h=0)],
)
def test_invalid_specs_rejected(changes):
    with pytest.raises(ConfigError):
        generate_synthetic(small_spec(**changes))

from __future__ import annotations

import math

import numpy as np
import pytest

from autoemb import autodiff as ad
from autoemb.embedding import EmbeddingBank
from autoemb.errors import ContractError, EmbeddingLookupError, SnapshotError


@pytest.fixture
def bank():
    return EmbeddingBank(10, [2, 16, 128], np.random.default_rng(0))


def test_lookup_shape(bank):
    assert bank.lookup([0], 1).shape == (1, 2)
    assert bank.lookup([0, 3], 3).shape == (2, 128)


def test_layout(bank):
    assert bank.table.shape == (10, 146)
    assert list(bank.offsets) == [0, 2, 18, 146]
    assert all(w.shape == (d, 128) and b.shape == (128,) for (w, b), d in zip(bank.transforms, [2, 16, 128]))
    assert np.shares_memory(bank.space_view(1), bank.table.data)


def test_same_id_twice(bank):
    e = bank.lookup([4, 4], 2).data
    assert np.array_equal(e[0], e[1])


def test_lookup_errors(bank):
    with pytest.raises(EmbeddingLookupError, match="10"):
        bank.lookup([10], 1)
    with pytest.raises(EmbeddingLookupError):
        bank.lookup([-1], 1)
    with pytest.raises(ContractError):
        bank.lookup([0], 4)


@pytest.mark.parametrize("dims", [[4, 2], [2, 2], [], [0, 3]])
def test_invalid_dims(dims):
    with pytest.raises(ContractError):
        EmbeddingBank(3, dims)


def test_gradient_only_on_gathered_rows(bank):
    rng = np.random.default_rng(1)
    ids = np.array([2, 7, 2, 5])
    coef = rng.normal(size=(4, 2))
    ad.tsum(ad.mul(bank.lookup(ids, 1), ad.Tensor(coef))).backward()
    # dense oracle: rows = onehot @ table, so dtable = onehot^T @ coef on the first two columns
    onehot = np.eye(10)[ids]
    expected = np.zeros_like(bank.table.data)
    expected[:, :2] = onehot.T @ coef
    assert np.allclose(bank.table.grad, expected, atol=1e-15)
    untouched = np.setdiff1d(np.arange(10), ids)
    assert not bank.table.grad[untouched].any()


def test_zero_cascade(bank):
    for w, b in bank.transforms:
        w.data[...] = 0.0
        b.data[...] = 0.0
    for mode in ("train", "infer"):
        for c in bank.forward([0, 1, 2], mode).candidates:
            assert np.array_equal(c.data, np.zeros((3, 128)))


def test_constant_rows_train_mode(bank):
    bank.table.data[[3, 4]] = bank.table.data[1]
    # zero up to the rounding of a 3-element mean
    for c in bank.forward([1, 3, 4], "train").candidates:
        assert np.allclose(c.data, 0.0, rtol=0, atol=1e-12)


def test_batch_of_one_is_zero_in_train_mode(bank):
    assert all(not c.data.any() for c in bank.forward([5], "train").candidates)


def test_hand_computed_unify():
    bank = EmbeddingBank(2, [1, 2], np.random.default_rng(0), bn_eps=1e-5)
    bank.table.data[:, 0] = [0.5, -1.5]
    w, b = bank.transforms[0]
    w.data[...] = [[2.0, -1.0]]
    b.data[...] = [0.1, 0.3]
    out = bank.forward([0, 1], "train").candidates[0].data
    for j, (wj, bj) in enumerate([(2.0, 0.1), (-1.0, 0.3)]):
        z = [0.5 * wj + bj, -1.5 * wj + bj]
        mu = (z[0] + z[1]) / 2
        var = ((z[0] - mu) ** 2 + (z[1] - mu) ** 2) / 2
        for r in range(2):
            assert abs(out[r, j] - math.tanh((z[r] - mu) / math.sqrt(var + 1e-5))) < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_pre_tanh_statistics_normalised(seed):
    rng = np.random.default_rng(seed)
    bank = EmbeddingBank(40, [3, 6], rng, init_scale=30.0)
    ids = rng.choice(40, size=16, replace=False)
    w, b = bank.transforms[1]
    z = ad.linear(bank.lookup(ids, 2), w, b)
    zn = ad.batchnorm(z, bank.bn_eps).data
    assert np.all(np.abs(zn.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(zn.var(axis=0) - 1) < 1e-6)


def test_outputs_in_open_interval(bank):
    bank.table.data[...] = np.random.default_rng(2).normal(0, 50, bank.table.shape)
    for c in bank.forward(np.arange(10)).candidates:
        assert c.shape == (10, 128)
        assert np.all(np.abs(c.data) < 1)


def test_running_statistics():
    bank = EmbeddingBank(6, [1, 2], np.random.default_rng(3), bn_momentum=0.1)
    ids = np.arange(6)
    z = bank.table.data[:, :1] @ bank.transforms[0][0].data + bank.transforms[0][1].data
    bank.forward(ids, "train", update_stats=True)
    assert np.allclose(bank.running_mean[0], 0.1 * z.mean(0))
    assert np.allclose(bank.running_var[0], 0.9 + 0.1 * z.var(0))
    before = [m.copy() for m in bank.running_mean]
    bank.forward(ids, "train", update_stats=False)
    bank.forward(ids, "infer")
    assert all(np.array_equal(a, b) for a, b in zip(before, bank.running_mean))


def test_snapshot_roundtrip(bank):
    bank.forward(np.arange(10), update_stats=True)
    blob = bank.to_bytes()
    other = EmbeddingBank.from_bytes(blob)
    assert other.dims == bank.dims and other.entity_count == 10
    assert other.to_bytes() == blob
    ids = [1, 4, 9]
    for a, b in zip(bank.forward(ids, "infer").candidates, other.forward(ids, "infer").candidates):
        assert np.array_equal(a.data, b.data)


def test_snapshot_rejects_garbage(bank):
    with pytest.raises(SnapshotError):
        EmbeddingBank.from_bytes(b"nope" + bank.to_bytes()[4:])
    with pytest.raises(SnapshotError):
        EmbeddingBank.from_bytes(bank.to_bytes() + b"\0")

#!/usr/bin/env python3
"""
Test the Neural Bloom Filter: addressing, additive writes, reads,
moving ZCA sphering, seeded address matrices and memory accounting
"""
import logging
import sys
from dataclasses import replace

import numpy as np
import pytest

from core.gradcheck import param_gradient_errors
from core.params import CheckpointError
from core.tensor import Tape, add, backward, bce_loss, outer_product
from models.address import (
    AddressMatrix, matrix_from_seeds, regenerate_address_rows, seeds_from_bytes, seeds_to_bytes,
    slot_histogram, slot_histogram_pvalue
)
from models.baselines import LSTMConfig, LstmFamiliarityModel
from models.encoders import EncoderConfig
from models.nbf import MemoryState, NBFConfig, NeuralBloomFilter, memory_utilization
from models.zca import SpheringError, ZCAState, zca_matrix, zca_update

# Configure logging for tests
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

INPUT_DIM = 3


def small_config(**overrides) -> NBFConfig:
    base = NBFConfig(slots=4, word_size=2, query_dim=4, hidden=8, output_depth=2,
                     encoder=EncoderConfig(kind='mlp', output_dim=4, hidden=8, input_dim=INPUT_DIM))
    return replace(base, **overrides)


def small_model(**overrides):
    model = NeuralBloomFilter(small_config(**overrides))
    return model, model.init_params(np.random.default_rng(0))


def items(count: int, seed: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(count, INPUT_DIM))


def test_config_validation():
    with pytest.raises(ValueError, match='k_addr'):
        NBFConfig(slots=64, k_addr=1000)
    with pytest.raises(ValueError, match='address_mode'):
        NBFConfig(address_mode='random')
    assert not NBFConfig().sparse
    assert NBFConfig(k_addr=2).sparse


def test_address_concentrates_on_matching_column():
    print("\n🎯 Testing addressing...")
    model, store = small_model()
    store = store.replace({'address': np.eye(4)})
    tape = Tape()
    for slot in range(4):
        q = tape.constant(10.0 * np.eye(4)[slot:slot + 1])
        a = model.address(tape, store, q).value
        assert int(np.argmax(a)) == slot
        assert a[0, slot] > 0.99
    print("  ✅ q = 10 · A[:, j] addresses slot j")


def test_full_width_top_k_matches_dense():
    dense, store = small_model()
    sparse = NeuralBloomFilter(small_config(k_addr=4))
    stored, queries = items(5), items(7, seed=2)
    dense_logits = dense.query(store, dense.write_state(store, stored), queries)
    sparse_logits = sparse.query(store, sparse.write_state(store, stored), queries)
    np.testing.assert_allclose(dense_logits, sparse_logits, rtol=1e-12, atol=1e-12)


def test_sparse_write_touches_k_slots():
    model, store = small_model(k_addr=1)
    a = model.addresses(store, items(6))
    assert np.all(np.count_nonzero(a, axis=1) == 1)
    np.testing.assert_allclose(a.sum(axis=1), 1.0)


def test_sphering_disabled_passes_query_through():
    model, store = small_model()
    out = model.controller(Tape(), store, items(3))
    assert out.q is out.raw_query

    sphered, sphered_store = small_model(sphering=True)
    out = sphered.controller(Tape(), sphered_store, items(3))
    np.testing.assert_allclose(out.q.value, out.raw_query.value)


def test_memory_write_is_outer_product():
    memory = MemoryState.zeros(2, 2).add(np.array([1.0, 0.0]), np.array([0.5, -0.5]))
    np.testing.assert_array_equal(memory.matrix, [[0.5, -0.5], [0.0, 0.0]])
    assert memory.writes == 1


def test_write_is_order_invariant():
    print("\n🔀 Testing additive writes...")
    model, store = small_model()
    stored, queries = items(12), items(6, seed=4)
    batched = model.write_state(store, stored)
    logits = model.query(store, batched, queries)
    rng = np.random.default_rng(13)
    for _ in range(10):
        permuted = model.write_state(store, stored[rng.permutation(len(stored))])
        np.testing.assert_allclose(permuted, batched, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(model.query(store, permuted, queries), logits, rtol=1e-10, atol=1e-12)

    memory = MemoryState.zeros(4, 2)
    for row in stored:
        memory = model.write(memory, row[None, :], store)
    np.testing.assert_allclose(memory.matrix, batched, rtol=1e-12, atol=1e-12)
    assert memory.writes == 12
    print("  ✅ one-shot, 10 permuted and incremental writes agree")


def test_write_word_gradient_is_memory_gradient_times_address():
    """For M = sum_i a_i w_i^T: dL/dw_i = (dL/dM)^T a_i and dL/da_i = (dL/dM) w_i"""
    model, store = small_model()
    stored, queries = items(5), items(4, seed=7)
    labels = np.array([1.0, 0.0, 0.0, 1.0])

    tape = Tape()
    out = model.controller(tape, store, stored)
    memory = outer_product(out.a, out.w)
    logits, _ = model.read_graph(tape, store, memory, queries)
    grads = backward(tape, bce_loss(logits, tape.constant(labels)))
    memory_grad = grads[memory]
    assert np.any(memory_grad != 0.0)
    np.testing.assert_allclose(grads[out.w], out.a.value @ memory_grad, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(grads[out.a], out.w.value @ memory_grad.T, rtol=1e-10, atol=1e-14)


def test_one_hot_read_selects_a_row():
    model, _ = small_model()
    tape = Tape()
    matrix = np.arange(8, dtype=float).reshape(4, 2)
    a = np.zeros((1, 4))
    a[0, 2] = 1.0
    r = model.read_words(tape.constant(matrix), tape.constant(a)).value.reshape(4, 2)
    np.testing.assert_array_equal(r[2], matrix[2])
    assert np.count_nonzero(r[[0, 1, 3]]) == 0


def test_empty_memory_reads_zero():
    model, store = small_model()
    queries = items(4, seed=3)
    tape = Tape()
    logits, aux = model.read_graph(tape, store, tape.constant(np.zeros((4, 2))), queries)
    assert np.count_nonzero(aux['read_words'].value) == 0
    assert logits.shape == (4,)


def test_read_ablations():
    linear = NeuralBloomFilter(small_config(linear_read=True))
    assert linear.read_dim == 2
    store = linear.init_params(np.random.default_rng(0))
    logits = linear.query(store, linear.write_state(store, items(5)), items(3))
    assert logits.shape == (3,)

    constant = NeuralBloomFilter(small_config(constant_write=True))
    store = constant.init_params(np.random.default_rng(0))
    assert not any(name.startswith('write.') for name in store)
    out = constant.controller(Tape(), store, items(2))
    np.testing.assert_array_equal(out.w.value, np.ones((2, 2)))


def test_forward_is_deterministic():
    model, store = small_model()
    state = model.write_state(store, items(6))
    first = model.query(store, state, items(4, seed=9))
    second = model.query(store, model.write_state(store, items(6)), items(4, seed=9))
    np.testing.assert_array_equal(first, second)


def test_episode_gradients_match_finite_differences():
    print("\n📐 Testing NBF gradients...")
    model, store = small_model()
    stored, queries = items(4), items(4, seed=5)
    labels = np.array([1.0, 0.0, 1.0, 0.0])

    def loss_fn(tape, trial_store):
        logits, _ = model.episode_logits(tape, trial_store, stored, queries)
        return bce_loss(logits, tape.constant(labels))

    errors = param_gradient_errors(loss_fn, store, max_coords=4)
    worst = max(errors, key=errors.get)
    logger.info(f"Largest gradient error {errors[worst]:.2e} ({worst})")
    assert errors[worst] < 1e-4


def test_batched_write_gradient_equals_per_item_sum():
    model, store = small_model()
    stored, queries = items(5), items(3, seed=6)
    labels = np.array([1.0, 0.0, 1.0])

    tape = Tape()
    logits, _ = model.episode_logits(tape, store, stored, queries)
    batched = backward(tape, bce_loss(logits, tape.constant(labels))).by_name()

    tape = Tape()
    memory = None
    for row in stored:
        out = model.controller(tape, store, row[None, :])
        term = outer_product(out.a, out.w)
        memory = term if memory is None else add(memory, term)
    logits, _ = model.read_graph(tape, store, memory, queries)
    summed = backward(tape, bce_loss(logits, tape.constant(labels))).by_name()

    assert set(batched) == set(summed)
    for name in batched:
        np.testing.assert_allclose(batched[name], summed[name], rtol=1e-6, atol=1e-12)


def test_zca_scalar_case():
    W = zca_matrix(np.zeros(1), np.array([[4.0]]))
    assert W[0, 0] == pytest.approx(0.5, rel=1e-5)


def test_zca_converges_to_identity():
    print("\n⚪ Testing moving ZCA...")
    rng = np.random.default_rng(7)
    state = replace(ZCAState.identity(4, gamma=0.99, eta=0.99, period=10), projection=3.0 * np.eye(4))
    for _ in range(100):
        state = zca_update(state, rng.standard_normal((100, 4)))
    error = np.linalg.norm(state.projection - np.eye(4))
    logger.info(f"ZCA projection distance from identity: {error:.4f}")
    assert error < 0.1
    assert state.step == 100
    print(f"  ✅ ||θ - I||_F = {error:.4f}")


def test_zca_frozen_outside_training():
    state = ZCAState.identity(3, period=1)
    batch = np.random.default_rng(8).normal(size=(10, 3)) * 5.0
    assert zca_update(state, batch, training=False) is state

    model, store = small_model(sphering=True, period=1)
    tape = Tape()
    _, aux = model.episode_logits(tape, store, items(4), items(4, seed=2))
    assert model.after_step(store, [aux], training=False) is store
    updated = model.after_step(store, [aux], training=True)
    assert updated['zca.step'][0] == 1.0
    assert not np.array_equal(updated['zca.projection'], store['zca.projection'])


def test_zca_rejects_non_finite_moments():
    state = ZCAState.identity(2)
    with pytest.raises(SpheringError):
        zca_update(state, np.array([[1e200, 1e200]]))
    with pytest.raises(ValueError):
        zca_update(state, np.ones((3, 5)))


def test_seeded_address_rows():
    first = regenerate_address_rows(1234, 8)
    assert first.shape == (16, 8)
    np.testing.assert_array_equal(first, regenerate_address_rows(1234, 8))
    assert not np.array_equal(first, regenerate_address_rows(1235, 8))
    with pytest.raises(ValueError):
        regenerate_address_rows(1 << 16, 8)

    seeds = np.array([3, 99, 65535], dtype=np.uint16)
    np.testing.assert_array_equal(seeds_from_bytes(seeds_to_bytes(seeds)), seeds)
    matrix = matrix_from_seeds(seeds, 8, 40)
    assert matrix.shape == (8, 40)
    np.testing.assert_array_equal(matrix[:, 16:32], regenerate_address_rows(99, 8).T)


def test_fixed_address_modes_are_frozen():
    for mode in ('gaussian_fixed', 'seeded'):
        model, store = small_model(address_mode=mode)
        assert not store.is_trainable('address')
    model, store = small_model()
    assert store.is_trainable('address')
    assert np.std(store['address']) == pytest.approx(0.5, rel=0.5)


def test_seeded_checkpoint_is_validated(tmp_path):
    model, store = small_model(address_mode='seeded')
    path = store.save(tmp_path / 'seeded.nbf1')
    loaded = model.load_params(path)
    np.testing.assert_array_equal(loaded['address'], store['address'])

    tampered = store.replace({'address': np.zeros_like(store['address'])})
    with pytest.raises(CheckpointError, match='seeds'):
        model.validate_store(tampered)
    rebuilt = AddressMatrix.from_store(store, 'seeded')
    assert rebuilt.seeds is not None


def test_checkpoint_layout_mismatch(tmp_path):
    lstm = LstmFamiliarityModel(LSTMConfig(hidden=4, query_hidden=8,
                                           encoder=EncoderConfig(output_dim=4, hidden=8, input_dim=INPUT_DIM)))
    path = lstm.init_params(np.random.default_rng(0)).save(tmp_path / 'lstm.nbf1')
    model, _ = small_model()
    with pytest.raises(CheckpointError, match='does not fit'):
        model.load_params(path)


def test_uniform_hashing_of_sphered_queries():
    """Queries sphered by the moving ZCA spread evenly over the slots of a Gaussian address matrix"""
    print("\n🎲 Testing slot histogram uniformity...")
    rng = np.random.default_rng(11)
    dim, slots, samples = 256, 8, 800
    mixing = rng.normal(size=(dim, dim)) / np.sqrt(dim) + np.eye(dim)
    state = ZCAState.identity(dim, gamma=0.99, eta=0.99, period=10)
    for _ in range(500):
        state = zca_update(state, rng.standard_normal((64, dim)) @ mixing)
    assert state.step == 500

    model, store = small_model(sphering=True, query_dim=dim, period=10)
    store = store.replace(state.arrays())
    assert model.zca_state(store).step == 500
    raw = rng.standard_normal((samples, dim)) @ mixing
    sphered = model.zca_state(store).project(raw)
    covariance = sphered.T @ sphered / samples
    assert np.mean(np.abs(np.diag(covariance) - 1.0)) < 0.2

    matrix = AddressMatrix.build('gaussian_fixed', dim, slots, rng).matrix
    pvalue = slot_histogram_pvalue(sphered, matrix)
    logger.info(f"Slot histogram {slot_histogram(sphered, matrix)} p={pvalue:.4f}")
    assert slot_histogram(sphered, matrix).sum() == samples
    assert pvalue > 0.01
    print(f"  ✅ chi-square p-value {pvalue:.4f}")


def test_memory_utilization():
    assert memory_utilization(np.zeros((0, 4))) == 0.0
    assert memory_utilization(np.array([[0.0, 1.0, 0.0, 0.0]])) == pytest.approx(0.25)
    assert memory_utilization(np.full((3, 4), 0.25)) == 1.0


def test_memory_state_bytes():
    rng = np.random.default_rng(12)
    memory = MemoryState(rng.normal(size=(4, 3)), writes=7)
    restored = MemoryState.from_bytes(memory.to_bytes(precision=64))
    np.testing.assert_array_equal(restored.matrix, memory.matrix)
    assert restored.writes == 7
    half = MemoryState.from_bytes(memory.to_bytes(precision=16))
    np.testing.assert_allclose(half.matrix, memory.matrix, rtol=1e-2, atol=1e-2)
    with pytest.raises(CheckpointError):
        MemoryState.from_bytes(b'XXXX' + memory.to_bytes()[4:])
    with pytest.raises(CheckpointError, match='offset'):
        MemoryState.from_bytes(memory.to_bytes()[:-3])


def test_state_bits_follow_precision():
    model, store = small_model()
    state = model.write_state(store, items(5))
    assert model.state_bits(state, 32) == 4 * 2 * 32
    assert model.state_bits(state, 16) == 4 * 2 * 16
    with pytest.raises(ValueError):
        model.state_bits(state, 8)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))

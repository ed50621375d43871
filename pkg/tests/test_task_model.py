import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxmon.task_model import (
    BLOCK_TRANSFER,
    BLOCK_TRANSFER_ORDER,
    RUBRIC,
    SUTURING,
    GestureVocabulary,
    MarkovChain,
    MarkovError,
    block_transfer_chain,
    estimate_markov,
    sample_sequence,
    suturing_chain,
)


def test_identical_block_transfer_sequences_give_certain_transitions():
    chain = estimate_markov([list(BLOCK_TRANSFER_ORDER)] * 10, BLOCK_TRANSFER)
    for a, b in zip(BLOCK_TRANSFER_ORDER[:-1], BLOCK_TRANSFER_ORDER[1:]):
        assert chain.p(a, b) == 1.0
    np.testing.assert_array_equal(chain.transitions, block_transfer_chain().transitions)
    np.testing.assert_array_equal(chain.initial, block_transfer_chain().initial)


def test_counts_are_normalised_per_row():
    seqs = [[1, 2]] + [[1, 3]] * 3
    chain = estimate_markov(seqs)
    assert chain.p(1, 2) == 0.25 and chain.p(1, 3) == 0.75
    # states without successors absorb
    assert chain.is_terminal(2) and chain.is_terminal(3)


def test_empty_input_raises():
    with pytest.raises(MarkovError):
        estimate_markov([])
    with pytest.raises(MarkovError):
        estimate_markov([[]])
    with pytest.raises(MarkovError):
        estimate_markov([[1, 7]], BLOCK_TRANSFER)


def test_additive_smoothing():
    chain = estimate_markov([[1, 2]], GestureVocabulary((1, 2)), smoothing=1.0)
    np.testing.assert_allclose(chain.transitions, [[1 / 3, 2 / 3], [0.5, 0.5]])


def test_chain_validation():
    with pytest.raises(MarkovError):
        MarkovChain(GestureVocabulary((1, 2)), [1, 0], [[0.5, 0.4], [0, 1]])
    with pytest.raises(MarkovError):
        MarkovChain(GestureVocabulary((1, 2)), [1, 0], [[1.5, -0.5], [0, 1]])
    with pytest.raises(MarkovError):
        MarkovChain(GestureVocabulary((1,)), [1, 0], [[1]])


def test_block_transfer_sampling_is_fixed():
    chain = block_transfer_chain()
    for seed in range(20):
        assert sample_sequence(chain, seed) == [12, 2, 5, 6, 11]


def test_sampling_is_seeded():
    chain = suturing_chain()
    assert sample_sequence(chain, 5) == sample_sequence(chain, 5)
    assert len(sample_sequence(chain, 5, max_len=3)) <= 3


def test_suturing_g4_to_g10_frequency():
    chain = suturing_chain()
    rng = np.random.default_rng(0)
    i4 = SUTURING.index(4)
    draws = rng.choice(len(SUTURING), size=10_000, p=chain.transitions[i4])
    freq = np.mean(np.asarray(SUTURING.ids)[draws] == 10)
    assert abs(freq - 0.13) <= 0.02
    # and within sampled sequences
    n4 = n410 = 0
    for seed in range(3000):
        s = sample_sequence(chain, seed)
        for a, b in zip(s[:-1], s[1:]):
            if a == 4:
                n4 += 1
                n410 += b == 10
    assert abs(n410 / n4 - 0.13) <= 0.02


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(1, 6), min_size=1, max_size=12), min_size=1, max_size=20),
       st.sampled_from([0.0, 0.5, 1.0]))
def test_estimate_is_row_stochastic(seqs, alpha):
    chain = estimate_markov(seqs, smoothing=alpha)
    assert np.all(chain.transitions >= 0)
    np.testing.assert_allclose(chain.transitions.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_sampling_visits_only_reachable_states(seed):
    chain = suturing_chain()
    s = sample_sequence(chain, seed)
    assert chain.initial[SUTURING.index(s[0])] > 0
    for a, b in zip(s[:-1], s[1:]):
        assert chain.p(a, b) > 0


def test_save_load_round_trip(tmp_path):
    chain = suturing_chain()
    chain.save(tmp_path / "c.json")
    back = MarkovChain.load(tmp_path / "c.json")
    assert back.states.ids == chain.states.ids
    np.testing.assert_array_equal(back.transitions, chain.transitions)


def test_rubric_covers_block_transfer():
    for g in BLOCK_TRANSFER_ORDER:
        assert g in RUBRIC and RUBRIC[g].errors

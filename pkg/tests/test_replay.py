import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emgtta import autodiff as ad
from emgtta.align import der_loss
from emgtta.data import synth_sessions
from emgtta.replay import (
    ExemplarBuffer,
    capacity_windows,
    fill_buffer,
    reservoir_insert,
    snapshot_logits,
    window_label,
)
from emgtta.tcn import TcnConfig, build, forward, inject_lora

SMALL = TcnConfig(input_channels=14, blocks=2, channels=8, kernel_size=3, classes=8, lora_block=0)


def _insert_range(capacity, n, rng):
    buf = ExemplarBuffer(capacity)
    for i in range(n):
        reservoir_insert(buf, np.full((1, 1), i), i % 8, np.zeros(2), rng)
    return buf


def test_exactly_capacity_items_are_kept():
    buf = _insert_range(5, 5, np.random.default_rng(0))
    assert sorted(int(w[0, 0]) for w in buf.windows) == list(range(5))


def test_zero_capacity_stays_empty():
    buf = _insert_range(0, 50, np.random.default_rng(0))
    assert len(buf) == 0 and buf.seen == 50
    with pytest.raises(ValueError):
        buf.arrays()


@settings(max_examples=30, deadline=None)
@given(capacity=st.integers(0, 20), n=st.integers(0, 60), seed=st.integers(0, 10**6))
def test_size_never_exceeds_capacity(capacity, n, seed):
    buf = _insert_range(capacity, n, np.random.default_rng(seed))
    assert len(buf) == min(capacity, n)
    assert len({int(w[0, 0]) for w in buf.windows}) == len(buf)


def test_reservoir_inclusion_is_uniform():
    # 200 trials of 10^5 insertions into 100 slots
    capacity, n, trials = 100, 100_000, 200
    rng = np.random.default_rng(1)
    counts = np.zeros(n)
    highs = np.arange(capacity + 1, n + 1)
    for _ in range(trials):
        # same rule as reservoir_insert, with the slot draws made in one batch
        slots = list(range(capacity))
        draws = rng.integers(0, highs)
        for i in np.flatnonzero(draws < capacity):
            slots[draws[i]] = i + capacity
        counts[slots] += 1
    p = capacity / n
    # pooled over blocks of 1000 items the binomial count is wide enough for a 3-sigma check
    block = counts.reshape(100, 1000).sum(axis=1)
    mean, sd = trials * 1000 * p, np.sqrt(trials * 1000 * p * (1 - p))
    assert np.all(np.abs(block - mean) <= 4 * sd)
    assert abs(counts.mean() - trials * p) <= 3 * np.sqrt(trials * p * (1 - p) / n)


def test_reservoir_insert_matches_the_reference_loop():
    # the inclusion test above reimplements the loop; check it against the real function
    a = _insert_range(7, 300, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    ref = []
    for i in range(300):
        if len(ref) < 7:
            ref.append(i)
        else:
            j = int(rng.integers(0, i + 1))
            if j < 7:
                ref[j] = i
    assert [int(w[0, 0]) for w in a.windows] == ref


def test_capacity_in_seconds():
    assert capacity_windows(120.0, 25.0, 29) == round(3000 / 29)
    assert capacity_windows(0.0, 25.0, 29) == 0
    with pytest.raises(ValueError):
        capacity_windows(-1.0, 25.0, 29)


def test_window_label_majority():
    assert window_label(np.array([0, 3, 3, 0, 3])) == 3
    assert window_label(np.array([2, 1])) == 1


@pytest.fixture(scope="module")
def filled():
    model = build(SMALL, 3)
    sessions = synth_sessions(2, 7, 1, seed=0)
    return model, fill_buffer(model, sessions, capacity=40, seed=0)


def test_fill_buffer_is_deterministic(filled):
    model, buf = filled
    again = fill_buffer(model, synth_sessions(2, 7, 1, seed=0), capacity=40, seed=0)
    assert again.digest() == buf.digest()
    assert len(buf) == 40
    windows, labels, logits = buf.arrays()
    assert windows.shape == (40, 14, SMALL.receptive_field)
    assert logits.shape == (40, 8)


def test_unadapted_model_has_zero_logit_term(filled):
    model, buf = filled
    windows, labels, logits = buf.arrays()
    adapted = inject_lora(model, seed=1)
    last = forward(adapted, windows).data[:, :, -1]
    ce = ad.cross_entropy(last, labels, axis=1).data
    # with untouched adapters only the cross-entropy term remains
    assert der_loss(adapted, windows, labels, logits).data == ce


def test_resnapshot_moves_with_adaptation(filled):
    model, buf = filled
    windows, _, logits = buf.arrays()
    assert np.array_equal(snapshot_logits(model, windows), logits)
    adapted = inject_lora(model, seed=1)
    adapted.adapters = {k: v + 0.1 for k, v in adapted.adapters.items()}
    assert not np.array_equal(snapshot_logits(adapted, windows), logits)

import numpy as np
import pytest

from cfsnn.neurons import (
    LayerState,
    NeuronConfig,
    SpikeRecord,
    cf_fire,
    cf_reset,
    cf_step,
    lif_step,
    membrane_histogram,
    simulate_no_reset,
    variance_literal,
    variance_oracle,
)

CF = NeuronConfig()
LIF_SOFT = NeuronConfig(kind="lif", reset_mode="soft")
LIF_HARD = NeuronConfig(kind="lif", reset_mode="hard")


@pytest.mark.parametrize("kwargs", [
    {"theta_p": 0.0}, {"theta_n": 0.5}, {"k_p_max": 0}, {"k_n_max": 0},
    {"k_tau": 1.5}, {"k_tau": -0.1}, {"reset_mode": "other"}, {"kind": "izh"},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        NeuronConfig(**kwargs)


# ---------------------------------------------------------------- LIF


def test_lif_subthreshold():
    s, st = lif_step(LayerState(np.array([0.8])), np.array([0.5]), LIF_SOFT)
    assert s[0] == 0 and st.v[0] == pytest.approx(0.7)


def test_lif_zero():
    s, st = lif_step(LayerState.zeros(1), np.zeros(1), LIF_SOFT)
    assert s[0] == 0 and st.v[0] == 0


def test_lif_fires_soft_and_hard():
    s, st = lif_step(LayerState(np.array([0.8])), np.array([1.0]), LIF_SOFT)
    assert s[0] == 1 and st.v[0] == pytest.approx(0.2)
    s, st = lif_step(LayerState(np.array([0.8])), np.array([1.0]), LIF_HARD)
    assert s[0] == 1 and st.v[0] == 0.0


def test_lif_fires_at_exact_threshold():
    s, _ = lif_step(LayerState.zeros(1), np.array([1.0]), LIF_SOFT)
    assert s[0] == 1


def test_lif_hard_reset_invariant():
    rng = np.random.default_rng(0)
    state = LayerState.zeros(1000)
    for _ in range(10):
        current = rng.normal(0.5, 1.0, 1000)
        u = LIF_HARD.k_tau * state.v + current
        s, state = lif_step(state, current, LIF_HARD)
        assert np.all(state.v[s == 1] == 0.0)
        np.testing.assert_array_equal(state.v[s == 0], u[s == 0])


def test_step_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        lif_step(LayerState.zeros(3), np.zeros(2), LIF_SOFT)
    with pytest.raises(ValueError, match="shape"):
        cf_step(LayerState.zeros(3), np.zeros(2), CF)


def test_step_kind_checked():
    with pytest.raises(ValueError):
        lif_step(LayerState.zeros(1), np.zeros(1), CF)
    with pytest.raises(ValueError):
        cf_step(LayerState.zeros(1), np.zeros(1), LIF_SOFT)


# ---------------------------------------------------------------- CF


@pytest.mark.parametrize("u,s", [(2.3, 2), (0.0, 0), (-1.2, -1), (5.0, 2), (-3.7, -2), (1.0, 0), (-1.0, 0)])
def test_cf_fire_examples(u, s):
    assert cf_fire(np.array([u]), CF)[0] == s


@pytest.mark.parametrize("u,s,v", [(2.3, 2, 0.3), (0.4, 0, 0.4), (-1.2, -1, -0.2)])
def test_cf_reset_examples(u, s, v):
    assert cf_reset(np.array([u]), np.array([s]), CF)[0] == pytest.approx(v)


def test_cf_reset_rejects_out_of_range_spikes():
    with pytest.raises(ValueError, match="spike counts"):
        cf_reset(np.array([4.0]), np.array([3]), CF)


@pytest.mark.parametrize("v,i,u,s,vn", [(0.8, 2.1, 2.3, 2, 0.3), (0.0, 0.0, 0.0, 0, 0.0), (-0.8, -1.0, -1.2, -1, -0.2)])
def test_cf_step_examples(v, i, u, s, vn):
    spikes, st = cf_step(LayerState(np.array([v])), np.array([i]), CF)
    assert spikes[0] == s
    assert st.v[0] == pytest.approx(vn)
    assert st.step_index == 1


def test_cf_floor_formula_away_from_thresholds():
    cfg = NeuronConfig(theta_p=0.7, theta_n=-1.3, k_p_max=3, k_n_max=2)
    rng = np.random.default_rng(1)
    u = rng.uniform(-5, 5, 10_000)
    near = np.minimum(np.abs(u / 0.7 - np.round(u / 0.7)), np.abs(u / 1.3 - np.round(u / 1.3)))
    u = u[near > 1e-9]
    expect = np.where(u >= 0, np.clip(np.floor(u / 0.7), 0, 3), -np.clip(np.floor(-u / 1.3), 0, 2))
    np.testing.assert_array_equal(cf_fire(u, cfg), expect)


def test_cf_reduces_to_soft_lif():
    cf = NeuronConfig(kind="cf", k_p_max=1, k_n_max=1, theta_n=-1e12)
    rng = np.random.default_rng(4)
    a, b = LayerState.zeros(500), LayerState.zeros(500)
    for _ in range(8):
        current = rng.normal(0.4, 1.0, 500)
        sa, a = cf_step(a, current, cf)
        sb, b = lif_step(b, current, LIF_SOFT)
        np.testing.assert_array_equal(sa, sb)
        np.testing.assert_allclose(a.v, b.v, rtol=0, atol=0)


# ---------------------------------------------------------------- spike record


def test_spike_record_rates():
    rec = SpikeRecord()
    rec.add("l", 0, np.array([2, 0, 2, 0]))
    rec.add("l", 1, np.array([-2, 0, 2, 0]))
    assert rec.firing_rate("l") == 1.0
    assert rec.firing_rate("l", "nonzero") == 0.5
    assert rec.values["l"] == {-2: 1, 0: 4, 2: 3}


def test_spike_record_merge():
    a, b = SpikeRecord(), SpikeRecord()
    a.add("l", 0, np.ones(4))
    b.add("l", 0, np.zeros(4))
    a.batches = b.batches = 1
    a.merge(b)
    assert a.firing_rate("l") == 0.5
    assert a.batches == 2


def test_spike_record_unknown_layer():
    with pytest.raises(KeyError):
        SpikeRecord().firing_rate("missing")


# ---------------------------------------------------------------- membrane diagnostics


def test_variance_formulas():
    assert variance_oracle(1, 0.25) == 1.0
    assert variance_oracle(2, 0.25) == variance_literal(2, 0.25) == 1.0625
    assert variance_oracle(3, 0.25) == 1.06640625
    assert variance_literal(3, 0.25) == 1.125
    assert variance_oracle(3, 0.25, theta=2.0) == 4 * 1.06640625


def test_simulate_no_reset_recurrence():
    x = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_allclose(simulate_no_reset(x, 0.5)[:, 0], [1.0, 2.5, 4.25])


def test_histogram_hand_binning():
    table = membrane_histogram({("l", 0): np.array([-1.0, 0.0, 1.0])}, bins=(-1.5, 1.5, 1.0))
    _, _, counts, mean, var, oracle, _ = table.rows[0]
    np.testing.assert_array_equal(counts, [1, 1, 1])
    assert mean == 0.0 and var == pytest.approx(2 / 3)
    assert oracle is None


def test_histogram_all_zero():
    table = membrane_histogram({("l", 2): np.zeros(100)}, k_tau=0.25)
    _, _, counts, _, var, oracle, literal = table.rows[0]
    assert counts.sum() == 100 and np.count_nonzero(counts) == 1
    centre = np.argmax(counts)
    assert table.edges[centre] < 0 < table.edges[centre + 1]
    assert var == 0.0
    assert oracle == 1.06640625 and literal == 1.125


def test_histogram_csv_columns():
    csv_text = membrane_histogram({("l", 0): np.zeros(3)}, bins=(-1.0, 1.0, 1.0), k_tau=0.25).to_csv()
    lines = csv_text.strip().splitlines()
    assert lines[0].split(",")[:6] == ["layer", "step", "kind", "bin_left", "bin_right", "count"]
    assert "oracle_variance" in lines[0]
    assert lines[-1].startswith("l,0,summary")


def test_histogram_empty():
    with pytest.raises(ValueError):
        membrane_histogram({})
    with pytest.raises(ValueError):
        membrane_histogram({("l", 0): np.array([])})

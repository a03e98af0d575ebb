import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fsm_oracle import admissible_tokens
from hgmesh.mesh_io import QuantizedMesh, prepare
from hgmesh.order_fsm import (
    DONE,
    IN_EOS,
    DegenerateDistribution,
    OrderViolation,
    advance,
    invalid_counts,
    invalid_fraction,
    masked_sample,
    new_state,
    replay,
    token_mask,
    valid_set,
)
from hgmesh.procedural import gen_procedural
from hgmesh.sequencer import VocabSpec, decode, encode

Q = 128
V = VocabSpec(Q)


def feed(tokens, q=Q):
    state = new_state(VocabSpec(q))
    for t in tokens:
        state = advance(state, t, VocabSpec(q))
    return state


class TestValidSet:
    def test_fresh(self):
        vs = valid_set(new_state(V))
        assert (vs.lb, vs.ub, vs.eos) == (0, Q - 1, False)
        assert new_state(V).faces_emitted == 0

    def test_vertex_tie(self):
        assert valid_set(feed([0, 9, 3, 1, 2, 0])).lb == 1

    def test_tie_broken(self):
        assert valid_set(feed([0, 9, 3, 1, 2, 0, 3])).lb == 0

    def test_face_tie_is_strict_at_last_slot(self):
        prev = [0, 9, 3, 1, 2, 0, 1, 2, 5]
        state = feed(prev + prev[:8])
        assert state.prefix_tied_to_prev_face
        assert valid_set(state).lb == 6

    def test_eos_only_at_face_start_after_a_face(self):
        state = feed([0, 9, 3, 1, 2, 0, 1, 2, 5])
        assert valid_set(state).eos
        assert not valid_set(feed([0, 9, 3])).eos

    def test_room_upper_bound(self):
        # the first vertex must leave room for two larger ones
        state = feed([Q - 1, Q - 1])
        assert valid_set(state).ub == Q - 3


class TestAdvance:
    def test_replay_worked_example(self):
        toks = [V.S] * 9 + [0, 9, 3, 1, 2, 0, 1, 2, 5] + [V.E] * 9
        state = replay(toks, Q)
        assert state.phase == DONE and state.faces_emitted == 1

    def test_below_lb_rejected(self):
        state = feed([0, 9, 3, 1, 2, 0])
        with pytest.raises(OrderViolation) as exc:
            advance(state, 0, V)
        assert exc.value.lb == 1 and exc.value.token == 0

    def test_eos_mid_face_rejected(self):
        state = feed([0, 9, 3])
        with pytest.raises(OrderViolation):
            advance(state, V.E, V)

    def test_special_tokens_never_valid(self):
        state = feed([0, 9, 3, 1, 2, 0, 1, 2, 5])
        for tok in (V.S, V.P):
            with pytest.raises(OrderViolation):
                advance(state, tok, V)

    def test_eos_suffix_forces_e(self):
        state = advance(feed([0, 9, 3, 1, 2, 0, 1, 2, 5]), V.E, V)
        assert state.phase == IN_EOS
        with pytest.raises(OrderViolation):
            advance(state, 5, V)
        for _ in range(8):
            state = advance(state, V.E, V)
        assert state.phase == DONE
        with pytest.raises(ValueError):
            valid_set(state)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10 ** 7), st.sampled_from([16, 128, 1024]))
def test_encoder_output_always_accepted(seed, q):
    toks = encode(prepare(gen_procedural(seed), q))
    assert replay(toks, q).faces_emitted == (len(toks) - 18) // 9


def random_walk(q, rng, faces, p_low=0.5):
    """Pick valid tokens, preferring the lower bound to create long tie chains."""
    vocab = VocabSpec(q)
    state, toks, states = new_state(vocab), [], []
    while state.faces_emitted < faces:
        vs = valid_set(state)
        states.append((state, list(toks)))
        if vs.num_coords == 0:  # previous face was the largest possible; only E remains
            assert vs.eos
            break
        tok = vs.lb if rng.random() < p_low else int(rng.integers(vs.lb, vs.ub + 1))
        toks.append(tok)
        state = advance(state, tok, vocab)
    return state, toks, states


def test_interval_matches_bruteforce_small():
    q = 16
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 5000:
        _, _, states = random_walk(q, rng, faces=int(rng.integers(1, 12)))
        for state, _ in states:
            oracle = admissible_tokens(state.current, state.prev_face, q)
            mask = token_mask(state, VocabSpec(q))
            assert np.array_equal(mask[:q], oracle)
            checked += 1


def test_random_walks_decode_canonically():
    rng = np.random.default_rng(1)
    for q in (16, 128):
        vocab = VocabSpec(q)
        for _ in range(50):
            state, toks, _ = random_walk(q, rng, faces=int(rng.integers(1, 30)))
            seq = [vocab.S] * 9 + toks + [vocab.E] * 9
            mesh = decode(seq, q)
            mesh.validate()
            assert encode(mesh).tolist() == seq


class TestMaskedSample:
    def test_respects_lower_bound(self):
        state = feed([64, 0, 0])  # next y must be >= 64
        assert valid_set(state).lb == 64
        rng = np.random.default_rng(0)
        draws = [masked_sample(np.zeros(V.size), state, 1.0, rng) for _ in range(10_000)]
        assert min(draws) >= 64 and max(draws) <= Q - 1
        assert len(set(draws)) > 50

    def test_greedy(self):
        logits = np.zeros(V.size)
        logits[3], logits[100], logits[V.S] = 5.0, 4.0, 50.0
        assert masked_sample(logits, new_state(V), 0.0, 0) == 3
        state = feed([50, 0, 0])
        assert masked_sample(logits, state, 0.0, 0) == 100

    def test_single_valid_token(self):
        prev = [0, 9, 3, 1, 2, 0, 1, 2, Q - 2]
        state = feed(prev + prev[:8])
        assert valid_set(state).num_coords == 1
        assert masked_sample(np.random.randn(V.size), state, 1.0, 3) == Q - 1

    def test_deterministic_per_seed(self):
        logits = np.random.default_rng(5).normal(size=V.size)
        a = [masked_sample(logits, new_state(V), 1.0, s) for s in range(20)]
        b = [masked_sample(torch.tensor(logits), new_state(V), 1.0, s) for s in range(20)]
        assert a == b

    def test_degenerate(self):
        logits = np.full(V.size, -np.inf)
        logits[V.S] = 0.0
        with pytest.raises(DegenerateDistribution):
            masked_sample(logits, new_state(V), 1.0, 0)

    def test_never_rejected(self):
        q = 16
        vocab = VocabSpec(q)
        rng = np.random.default_rng(2)
        draws = 0
        while draws < 100_000:
            state = new_state(vocab)
            while state.phase != DONE and draws < 100_000:
                logits = rng.normal(scale=3.0, size=vocab.size)
                tok = masked_sample(logits, state, float(rng.uniform(0.2, 2.0)), rng)
                state = advance(state, tok, vocab)  # raises if the sample were invalid
                draws += 1


class TestInvalidFraction:
    def test_closed_form_on_unconstrained_face(self):
        # yzx vertices (0,0,0), (0,1,0), (1,0,0): every lower bound is 0, every upper bound Q-1
        mesh = QuantizedMesh(Q, [[0, 0, 0], [0, 0, 1], [0, 1, 0]], [[0, 1, 2]])
        counts = invalid_counts(encode(mesh), Q)
        assert counts.tolist() == [3] * 9
        st_ = invalid_fraction([encode(mesh)] * 4, Q)
        assert st_.mean_fraction == pytest.approx(3 / (Q + 3))

    def test_counts_by_hand(self):
        # second face tied to the first on 8 slots: its last slot prunes 0..5, E, S and P
        f = [0, 9, 3, 1, 2, 0, 1, 2, 5]
        g = f[:8] + [6]
        c = invalid_counts([V.S] * 9 + f + g + [V.E] * 9, Q)
        assert c[17] == 6 + 1 + 2
        assert c[9] == 0 + 2  # slot 0 after a face: lb 0, E allowed

    def test_rejects_invalid_sequence(self):
        with pytest.raises(OrderViolation) as exc:
            invalid_fraction([[V.S] * 9 + [0, 9, 3, 0, 2, 0, 1, 2, 5] + [V.E] * 9], Q)
        # y ties with the first vertex, so z must be >= 9
        assert exc.value.position == 4 and exc.value.lb == 9

    def test_sanity_band(self):
        seqs = [encode(prepare(gen_procedural(s), Q)) for s in range(20)]
        st_ = invalid_fraction(seqs, Q)
        assert 0.05 <= st_.mean_fraction <= 0.60
        assert st_.per_slot.shape == (9,)

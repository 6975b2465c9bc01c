import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from hdpgp import _kernels as K
from hdpgp.codebook import ClipDocument, Corpus, GridSpec
from hdpgp.errors import DataError
from hdpgp.hdp import (
    ActivityModel,
    HdpHyperParams,
    fit_hdp,
    joint_log_prob,
    load_activities,
    save_activities,
    select_typical,
    with_typical,
)

GRID = GridSpec(16, 16, 8)  # 4 cells, 32 words


def make_corpus(docs, grid=GRID):
    clips = tuple(ClipDocument(i, (i, i + 1), tuple(int(w) for w in d)) for i, d in enumerate(docs))
    return Corpus(grid, clips, 1)


def disjoint_topic_corpus(seed=0, n_docs=60, n_words=30):
    """Every clip draws from one of three word blocks that share no words."""
    rng = np.random.default_rng(seed)
    blocks = [np.arange(0, 8), np.arange(8, 16), np.arange(16, 24)]
    docs = [rng.choice(blocks[d % 3], size=n_words) for d in range(n_docs)]
    return make_corpus(docs), blocks


class TestSelectTypical:
    def test_worked_example(self):
        counts = np.array([0.5, 0.3, 0.15, 0.04, 0.009, 0.001]) * 1000
        assert select_typical(counts, 0.99) == [0, 1, 2, 3]

    def test_single_component(self):
        assert select_typical([7], 0.99) == [0]

    def test_dominant_component_always_kept(self):
        assert select_typical([995, 5], 0.5) == [0]

    def test_cutoff_one_keeps_every_component(self):
        # the accumulated ratio of the last component is exactly 1
        assert sorted(select_typical([3, 0, 2, 5], 1.0)) == [0, 1, 2, 3]

    def test_returns_ids_in_rank_order(self):
        assert select_typical([1, 90, 9], 0.99) == [1, 2]

    @given(
        st.lists(st.integers(1, 500), min_size=1, max_size=12),
        st.floats(0.05, 1.0),
        st.integers(0, 10_000),
    )
    @settings(max_examples=100)
    def test_invariant_under_permutation(self, counts, cutoff, seed):
        counts = np.array(counts)
        perm = np.random.default_rng(seed).permutation(counts.size)
        base = select_typical(counts, cutoff)
        moved = select_typical(counts[perm], cutoff)
        # ties may swap ids, so compare the kept counts
        assert sorted(counts[base]) == sorted(counts[perm][moved])

    @given(st.lists(st.integers(1, 500), min_size=1, max_size=12), st.integers(1, 50))
    def test_invariant_under_scaling(self, counts, factor):
        c = np.array(counts)
        assert select_typical(c, 0.9) == select_typical(c * factor, 0.9)

    @given(st.lists(st.integers(1, 500), min_size=1, max_size=12), st.floats(0.05, 1.0))
    def test_kept_mass_within_cutoff_unless_single(self, counts, cutoff):
        c = np.array(counts, dtype=float)
        kept = select_typical(c, cutoff)
        assert len(kept) == 1 or c[kept].sum() / c.sum() <= cutoff + 1e-9

    @pytest.mark.parametrize(
        "counts,cutoff", [([0, 0], 0.99), ([], 0.99), ([1, -1], 0.99), ([1, 2], 0.0), ([1, 2], 1.5)]
    )
    def test_rejects_bad_input(self, counts, cutoff):
        with pytest.raises(DataError):
            select_typical(counts, cutoff)


class TestHyperParams:
    @pytest.mark.parametrize(
        "kw", [dict(gamma=0), dict(alpha=-1), dict(d0=0), dict(n_sweeps=10, n_burnin=10)]
    )
    def test_invalid(self, kw):
        with pytest.raises(DataError):
            HdpHyperParams(**kw)


def brute_force_objective(z, beta, doc_of, words, D, V, a, d0):
    """Topic-dependent part of the collapsed log joint, recomputed from scratch."""
    total = 0.0
    for k in np.unique(z):
        m = z == k
        nd = np.bincount(doc_of[m], minlength=D)
        nw = np.bincount(words[m], minlength=V)
        total += np.sum(gammaln(a * beta[k] + nd) - gammaln(a * beta[k]))
        total += np.sum(gammaln(nw + d0) - gammaln(d0)) + gammaln(V * d0) - gammaln(m.sum() + V * d0)
    return total


class TestMoveDeltas:
    """Incremental score changes of the split, merge and word moves against recomputation."""

    D, V, N, a, d0 = 7, 11, 200, 0.7, 0.05

    @pytest.fixture(params=[0, 1, 2])
    def state(self, request):
        rng = np.random.default_rng(request.param)
        doc_of = np.sort(rng.integers(0, self.D, self.N))
        words = rng.integers(0, self.V, self.N)
        z = rng.integers(0, 3, self.N)
        beta = np.array([0.3, 0.2, 0.4])
        return rng, doc_of, words, z, beta

    def F(self, z, beta, doc_of, words):
        return brute_force_objective(z, beta, doc_of, words, self.D, self.V, self.a, self.d0)

    def test_merge(self, state):
        _, doc_of, words, z, beta = state
        got = K.merge_delta(
            K.topic_tokens(z, 0), K.topic_tokens(z, 2), doc_of, words,
            self.D, self.V, beta[0], beta[2], self.a, self.d0,
        )
        z2 = z.copy()
        z2[z == 2] = 0
        b2 = beta.copy()
        b2[0] += b2[2]
        want = self.F(z2, b2, doc_of, words) - self.F(z, beta, doc_of, words)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-8)

    def test_split(self, state):
        rng, doc_of, words, z, beta = state
        idx = K.topic_tokens(z, 1)
        side, got = K.propose_split(
            idx, idx[0], idx[1], doc_of, words, self.D, self.V, beta[1], self.a, self.d0,
            rng.random(idx.size), rng.random(idx.size * 3), 2,
        )
        assert side[0] == 0 and side[1] == 1
        z3 = z.copy()
        z3[idx[side == 1]] = 3
        n_b = int((side == 1).sum())
        b3 = np.append(beta, beta[1] * n_b / idx.size)
        b3[1] -= b3[3]
        want = self.F(z3, b3, doc_of, words) - self.F(z, beta, doc_of, words)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-8)

    def test_word_move(self, state):
        _, doc_of, words, z, beta = state
        idx = K.topic_tokens(z, 1)
        w, k, l = words[idx[0]], 1, 2
        tbw = np.argsort(words, kind="stable")
        ptr = np.searchsorted(words[tbw], np.arange(self.V + 1))
        blk = K.word_block(tbw, ptr, z, w, k)
        assert np.all(words[blk] == w) and np.all(z[blk] == k)
        ndk = np.zeros((self.D, 3), np.int64)
        np.add.at(ndk, (doc_of, z), 1)
        nwk = np.zeros((self.V, 3), np.int64)
        np.add.at(nwk, (words, z), 1)
        nk = np.bincount(z, minlength=3)
        got = K.move_delta(blk, w, k, l, doc_of, ndk, nwk, nk, beta, self.a, self.d0, self.V)
        z4 = z.copy()
        z4[blk] = l
        want = self.F(z4, beta, doc_of, words) - self.F(z, beta, doc_of, words)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-8)


def hand_model(z_per_doc, tables, K_, hyper=HdpHyperParams(n_sweeps=2, n_burnin=0)):
    V = GRID.codebook_size
    return ActivityModel(
        phi=np.full((K_, V), 1.0 / V),
        pi0=np.full(K_, 1.0 / (K_ + 1)),
        counts=np.ones(K_, dtype=np.int64),
        typical=tuple(range(K_)),
        hyper=hyper,
        codebook_size=V,
        assignments=tuple(np.asarray(z, dtype=np.int64) for z in z_per_doc),
        tables=np.asarray(tables, dtype=np.int64),
    )


class TestJointLogProb:
    def test_one_token_closed_form(self):
        # one customer at one table: the seating term is 1 and the word term is 1/V
        corpus = make_corpus([[5]])
        m = hand_model([[0]], [[1]], 1)
        assert joint_log_prob(m, corpus) == pytest.approx(-np.log(GRID.codebook_size))

    def test_invariant_under_label_permutation(self):
        corpus = make_corpus([[1, 2, 2, 9], [9, 9, 3]])
        z = [[0, 1, 1, 2], [2, 2, 0]]
        tables = [[1, 1, 1], [1, 0, 2]]
        base = joint_log_prob(hand_model(z, tables, 3), corpus)
        perm = np.array([2, 0, 1])  # old label k becomes perm[k]
        zp = [perm[np.array(d)] for d in z]
        tp = np.zeros((2, 3), dtype=np.int64)
        tp[:, perm] = np.array(tables)
        assert joint_log_prob(hand_model(zp, tp, 3), corpus) == pytest.approx(base)

    def test_empty_clip_changes_nothing(self):
        a = make_corpus([[1, 2, 2], [4]])
        b = make_corpus([[1, 2, 2], [4], []])
        ma = hand_model([[0, 1, 1], [0]], [[1, 1], [1, 0]], 2)
        mb = hand_model([[0, 1, 1], [0], []], [[1, 1], [1, 0], [0, 0]], 2)
        assert joint_log_prob(ma, a) == pytest.approx(joint_log_prob(mb, b))

    def test_inconsistent_tables_are_impossible(self):
        corpus = make_corpus([[1, 2]])
        assert joint_log_prob(hand_model([[0, 0]], [[3]], 1), corpus) == -np.inf

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            joint_log_prob(hand_model([[0]], [[1]], 1), make_corpus([[1, 2]]))

    def test_fitted_model_reports_its_own_joint(self):
        corpus, _ = disjoint_topic_corpus(n_docs=12, n_words=10)
        m = fit_hdp(corpus, HdpHyperParams(n_sweeps=10, n_burnin=5, seed=1))
        assert joint_log_prob(m, corpus) == pytest.approx(m.log_prob, rel=1e-9)


def three_block_corpus(seed, n_docs=200, n_words=200, n_rare=0):
    """Clips cycle through three disjoint word blocks; ``n_rare`` clips use a fourth block."""
    rng = np.random.default_rng(seed)
    blocks = [np.arange(0, 8), np.arange(8, 16), np.arange(16, 24)]
    docs = [rng.choice(blocks[d % 3], size=n_words) for d in range(n_docs)]
    for i in range(n_rare):
        docs[50 * i + 7] = rng.choice(np.arange(24, 32), size=n_words)
    return make_corpus(docs), blocks


def best_cosines(phi, blocks):
    out = []
    for b in blocks:
        truth = np.zeros(phi.shape[1])
        truth[b] = 1.0 / b.size
        cos = phi @ truth / (np.linalg.norm(phi, axis=1) * np.linalg.norm(truth))
        out.append(cos.max())
    return np.array(out)


@pytest.fixture(scope="module")
def three_topics():
    corpus, blocks = disjoint_topic_corpus()
    model = fit_hdp(corpus, HdpHyperParams(n_sweeps=60, n_burnin=30, seed=0))
    return corpus, blocks, model


class TestFit:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_three_disjoint_activities_with_rare_tail(self, seed):
        # a 1% tail of rare clips sits after the three real activities, so each
        # real one keeps its accumulated ratio within the cutoff
        corpus, blocks = three_block_corpus(seed, n_rare=2)
        model = fit_hdp(corpus, HdpHyperParams(n_sweeps=40, n_burnin=20))
        assert len(model.typical) == 3
        phi = model.typical_phi()
        assert np.all(best_cosines(phi, blocks) >= 0.9)
        # greedy matching pairs each block with a distinct activity
        assert len({int(np.argmax(phi[:, b].sum(axis=1))) for b in blocks}) == 3

    def test_three_disjoint_activities_without_tail(self):
        corpus, blocks = three_block_corpus(0)
        model = fit_hdp(corpus, HdpHyperParams(n_sweeps=40, n_burnin=20))
        assert model.K == 3
        assert np.all(best_cosines(model.phi, blocks) >= 0.9)
        # three equal activities: the third reaches an accumulated ratio of 1
        assert len(model.typical) == 2

    def test_phi_rows_are_distributions(self, three_topics):
        _, _, model = three_topics
        np.testing.assert_allclose(model.phi.sum(axis=1), 1.0)
        assert np.all(model.phi > 0)

    def test_tokens_conserved(self, three_topics):
        corpus, _, model = three_topics
        assert model.counts.sum() == sum(c.n_words for c in corpus)
        per_topic = np.bincount(np.concatenate(model.assignments), minlength=model.K)
        np.testing.assert_array_equal(per_topic, model.counts)

    def test_topics_ranked_by_size(self, three_topics):
        _, _, model = three_topics
        assert np.all(np.diff(model.counts) <= 0)

    def test_single_word_corpus(self):
        corpus = make_corpus([[7] * 20 for _ in range(10)])
        model = fit_hdp(corpus, HdpHyperParams(n_sweeps=20, n_burnin=10))
        assert len(model.typical) == 1
        assert model.phi[model.typical[0], 7] >= 0.99

    def test_deterministic_for_fixed_seed(self):
        corpus, _ = disjoint_topic_corpus(n_docs=15, n_words=12)
        h = HdpHyperParams(n_sweeps=8, n_burnin=4, seed=3)
        a, b = fit_hdp(corpus, h), fit_hdp(corpus, h)
        np.testing.assert_array_equal(a.phi, b.phi)
        for za, zb in zip(a.assignments, b.assignments):
            np.testing.assert_array_equal(za, zb)

    def test_empty_clips_are_skipped(self):
        corpus = make_corpus([[1, 1, 2], [], [9, 9]])
        model = fit_hdp(corpus, HdpHyperParams(n_sweeps=4, n_burnin=2))
        assert model.assignments[1].size == 0
        assert model.tables[1].sum() == 0

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            fit_hdp(make_corpus([]))

    def test_corpus_without_tokens(self):
        with pytest.raises(DataError):
            fit_hdp(make_corpus([[], []]))


class TestFiles:
    def test_round_trip(self, tmp_path):
        corpus, _ = disjoint_topic_corpus(n_docs=9, n_words=8)
        m = fit_hdp(corpus, HdpHyperParams(n_sweeps=4, n_burnin=2))
        save_activities(m, tmp_path / "a.json", config_hash="abc")
        back = load_activities(tmp_path / "a.json")
        np.testing.assert_allclose(back.phi, m.phi)
        np.testing.assert_array_equal(back.counts, m.counts)
        assert back.typical == m.typical
        assert back.hyper == m.hyper
        assert back.config_hash == "abc"

    def test_loaded_model_has_no_assignments(self, tmp_path):
        corpus, _ = disjoint_topic_corpus(n_docs=9, n_words=8)
        m = fit_hdp(corpus, HdpHyperParams(n_sweeps=4, n_burnin=2))
        save_activities(m, tmp_path / "a.json")
        with pytest.raises(DataError):
            joint_log_prob(load_activities(tmp_path / "a.json"), corpus)

    def test_schema_checked(self, tmp_path):
        (tmp_path / "x.json").write_text(json.dumps({"schema": "nope"}))
        with pytest.raises(DataError, match="schema"):
            load_activities(tmp_path / "x.json")

    def test_with_typical_reselects(self):
        m = hand_model([[0]], [[1]], 3)
        m = ActivityModel(**{**m.__dict__, "counts": np.array([50, 30, 20])})
        assert with_typical(m, 0.5).typical == (0,)
        assert with_typical(m, 1.0).typical == (0, 1, 2)

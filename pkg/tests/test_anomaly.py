import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdpgp.anomaly import (
    CONFLICT,
    ILLEGAL,
    KINDS,
    RARE,
    AnomalyDetector,
    AnomalyEvent,
    AnomalyThresholds,
    conflict_bounds,
    conflict_events,
    coverage_noise_shape,
    detect_all,
    detect_conflicts,
    detect_illegal_transition,
    detect_rare_motions,
    load_events,
    localize,
    save_events,
    train_conflict_regressors,
)
from hdpgp.codebook import ClipDocument, GridSpec, encode
from hdpgp.errors import DataError
from hdpgp.representation import WordSetIndex, activity_word_set
from hdpgp.synth import Injection, cycle_transition, default_scene, generate, inject_anomalies, reverse_lane_cells

GRID = GridSpec(64, 48, 8)  # 8 x 6 cells


def feature_for(words, sets, cid=0):
    clip = ClipDocument(cid, (cid, cid + 1), tuple(words))
    return clip, WordSetIndex(sets, GRID.codebook_size).feature(clip)


class TestThresholds:
    @pytest.mark.parametrize("kw", [dict(th_rare=-1), dict(th_trans=0.0), dict(th_trans=1.0),
                                    dict(conflict_z=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(DataError):
            AnomalyThresholds(**kw)

    def test_defaults(self):
        th = AnomalyThresholds()
        assert (th.th_rare, th.th_trans, th.conflict_z) == (50, 0.05, 1.96)


class TestEvent:
    def test_illegal_has_no_locations(self):
        with pytest.raises(DataError):
            AnomalyEvent(0, ILLEGAL, 1.0, ((0, 0),))

    @pytest.mark.parametrize("kind", [RARE, CONFLICT])
    def test_localizable_kinds_need_locations(self, kind):
        with pytest.raises(DataError):
            AnomalyEvent(0, kind, 1.0, ())

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            AnomalyEvent(0, "Loitering", 1.0, ((0, 0),))

    def test_file_round_trip(self, tmp_path):
        evs = [AnomalyEvent(3, RARE, 60.0, ((1, 2), (4, 5)), {"n_unassigned": 60}),
               AnomalyEvent(9, ILLEGAL, 3.9, (), {"from": 0, "to": 2, "m": 0.02})]
        assert save_events(tmp_path / "e.jsonl", evs, "abc") == 2
        back = load_events(tmp_path / "e.jsonl")
        assert back == evs
        assert [e.detail for e in back] == [e.detail for e in evs]
        assert json.loads((tmp_path / "e.jsonl").read_text().splitlines()[0])["config_hash"] == "abc"

    def test_malformed_line_named(self, tmp_path):
        p = tmp_path / "e.jsonl"
        save_events(p, [])
        with open(p, "a") as fh:
            fh.write('{"clip_id": 1}\n')
        with pytest.raises(DataError, match=":2:"):
            load_events(p)


class TestLocalize:
    def test_decodes_cell(self):
        assert localize([encode(3, 5, 6, GRID)], GRID) == [(3, 5)]

    def test_directions_in_one_cell_deduplicated(self):
        assert localize([encode(3, 5, 0, GRID), encode(3, 5, 4, GRID)], GRID) == [(3, 5)]

    def test_empty(self):
        assert localize([], GRID) == []

    def test_out_of_range(self):
        with pytest.raises(DataError):
            localize([GRID.codebook_size], GRID)

    @given(st.lists(st.integers(0, 8 * 6 * 8 - 1), max_size=40))
    def test_cells_inside_grid_and_sorted(self, words):
        cells = localize(words, GRID)
        assert cells == sorted(set(cells))
        assert all(0 <= x < GRID.n_cols and 0 <= y < GRID.n_rows for x, y in cells)


class TestRareMotion:
    sets = [activity_word_set(np.eye(GRID.codebook_size)[0] * 0.5 + np.eye(GRID.codebook_size)[1] * 0.5, 1.0)]

    def test_over_threshold(self):
        alien = [encode(x % 8, x // 8, 2, GRID) for x in range(30)] * 2
        clip, f = feature_for(alien + [0, 1] * 10, self.sets)
        ev = detect_rare_motions(clip, f, AnomalyThresholds(th_rare=50), GRID)
        assert ev.kind == RARE and ev.score == 60.0
        assert len(ev.locations) == 30

    def test_at_threshold_is_normal(self):
        clip, f = feature_for([encode(2, 2, 2, GRID)] * 50, self.sets)
        assert detect_rare_motions(clip, f, AnomalyThresholds(th_rare=50), GRID) is None

    def test_fully_covered_clip(self):
        clip, f = feature_for([0, 1] * 100, self.sets)
        assert detect_rare_motions(clip, f, AnomalyThresholds(th_rare=0), GRID) is None


class TestConflictEvents:
    th = AnomalyThresholds()

    def locate(self, i):
        return [(i, 0)]

    def test_worked_example(self):
        evs = conflict_events(1, [0.4], np.array([0.1]), np.array([0.05]), self.th, self.locate)
        assert len(evs) == 1
        assert evs[0].score == pytest.approx(6.0)
        assert evs[0].detail["activity"] == 0

    def test_low_side_exempt(self):
        assert conflict_events(1, [0.0], np.array([0.3]), np.array([0.05]), self.th, self.locate) == []

    def test_equal_to_mean(self):
        assert conflict_events(1, [0.3], np.array([0.3]), np.array([0.05]), self.th, self.locate) == []

    def test_zero_coverage_never_flagged(self):
        assert conflict_events(1, [0.0], np.array([-0.3]), np.array([0.05]), self.th, self.locate) == []

    def test_one_event_per_flagged_activity(self):
        evs = conflict_events(1, [0.5, 0.1, 0.5], np.array([0.1, 0.1, 0.1]), np.full(3, 0.05), self.th,
                              self.locate, activity_ids=[7, 8, 9])
        assert [e.detail["activity"] for e in evs] == [7, 9]
        assert [e.locations for e in evs] == [((0, 0),), ((2, 0),)]

    def test_noise_shape(self):
        np.testing.assert_allclose(coverage_noise_shape([0.5, 0.0], [100, 100]),
                                   [(0.25 + 0.01) / 100, 0.01 / 100])
        assert coverage_noise_shape(1.5, 0)[()] == pytest.approx(1.0)


class TestIllegalTransition:
    M = cycle_transition(4, 0.9).T  # column-from

    def test_low_probability_change(self):
        M = np.array([[0.9, 0.02], [0.1, 0.98]])
        ev = detect_illegal_transition(1, 0, M, AnomalyThresholds(), clip_id=5)
        assert ev.kind == ILLEGAL and ev.locations == ()
        assert ev.score == pytest.approx(-np.log(0.02))
        assert ev.detail == {"from": 1, "to": 0, "m": 0.02}

    def test_self_transition_never_flagged(self):
        M = np.full((2, 2), 1e-9)
        assert detect_illegal_transition(1, 1, M, AnomalyThresholds()) is None

    def test_first_clip(self):
        assert detect_illegal_transition(None, 0, self.M, AnomalyThresholds()) is None

    def test_cycle_jump(self):
        th = AnomalyThresholds()
        a, b, c = 0, 1, 2
        assert detect_illegal_transition(a, c, self.M, th) is not None
        assert detect_illegal_transition(b, c, self.M, th) is None

    def test_invalid_state(self):
        with pytest.raises(DataError):
            detect_illegal_transition(0, 4, self.M, AnomalyThresholds())


@pytest.fixture(scope="module")
def scene():
    spec = default_scene(seed=0, clips=240, rare_rate=0.0)
    corpus, gt = generate(spec)
    V = spec.grid.codebook_size
    sets = [activity_word_set(a.dense(V) / a.dense(V).sum(), 0.9, k) for k, a in enumerate(spec.activities)]
    index = WordSetIndex(sets, V)
    feats = [index.feature(c) for c in corpus]
    X = np.array([f.c for f in feats])
    N = np.array([f.n_words for f in feats])
    regs = train_conflict_regressors(X, N, max_iter=50)
    return spec, corpus, gt, sets, index, feats, regs


class TestOnSyntheticScene:
    def test_training_clip_conflict_rate(self, scene):
        _, _, _, _, _, feats, regs = scene
        X = np.array([f.c for f in feats])
        N = np.array([f.n_words for f in feats])
        mu, sd = conflict_bounds(X, N, regs)
        rate = float(np.mean(((X > mu + 1.96 * sd) & (X > 0)).any(axis=1)))
        assert rate <= 0.05 + 0.03

    def test_reverse_lane_is_rare_and_localized(self, scene):
        spec, corpus, gt, sets, index, _, _ = scene
        cells, direction = reverse_lane_cells(spec, 40)
        bad, _ = inject_anomalies(corpus, gt, [Injection(10, RARE, {"cells": cells, "direction": direction})],
                                  spec)
        clip = bad.clips[10]
        ev = detect_rare_motions(clip, index.feature(clip), AnomalyThresholds(), spec.grid)
        assert ev is not None
        assert len(set(ev.locations) & set(cells)) >= 0.8 * len(cells)

    def test_injected_conflict_is_flagged(self, scene):
        spec, corpus, gt, sets, index, _, regs = scene
        bad, truth = inject_anomalies(corpus, gt, [Injection(20, CONFLICT)], spec)
        clip = bad.clips[20]
        evs = detect_conflicts(index.feature(clip), regs, AnomalyThresholds(), clip, sets, spec.grid)
        planted = truth.anomalies[-1].detail["activity"]
        assert planted in [e.detail["activity"] for e in evs]

    def test_detectors_are_independent(self, scene):
        spec, corpus, gt, sets, index, _, regs = scene
        plan = [Injection(30, RARE), Injection(60, CONFLICT), Injection(90, ILLEGAL)]
        bad, truth = inject_anomalies(corpus, gt, plan, spec)
        feats = [index.feature(c) for c in bad]
        M = spec.transition.T
        args = (bad.clips, feats, truth.state_seq, spec.grid, sets, regs, M)
        both = detect_all(*args)
        for kind in KINDS:
            alone = detect_all(*args, kinds=[kind])
            assert alone == [e for e in both if e.kind == kind]
            assert alone, f"no {kind} event found"
        for e in both:
            assert all(0 <= x < spec.grid.n_cols and 0 <= y < spec.grid.n_rows for x, y in e.locations)

    def test_stream_matches_batch(self, scene):
        spec, corpus, gt, sets, index, feats, regs = scene
        M = spec.transition.T
        batch = detect_all(corpus.clips[:60], feats[:60], gt.state_seq[:60], spec.grid, sets, regs, M)
        det = AnomalyDetector(spec.grid, sets, regs, M)
        stream = [e for c, f, s in zip(corpus.clips[:60], feats[:60], gt.state_seq[:60]) for e in det(c, f, int(s))]
        assert stream == batch
        assert [e.score for e in stream] == [e.score for e in batch]

    def test_mismatched_regressors(self, scene):
        spec, corpus, _, sets, index, feats, regs = scene
        with pytest.raises(DataError):
            detect_conflicts(feats[0], regs[:-1], AnomalyThresholds(), corpus.clips[0], sets, spec.grid)

    def test_feature_must_match_clip(self, scene):
        spec, corpus, _, sets, _, feats, regs = scene
        det = AnomalyDetector(spec.grid, sets, regs, spec.transition.T)
        with pytest.raises(DataError):
            det(corpus.clips[1], feats[0], 0)


class TestTraining:
    def test_needs_two_activities(self):
        with pytest.raises(DataError):
            train_conflict_regressors(np.zeros((5, 1)), np.ones(5))

    def test_count_mismatch(self):
        with pytest.raises(DataError):
            train_conflict_regressors(np.zeros((5, 2)), np.ones(4))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyqdetr import data as D
from dyqdetr.increngine import PhasePlan, run_incremental_step
from dyqdetr.model import DyQDETR, ModelConfig
from dyqdetr.replay import (ExemplarStore, RiskRecord, calibration_loss, middle_band, partial_calibration,
                            risk_score, select_exemplars)

SMALL = ModelConfig(image_size=32, patch_size=8, d=16, n_heads=2, ffn_dim=32, queries_per_group=4)


def _records(risks, phase=1):
    return [RiskRecord(i, phase, float(r)) for i, r in enumerate(risks)]


def test_middle_band_of_hundred():
    sel = select_exemplars(_records(np.random.default_rng(0).permutation(100)), 0.10)
    ranks = sorted(int(r.risk) for r in sel)
    assert ranks == list(range(45, 55))


@pytest.mark.parametrize("n,f,expected", [(100, 0.1, (45, 55)), (10, 0.2, (4, 6)), (7, 0.5, (1, 4)),
                                          (1, 0.1, (0, 0)), (20, 1.0, (0, 20)), (3, 0.34, (0, 1))])
def test_middle_band_values(n, f, expected):
    # [floor((1/2 - f/2) n), floor((1/2 + f/2) n)) capped at floor(f n), exact rationals
    assert middle_band(n, f) == expected


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=200, unique=True),
       st.floats(0.01, 1.0))
def test_selection_invariant_under_monotone_transforms(risks, f):
    base = {r.image_id for r in select_exemplars(_records(risks), f)}
    for g in (lambda x: 3 * x + 7, np.exp, np.arctan, lambda x: x ** 3):
        with np.errstate(over="ignore"):
            moved = [g(np.float64(r) / 100) for r in risks]
        if len(set(moved)) < len(moved):
            continue                       # transform collapsed values numerically
        assert {r.image_id for r in select_exemplars(_records(moved), f)} == base


@given(st.integers(1, 500), st.floats(0.001, 1.0))
def test_budget_never_exceeded(n, f):
    sel = select_exemplars(_records(np.arange(n)), f)
    assert len(sel) <= int(np.floor(f * n + 1e-12))
    lo, hi = middle_band(n, f)
    assert 0 <= lo <= hi <= n


def test_selection_rejects_bad_fraction():
    with pytest.raises(ValueError):
        select_exemplars(_records([1, 2]), 0.0)
    assert select_exemplars([], 0.5) == []


@pytest.fixture(scope="module")
def phase_two():
    corpus = D.generate_corpus(60, 4, seed=1, canvas=32, size_range=(8, 14))
    sets, phases = D.split_revised(corpus, [2, 2], seed=0)
    cache = D.ImageCache(corpus)
    plan = PhasePlan(sets, epochs=1, calibration_epochs=2, batch_size=8)
    m = DyQDETR(SMALL)
    run_incremental_step(m, phases[0], plan, 1, cache)
    store = ExemplarStore()
    store.add_phase(select_exemplars(risk_score(m, phases[0], 1, cache), 0.3), phases[0])
    run_incremental_step(m, phases[1], plan, 2, cache)
    store.add_phase(select_exemplars(risk_score(m, phases[1], 2, cache), 0.3), phases[1])
    return m, store, plan, cache, phases


def test_risk_scores_every_image_once(phase_two):
    m, _, _, cache, phases = phase_two
    recs = risk_score(m, phases[1], 2, cache)
    assert [r.image_id for r in recs] == phases[1].image_ids
    assert all(np.isfinite(r.risk) and r.risk > 0 and r.phase == 2 for r in recs)


def test_store_tracks_phases_and_round_trips(phase_two, tmp_path):
    _, store, _, _, phases = phase_two
    assert store.phases() == [1, 2]
    for e in store.entries:
        assert all(c in phases[e.phase - 1].class_set for c, _ in e.annotations)
    store.save(tmp_path / "s.json", "data/train.jsonl")
    again = ExemplarStore.load(tmp_path / "s.json")
    assert again.entries == store.entries
    (tmp_path / "bad.json").write_text('{"format": "x", "version": 1}')
    with pytest.raises(ValueError):
        ExemplarStore.load(tmp_path / "bad.json")


def test_calibration_supervises_each_exemplar_with_its_own_group(phase_two):
    m, store, _, cache, _ = phase_two
    loss = calibration_loss(m, store.entries, cache)
    assert np.isfinite(loss.item())
    # a label from another phase's classes must be rejected
    bad = store.for_phase(1)[0]
    wrong = type(bad)(bad.image_id, 2, bad.risk, bad.annotations)
    with pytest.raises(ValueError):
        calibration_loss(m, [wrong], cache)


def test_partial_calibration_trains_all_groups(phase_two):
    m, store, plan, cache, _ = phase_two
    c = m.copy()
    q1 = c.bank[1].embeddings.data.copy()
    partial_calibration(c, store, plan, cache)
    assert not any(g.frozen for g in c.bank)
    assert not np.array_equal(c.bank[1].embeddings.data, q1)
    same = m.copy()
    assert partial_calibration(same, ExemplarStore(), plan, cache) is same

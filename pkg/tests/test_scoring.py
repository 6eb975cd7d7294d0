import math

import numpy as np
import pytest

from eoslab import model as md
from eoslab import scenegen as sg
from eoslab import scoring as sc
from eoslab.errors import AlignmentError, ConfigError, LengthError


@pytest.fixture(scope="module")
def setup():
    vocab = sg.build_vocab(n_classes=8, n_attributes=6)
    pcfg = sg.PerceptionConfig(slots=4)
    cfg = md.ModelConfig(vocab_size=len(vocab), feature_dim=sg.feature_dim(vocab, pcfg),
                         scene_slots=4, n_layers=1, n_heads=2, d_model=16, d_ff=32, max_seq=40)
    model = md.init_params(cfg, seed=0)
    dataset = [sg.make_example(s, "full", sg.SceneConfig(n_objects=(1, 3)), pcfg, vocab)
               for s in range(12)]
    return vocab, model, dataset


def test_hand_computed_three_position_fixture():
    # labels (a, b, EOS) with p_EOS = (0.5, 0.25, 0.8)
    triple = sc.scores_from_p_eos([0.5, 0.25, 0.8], [10, 11, 1], eos_index=1)
    s_neg = -math.log(0.5) - math.log(0.75)
    s_pos = -math.log(0.8)
    assert triple.s_neg == pytest.approx(s_neg, rel=1e-12)
    assert triple.s_pos == pytest.approx(s_pos, rel=1e-12)
    assert triple.s_neg == pytest.approx(0.9808, abs=1e-4)
    assert triple.s_pos == pytest.approx(0.2231, abs=1e-4)
    assert triple.s_final == pytest.approx(0.7577, abs=1e-4)


def test_identity_s_final_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        p = rng.uniform(0.001, 0.999, size=n)
        labels = rng.integers(0, 5, size=n)
        t = sc.scores_from_p_eos(p, labels, eos_index=1)
        assert t.s_final == t.s_neg - t.s_pos
        assert t.s_pos >= 0.0 and t.s_neg >= 0.0


def test_saturated_probabilities_stay_finite():
    t = sc.scores_from_p_eos([1.0, 0.0], [1, 5], eos_index=1)
    assert t.s_pos == 0.0  # -log 1
    assert t.s_neg == 0.0  # -log(1 - 0)
    t2 = sc.scores_from_p_eos([0.0, 1.0], [1, 5], eos_index=1)
    assert math.isfinite(t2.s_pos) and math.isfinite(t2.s_neg)


def test_s_pos_depends_only_on_eos_positions():
    p = np.array([0.3, 0.6, 0.9])
    labels = [7, 1, 1]
    base = sc.scores_from_p_eos(p, labels, eos_index=1)
    p2 = p.copy()
    p2[0] = 0.05  # non-EOS position
    moved = sc.scores_from_p_eos(p2, labels, eos_index=1)
    assert moved.s_pos == base.s_pos
    assert moved.s_neg != base.s_neg
    p3 = p.copy()
    p3[2] = 0.2  # EOS position
    moved2 = sc.scores_from_p_eos(p3, labels, eos_index=1)
    assert moved2.s_neg == base.s_neg
    assert moved2.s_pos != base.s_pos


def test_score_example_matches_independent_recomputation(setup):
    vocab, model, dataset = setup
    ex = dataset[0]
    triple = sc.score_example(model, ex, vocab.eos)
    trace = md.forward(model, ex.features, ex.tokens)
    z = trace.logits
    p = np.exp(z[:, vocab.eos] - np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1)) - z.max(axis=1))
    expected = sc.scores_from_p_eos(p, ex.labels, vocab.eos)
    assert triple.s_pos == pytest.approx(expected.s_pos, rel=1e-9)
    assert triple.s_neg == pytest.approx(expected.s_neg, rel=1e-9)


def test_score_dataset_alignment_and_permutation(setup):
    vocab, model, dataset = setup
    scores = sc.score_dataset(model, dataset, vocab.eos, batch_size=5)
    assert len(scores) == len(dataset)
    singles = [sc.score_example(model, ex, vocab.eos) for ex in dataset]
    for a, b in zip(scores, singles):
        assert a.s_final == pytest.approx(b.s_final, rel=1e-9, abs=1e-12)
    perm = [7, 3, 0, 11, 5, 1, 2, 10, 4, 9, 6, 8]
    permuted = sc.score_dataset(model, [dataset[i] for i in perm], vocab.eos, batch_size=5)
    for i, j in enumerate(perm):
        assert permuted[i].s_final == pytest.approx(scores[j].s_final, rel=1e-9, abs=1e-12)


def test_score_dataset_empty_gives_empty():
    assert sc.score_dataset(None, [], eos_index=1) == []


def test_score_example_length_error(setup):
    vocab, model, dataset = setup
    ex = dataset[0]
    long_caption = ex.caption[:-1] * 20 + (vocab.eos,)
    bad = sg.Example(ex.scene, ex.features, long_caption, long_caption[1:], ex.detail_level)
    with pytest.raises(LengthError):
        sc.score_example(model, bad, vocab.eos)


def _triples(finals):
    return [sc.ScoreTriple(0.0, max(f, 0.0) + 1.0, f) for f in finals]


def test_filter_count_contract():
    data = list(range(100))
    scores = _triples(np.random.default_rng(1).normal(size=100))
    kept, removed = sc.filter_dataset(data, scores, sc.FilterPlan("top", 0.2))
    assert len(kept) == 80 and len(removed) == 20
    assert kept == [x for x in data if x not in set(removed)]  # original order kept


def test_filter_top_vs_reversed_disjoint():
    rng = np.random.default_rng(2)
    finals = rng.normal(size=60)
    assert len(set(np.round(finals, 12))) == 60
    data = list(range(60))
    scores = _triples(finals)
    _, top = sc.filter_dataset(data, scores, sc.FilterPlan("top", 0.3))
    _, rev = sc.filter_dataset(data, scores, sc.FilterPlan("reversed", 0.3))
    assert not (set(top) & set(rev))
    order = np.argsort(-finals)
    assert set(top) == set(order[:18].tolist())


def test_filter_monotone_in_ratio():
    rng = np.random.default_rng(3)
    scores = _triples(rng.normal(size=50))
    data = list(range(50))
    removed_sets = []
    for ratio in (0.1, 0.2, 0.3, 0.5, 0.7):
        _, removed = sc.filter_dataset(data, scores, sc.FilterPlan("top", ratio))
        removed_sets.append(set(removed))
    for small, big in zip(removed_sets, removed_sets[1:]):
        assert small <= big


def test_filter_ties_break_by_lower_index():
    scores = _triples([1.0, 1.0, 1.0, 0.0])
    _, removed = sc.filter_dataset(list(range(4)), scores, sc.FilterPlan("top", 0.5))
    assert removed == [0, 1]
    _, removed_rev = sc.filter_dataset(list(range(4)), scores, sc.FilterPlan("reversed", 0.5))
    assert removed_rev == [3, 0]


def test_filter_random_uses_seed():
    scores = _triples(np.zeros(30))
    data = list(range(30))
    _, r1 = sc.filter_dataset(data, scores, sc.FilterPlan("random", 0.2, seed=1))
    _, r2 = sc.filter_dataset(data, scores, sc.FilterPlan("random", 0.2, seed=1))
    _, r3 = sc.filter_dataset(data, scores, sc.FilterPlan("random", 0.2, seed=2))
    assert r1 == r2
    assert r1 != r3


def test_filter_plan_validation():
    with pytest.raises(ConfigError):
        sc.FilterPlan("top", 0.0)
    with pytest.raises(ConfigError):
        sc.FilterPlan("top", 1.0)
    with pytest.raises(ConfigError):
        sc.FilterPlan("weird", 0.2)
    with pytest.raises(AlignmentError):
        sc.filter_dataset([1, 2, 3], _triples([0.0]), sc.FilterPlan("top", 0.5))


def test_scores_roundtrip_exact(tmp_path, setup):
    vocab, model, dataset = setup
    scores = sc.score_dataset(model, dataset, vocab.eos)
    path = tmp_path / "scores.tsv"
    sc.save_scores(path, scores)
    loaded = sc.load_scores(path)
    assert len(loaded) == len(scores)
    for a, b in zip(loaded, scores):
        assert a.s_pos == b.s_pos and a.s_neg == b.s_neg and a.s_final == b.s_final


def test_score_histogram_shape():
    edges, counts = sc.score_histogram(np.random.default_rng(4).normal(size=500), bins=20)
    assert len(edges) == 21 and len(counts) == 20 and counts.sum() == 500

"""Per-example EOS-supervision scores under a reference model, and the
dataset filtering built on them.

s_pos sums the reference cross-entropy at EOS-labeled positions (data that
teaches stopping); s_neg sums -log(1 - p_EOS) at the other positions (data
that punishes a justified urge to stop). s_final = s_neg - s_pos ranks how
harmful an example is to the model's ability to end sequences.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import AlignmentError, ConfigError, LengthError
from .model import forward_batch, stable_softmax

P_CLAMP_EPS = 1e-12

FILTER_MODES = ("top", "random", "reversed")


@dataclass(frozen=True)
class ScoreTriple:
    s_pos: float
    s_neg: float
    s_final: float

    def __post_init__(self):
        if self.s_pos < 0 or self.s_neg < 0:
            raise ConfigError("s_pos and s_neg must be nonnegative")


@dataclass(frozen=True)
class FilterPlan:
    mode: str
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FILTER_MODES:
            raise ConfigError(f"unknown filter mode {self.mode!r}")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"filter ratio {self.ratio} outside (0, 1)")


def scores_from_p_eos(p_eos, labels, eos_index):
    """Scores from per-position EOS probabilities and labels.

    Each log argument is clamped away from 0 on the side where it could
    diverge, so a saturated model cannot produce infinite scores while
    p=1 at an EOS label still yields s_pos exactly 0 (and symmetrically
    p=0 off-label yields s_neg exactly 0).
    """
    p = np.asarray(p_eos, dtype=np.float64)
    labels = np.asarray(labels)
    if p.shape != labels.shape:
        raise AlignmentError("p_eos and labels lengths differ")
    is_eos = labels == eos_index
    s_pos = float(-(np.log(np.maximum(p[is_eos], P_CLAMP_EPS))).sum())
    s_neg = float(-(np.log1p(-np.minimum(p[~is_eos], 1.0 - P_CLAMP_EPS))).sum())
    return ScoreTriple(s_pos, s_neg, s_neg - s_pos)


def _p_eos_rows(model, feats, tokens, eos_index):
    logits, _ = forward_batch(model, feats, tokens)
    return stable_softmax(logits.data, axis=-1)[..., eos_index]


def score_example(ref_model, example, eos_index):
    """Single forward pass of the reference model over one example."""
    if len(example.tokens) > ref_model.cfg.max_seq:
        raise LengthError(f"example length {len(example.tokens)} exceeds max_seq")
    with ag.no_grad():
        p = _p_eos_rows(
            ref_model,
            np.asarray(example.features.tokens)[None, :, :],
            np.asarray(example.tokens)[None, :],
            eos_index,
        )[0]
    return scores_from_p_eos(p, example.labels, eos_index)


def score_dataset(ref_model, dataset, eos_index, batch_size=64):
    """Score every example; order-aligned with the input dataset."""
    out = []
    with ag.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start : start + batch_size]
            width = max(len(ex.tokens) for ex in chunk)
            if width > ref_model.cfg.max_seq:
                bad = start + max(range(len(chunk)), key=lambda i: len(chunk[i].tokens))
                raise LengthError(f"example {bad} exceeds max_seq {ref_model.cfg.max_seq}")
            feats = np.stack([ex.features.tokens for ex in chunk])
            tokens = np.zeros((len(chunk), width), dtype=np.int64)
            for i, ex in enumerate(chunk):
                tokens[i, : len(ex.tokens)] = ex.tokens
            p = _p_eos_rows(ref_model, feats, tokens, eos_index)
            for i, ex in enumerate(chunk):
                n = len(ex.labels)
                out.append(scores_from_p_eos(p[i, :n], ex.labels, eos_index))
    return out


def removal_order(scores, plan, n=None):
    """Indices slated for removal, worst-first under the plan's mode.

    Ties break toward the lower example index. `random` ignores scores and
    permutes indices by the plan's seed.
    """
    n = len(scores) if n is None else n
    if plan.mode == "random":
        rng = np.random.default_rng([plan.seed, 505])
        return [int(i) for i in rng.permutation(n)]
    finals = np.array([s.s_final for s in scores], dtype=np.float64)
    if plan.mode == "top":
        keys = sorted(range(n), key=lambda i: (-finals[i], i))
    else:
        keys = sorted(range(n), key=lambda i: (finals[i], i))
    return keys


def filter_dataset(dataset, scores, plan):
    """Drop ceil(ratio * N) examples; returns (kept, removed_indices).

    Kept examples stay in their original order; removed indices are listed
    in removal order (worst first).
    """
    if len(dataset) != len(scores):
        raise AlignmentError(f"dataset size {len(dataset)} != scores size {len(scores)}")
    n = len(dataset)
    k = math.ceil(plan.ratio * n)
    removed = removal_order(scores, plan, n)[:k]
    removed_set = set(removed)
    kept = [ex for i, ex in enumerate(dataset) if i not in removed_set]
    return kept, removed


def save_scores(path, scores):
    """Delimited text table: index, s_pos, s_neg, s_final."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index\ts_pos\ts_neg\ts_final\n")
        for i, s in enumerate(scores):
            fh.write(f"{i}\t{s.s_pos!r}\t{s.s_neg!r}\t{s.s_final!r}\n")


def load_scores(path):
    scores = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split("\t")
        if header != ["index", "s_pos", "s_neg", "s_final"]:
            raise ConfigError(f"{path} is not a score table")
        for line in fh:
            if not line.strip():
                continue
            _, s_pos, s_neg, s_final = line.rstrip("\n").split("\t")
            scores.append(ScoreTriple(float(s_pos), float(s_neg), float(s_final)))
    return scores


def score_histogram(values, bins=30):
    """Equal-width histogram of a score column, for distribution reports."""
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins)
    return edges, counts

"""Caption-against-scene hallucination metrics, plus omission analysis and
the truncation baseline.

Object extraction is exact-match on the one-token-per-class vocabulary;
scoring uses set semantics per caption, while average-count reporting keeps
the multiset.
"""

import math
from collections import Counter
from dataclasses import dataclass

from .errors import AlignmentError, ConfigError


@dataclass(frozen=True)
class EvalReport:
    chair_s: float
    chair_i: float
    recall: float
    mean_length: float
    n_captions: int

    def to_json(self):
        return {
            "chair_s": self.chair_s,
            "chair_i": self.chair_i,
            "recall": self.recall,
            "mean_length": self.mean_length,
            "n_captions": self.n_captions,
        }


@dataclass(frozen=True)
class OmissionReport:
    n_halluc_omitted: int
    n_correct_omitted: int
    halluc_rate_of_omission: float
    avg_correct_per_caption: float
    avg_halluc_per_caption: float

    def to_json(self):
        return {
            "n_halluc_omitted": self.n_halluc_omitted,
            "n_correct_omitted": self.n_correct_omitted,
            "halluc_rate_of_omission": self.halluc_rate_of_omission,
            "avg_correct_per_caption": self.avg_correct_per_caption,
            "avg_halluc_per_caption": self.avg_halluc_per_caption,
        }


def extract_objects(caption, vocab):
    """Multiset of object classes mentioned in a caption."""
    ids = set(vocab.object_ids)
    return Counter(t for t in caption if t in ids)


def caption_length(caption, vocab):
    """Token count excluding BOS and EOS."""
    return sum(1 for t in caption if t != vocab.bos and t != vocab.eos)


def chair_eval(captions, scenes, vocab):
    """Sentence- and instance-level hallucination rates plus recall.

    Per caption: hallucinated = mentioned classes absent from the scene,
    correct = mentioned ∩ scene. chair_s is the fraction of captions with
    at least one hallucination; chair_i is total hallucinated mentions over
    total mentions; recall is total correct over total scene objects.
    """
    if len(captions) != len(scenes):
        raise AlignmentError(f"{len(captions)} captions vs {len(scenes)} scenes")
    if not captions:
        raise AlignmentError("empty evaluation set")
    n_sentences_with_halluc = 0
    total_halluc = 0
    total_mentioned = 0
    total_correct = 0
    total_gt = 0
    total_length = 0
    for caption, scene in zip(captions, scenes):
        mentioned = set(extract_objects(caption, vocab))
        gt = scene.class_set()
        halluc = mentioned - gt
        correct = mentioned & gt
        if halluc:
            n_sentences_with_halluc += 1
        total_halluc += len(halluc)
        total_mentioned += len(mentioned)
        total_correct += len(correct)
        total_gt += len(gt)
        total_length += caption_length(caption, vocab)
    n = len(captions)
    return EvalReport(
        chair_s=n_sentences_with_halluc / n,
        chair_i=total_halluc / total_mentioned if total_mentioned else 0.0,
        recall=total_correct / total_gt if total_gt else 0.0,
        mean_length=total_length / n,
        n_captions=n,
    )


def truncate_baseline(captions, r_percent, vocab):
    """Keep the leading ceil(R% * length) content tokens, then close with EOS."""
    if not 0.0 < r_percent <= 100.0:
        raise ConfigError(f"truncation percentage {r_percent} outside (0, 100]")
    out = []
    for caption in captions:
        content = [t for t in caption if t != vocab.bos and t != vocab.eos]
        if content:
            keep = math.ceil(r_percent / 100.0 * len(content))
            content = content[:keep]
        out.append((vocab.bos, *content, vocab.eos))
    return out


def omission_analysis(base_captions, new_captions, scenes, vocab):
    """What a shorter-talking model dropped relative to a baseline model.

    An omitted object is mentioned by the base caption but not the new one;
    each is classified against the scene. Average per-caption object counts
    (multiset semantics) describe the new captions.
    """
    if not (len(base_captions) == len(new_captions) == len(scenes)):
        raise AlignmentError("caption/scene lists are not aligned")
    n_halluc_omitted = 0
    n_correct_omitted = 0
    total_correct_mentions = 0
    total_halluc_mentions = 0
    for base, new, scene in zip(base_captions, new_captions, scenes):
        gt = scene.class_set()
        omitted = set(extract_objects(base, vocab)) - set(extract_objects(new, vocab))
        n_halluc_omitted += sum(1 for c in omitted if c not in gt)
        n_correct_omitted += sum(1 for c in omitted if c in gt)
        for cls, count in extract_objects(new, vocab).items():
            if cls in gt:
                total_correct_mentions += count
            else:
                total_halluc_mentions += count
    n_omitted = n_halluc_omitted + n_correct_omitted
    n = len(scenes)
    return OmissionReport(
        n_halluc_omitted=n_halluc_omitted,
        n_correct_omitted=n_correct_omitted,
        halluc_rate_of_omission=n_halluc_omitted / n_omitted if n_omitted else 0.0,
        avg_correct_per_caption=total_correct_mentions / n if n else 0.0,
        avg_halluc_per_caption=total_halluc_mentions / n if n else 0.0,
    )

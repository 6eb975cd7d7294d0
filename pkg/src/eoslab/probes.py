"""Analysis instruments: attention-saliency information flow and
context-manipulation probes of the model's stopping tendency.

Saliency is |A * dL/dA| per layer (head-averaged): the attention weight
times the loss gradient flowing through it, a first-order estimate of how
much the prediction at the target position draws from each context token.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError
from .model import forward, forward_batch, stable_softmax
from .scenegen import gen_scene, render_features

_TAG_PROBE = 606

MANIPULATION_MODES = ("none", "image_minus", "image_plus", "image_replace", "text_minus")

# incremental noising schedule: variance ramps linearly over a fixed horizon
NOISE_BETA_MIN = 1e-4
NOISE_BETA_MAX = 0.02
NOISE_HORIZON = 1000


@dataclass(frozen=True)
class Manipulation:
    mode: str = "none"
    noise_steps: int = 500
    mask_prefix_len: int = 0  # 0 = scale to 25% of the caption's content
    aux_seed: int = 0

    def __post_init__(self):
        if self.mode not in MANIPULATION_MODES:
            raise ConfigError(f"unknown manipulation mode {self.mode!r}")
        if self.noise_steps < 0:
            raise ConfigError("noise_steps must be >= 0")
        if self.mask_prefix_len < 0:
            raise ConfigError("mask_prefix_len must be >= 0")


@dataclass(frozen=True)
class ProbeContext:
    """A manipulated forward-pass context; text tokens are never altered."""

    features: np.ndarray        # [slots', feature_dim]
    key_visible: np.ndarray | None  # [slots' + T] bool, None = all visible


@dataclass
class SaliencyReport:
    layers: np.ndarray          # [L, C, C] nonnegative
    scene_slots: int
    prev_range: tuple           # global [start, stop) covering previous sentences
    cur_range: tuple            # global [start, stop) covering the current sentence
    target_row: int             # context row whose prediction we analyze
    target_pos: int             # caption index of the predicted token
    tokens: tuple               # exposed text tokens (starts with BOS)
    period_token: int


@dataclass
class TendencyCurve:
    points: tuple               # ((relative position, mean p_EOS), ...) per bucket
    counts: tuple               # samples per bucket
    fit_a: float                # p ~ a * exp(b * x), log-linear least squares
    fit_b: float
    fit_residual: float


def target_loss(model, example, target_pos, attn_override=None):
    """Cross-entropy of predicting caption[target_pos] from the prefix.

    Exposed separately so the saliency backward pass can be checked against
    finite differences on the attention matrices.
    """
    if not 1 <= target_pos < len(example.caption):
        raise ConfigError(f"target_pos {target_pos} out of range")
    tokens = example.caption[:target_pos]
    trace = forward(model, example.features, tokens, attn_override=attn_override)
    labels = np.zeros(len(tokens), dtype=np.int64)
    labels[-1] = example.caption[target_pos]
    weights = np.zeros(len(tokens))
    weights[-1] = 1.0
    mask = np.ones((1, len(tokens), trace.logits.shape[-1]), dtype=bool)
    node = ag.masked_cross_entropy(trace.logits_node, labels[None, :], mask, weights[None, :])
    return node, trace


def segment_text(caption, target_pos, period_token, eos_token):
    """Split the exposed text into previous sentences and current sentence.

    Text-local coordinates over caption[:target_pos]; BOS (position 0)
    belongs to neither segment. When the target is EOS the current sentence
    is the last complete one; otherwise it is the one in progress.
    """
    periods = [i for i in range(1, target_pos) if caption[i] == period_token]
    if caption[target_pos] == eos_token:
        cur_start = periods[-2] + 1 if len(periods) >= 2 else 1
    else:
        cur_start = periods[-1] + 1 if periods else 1
    return (1, cur_start), (cur_start, target_pos)


def saliency(model, example, target_pos, period_token, eos_token):
    """Head-averaged |A * dL/dA| per layer for one prediction target."""
    model.zero_grad()
    node, trace = target_loss(model, example, target_pos)
    ag.backward(node)
    layers = []
    for a in trace.attn_nodes:
        grad = np.zeros_like(a.data) if a.grad is None else a.grad
        layers.append(np.abs(a.data * grad)[0].mean(axis=0))
    layers = np.stack(layers)
    model.zero_grad()
    s = trace.scene_slots
    prev, cur = segment_text(example.caption, target_pos, period_token, eos_token)
    return SaliencyReport(
        layers=layers,
        scene_slots=s,
        prev_range=(s + prev[0], s + prev[1]),
        cur_range=(s + cur[0], s + cur[1]),
        target_row=s + target_pos - 1,
        target_pos=target_pos,
        tokens=tuple(example.caption[:target_pos]),
        period_token=period_token,
    )


def flow_proportions(report):
    """Per-layer share of the target row's incoming flow from (scene,
    previous sentences, current sentence); rows normalize to 1."""
    s = report.scene_slots
    p0, p1 = report.prev_range
    c0, c1 = report.cur_range
    out = np.zeros((report.layers.shape[0], 3))
    for l, mat in enumerate(report.layers):
        row = mat[report.target_row]
        parts = np.array([row[:s].sum(), row[p0:p1].sum(), row[c0:c1].sum()])
        total = parts.sum()
        if total > 0:
            out[l] = parts / total
    return out


def aggregation_pattern(report):
    """Per-layer mean flow (others→periods, periods→target, among others),
    normalized across the three categories.

    Categories run over text positions only; means are over causally valid
    ordered pairs.
    """
    s = report.scene_slots
    c = report.layers.shape[-1]
    text = list(range(s, c))
    target = report.target_row
    periods = [s + i for i, t in enumerate(report.tokens) if t == report.period_token and s + i != target]
    others = [i for i in text if i != target and i not in periods]
    out = np.zeros((report.layers.shape[0], 3))
    for l, mat in enumerate(report.layers):
        o2p = [mat[p, o] for p in periods for o in others if o < p]
        p2t = [mat[target, p] for p in periods]
        o2o = [mat[i, j] for i in others for j in others if j < i]
        parts = np.array([
            float(np.mean(o2p)) if o2p else 0.0,
            float(np.mean(p2t)) if p2t else 0.0,
            float(np.mean(o2o)) if o2o else 0.0,
        ])
        total = parts.sum()
        if total > 0:
            out[l] = parts / total
    return out


def _noise_beta(step):
    t = min(step, NOISE_HORIZON)
    return NOISE_BETA_MIN + (NOISE_BETA_MAX - NOISE_BETA_MIN) * (t - 1) / (NOISE_HORIZON - 1)


def manipulate(example, m, vocab, scene_cfg, pcfg, rng):
    """Apply one context manipulation; text length is never altered."""
    feats = np.array(example.features.tokens, dtype=np.float64)
    if m.mode == "none":
        return ProbeContext(feats, None)
    if m.mode == "image_minus":
        x = feats
        for step in range(1, m.noise_steps + 1):
            beta = _noise_beta(step)
            x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * pcfg.degrade_scale * rng.standard_normal(x.shape)
        return ProbeContext(x, None)
    if m.mode in ("image_plus", "image_replace"):
        aux_seed = int(rng.integers(0, 2**31 - 1))
        aux_scene = gen_scene(aux_seed, scene_cfg, vocab)
        aux = np.array(render_features(aux_scene, pcfg, vocab).tokens, dtype=np.float64)
        if m.mode == "image_plus":
            return ProbeContext(np.concatenate([feats, aux], axis=0), None)
        return ProbeContext(aux, None)
    # text_minus: hide a text prefix from attention, keeping BOS anchored
    n_text = len(example.tokens)
    k = m.mask_prefix_len if m.mask_prefix_len > 0 else math.ceil(0.25 * (n_text - 1))
    k = min(k, n_text - 1)
    visible = np.ones(feats.shape[0] + n_text, dtype=bool)
    visible[feats.shape[0] + 1 : feats.shape[0] + 1 + k] = False
    return ProbeContext(feats, visible)


def sentence_end_positions(tokens, period_token):
    """Input positions whose next-token distribution follows a period."""
    return [i for i, t in enumerate(tokens) if t == period_token]


def sample_non_eos_target(example, vocab, rng, window=10):
    """A content-token target from the tail of the last sentence.

    Mirrors the EOS target's context: all previous sentences are exposed
    plus part of the final one. The sentence-initial article is excluded so
    at least one current-sentence token is visible.
    """
    periods = [i for i, t in enumerate(example.caption) if t == vocab.period]
    if not periods:
        raise ConfigError("caption has no sentences to sample a target from")
    start = periods[-2] + 1 if len(periods) >= 2 else 1
    candidates = list(range(start + 1, periods[-1] + 1))
    candidates = candidates[-window:]
    return int(rng.choice(candidates))


def tendency_curve(model, dataset, m, vocab, scene_cfg, pcfg,
                   n_buckets=10, limit=500, batch_size=64):
    """Mean p_EOS at post-period positions, bucketed by relative position.

    The i-th of an example's N post-period targets lands at x = i/N in
    (0, 1]. Bucket means get a log-linear exponential fit p ~ a*exp(b*x).
    """
    if not dataset:
        raise ConfigError("tendency_curve needs a nonempty dataset")
    examples = dataset[:limit]
    sums = np.zeros(n_buckets)
    counts = np.zeros(n_buckets, dtype=np.int64)
    with ag.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            contexts = []
            for j, ex in enumerate(chunk):
                rng = np.random.default_rng([m.aux_seed, _TAG_PROBE, start + j])
                contexts.append(manipulate(ex, m, vocab, scene_cfg, pcfg, rng))
            width = max(len(ex.tokens) for ex in chunk)
            slots = contexts[0].features.shape[0]
            feats = np.stack([c.features for c in contexts])
            tokens = np.zeros((len(chunk), width), dtype=np.int64)
            visible = np.ones((len(chunk), slots + width), dtype=bool)
            for i, (ex, c) in enumerate(zip(chunk, contexts)):
                tokens[i, : len(ex.tokens)] = ex.tokens
                if c.key_visible is not None:
                    visible[i, : len(c.key_visible)] = c.key_visible
            logits, _ = forward_batch(model, feats, tokens, key_visible=visible)
            p_eos = stable_softmax(logits.data, axis=-1)[..., vocab.eos]
            for i, ex in enumerate(chunk):
                targets = sentence_end_positions(ex.tokens, vocab.period)
                n = len(targets)
                for rank, pos in enumerate(targets, start=1):
                    x = rank / n
                    bucket = min(int(math.ceil(x * n_buckets)) - 1, n_buckets - 1)
                    sums[bucket] += p_eos[i, pos]
                    counts[bucket] += 1
    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    centers = (np.arange(n_buckets) + 0.5) / n_buckets
    valid = counts > 0
    if valid.sum() >= 2:
        slope, intercept = np.polyfit(centers[valid], np.log(means[valid]), 1)
        resid = float(np.sum((np.log(means[valid]) - (slope * centers[valid] + intercept)) ** 2))
        fit_a, fit_b = float(np.exp(intercept)), float(slope)
    else:
        fit_a, fit_b, resid = float("nan"), float("nan"), float("nan")
    points = tuple((float(cx), float(mu)) for cx, mu in zip(centers, means))
    return TendencyCurve(points, tuple(int(c) for c in counts), fit_a, fit_b, resid)

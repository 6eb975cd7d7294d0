"""Adam training loop with periodic tracking of the model's EOS behavior.

Loss reduction is mean-over-positions per example, then mean over the
batch, so captions of different lengths weigh equally. The tracked signals
are the mean EOS log-likelihood at EOS-labeled positions and the mean EOS
probability at sentence-end (post-period) positions.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import objectives as obj
from .errors import ConfigError, TrainingDivergence
from .model import forward_batch, stable_softmax

_TAG_SHUFFLE = 808


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_interval: int = 50
    probe_size: int = 64  # examples measured by track_eos

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")

    def to_json(self):
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "beta1": self.beta1, "beta2": self.beta2, "adam_eps": self.adam_eps,
            "seed": self.seed, "log_interval": self.log_interval, "probe_size": self.probe_size,
        }


@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    eos_steps: list = field(default_factory=list)
    eos_logll: list = field(default_factory=list)
    eos_p: list = field(default_factory=list)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("kind\tstep\tvalue_a\tvalue_b\n")
            for s, l in zip(self.steps, self.losses):
                fh.write(f"loss\t{s}\t{l!r}\t\n")
            for s, ll, p in zip(self.eos_steps, self.eos_logll, self.eos_p):
                fh.write(f"eos\t{s}\t{ll!r}\t{p!r}\n")

    @classmethod
    def load(cls, path):
        log = cls()
        with open(path, encoding="utf-8") as fh:
            fh.readline()
            for line in fh:
                kind, step, a, b = line.rstrip("\n").split("\t")
                if kind == "loss":
                    log.steps.append(int(step))
                    log.losses.append(float(a))
                else:
                    log.eos_steps.append(int(step))
                    log.eos_logll.append(float(a))
                    log.eos_p.append(float(b))
        return log


class Adam:
    """Plain Adam with bias correction; state keyed by parameter name."""

    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in model.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in model.params.items()}

    def step(self):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name in sorted(self.model.params):
            p = self.model.params[name]
            g = p.grad
            if g is None:
                continue
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - c.lr * mhat / (np.sqrt(vhat) + c.adam_eps)


def pad_batch(examples):
    """Stack features/tokens/labels with right padding and loss weights.

    Weights are 1/(example length * batch size) on real positions, 0 on
    padding, implementing the per-example-mean-then-batch-mean reduction.
    """
    b = len(examples)
    width = max(len(ex.tokens) for ex in examples)
    feats = np.stack([ex.features.tokens for ex in examples])
    tokens = np.zeros((b, width), dtype=np.int64)
    labels = np.zeros((b, width), dtype=np.int64)
    weights = np.zeros((b, width))
    for i, ex in enumerate(examples):
        n = len(ex.tokens)
        tokens[i, :n] = ex.tokens
        labels[i, :n] = ex.labels
        weights[i, :n] = 1.0 / (n * b)
    return feats, tokens, labels, weights


def batch_loss(model, examples, ordinals, spec, eos_index):
    """Forward + objective on a padded batch; returns the loss node."""
    feats, tokens, labels, weights = pad_batch(examples)
    logits, _ = forward_batch(model, feats, tokens)
    selective = obj.selective_positions_for_batch(spec, labels, ordinals, eos_index)
    selective &= weights > 0
    mask = obj.allowed_mask(labels, eos_index, model.cfg.vocab_size, selective)
    return ag.masked_cross_entropy(logits, labels, mask, weights)


def track_eos(model, examples, vocab):
    """(mean log p_EOS at EOS-labeled positions, mean p_EOS after periods).

    Read-only measurement over a fixed probe batch.
    """
    if not examples:
        raise ConfigError("track_eos needs a nonempty batch")
    feats, tokens, labels, weights = pad_batch(examples)
    with ag.no_grad():
        logits, _ = forward_batch(model, feats, tokens)
    p_eos = stable_softmax(logits.data, axis=-1)[..., vocab.eos]
    valid = weights > 0
    at_eos = valid & (labels == vocab.eos)
    at_period = valid & (tokens == vocab.period)
    logll = float(np.log(np.clip(p_eos[at_eos], 1e-300, None)).mean()) if at_eos.any() else float("nan")
    p_end = float(p_eos[at_period].mean()) if at_period.any() else float("nan")
    return logll, p_end


def train(model, dataset, spec, tcfg, vocab, log=None):
    """Run the training loop in place; returns the TrainingLog."""
    if not dataset:
        raise ConfigError("training dataset is empty")
    log = log if log is not None else TrainingLog()
    probe = dataset[: tcfg.probe_size]
    opt = Adam(model, tcfg)
    step = 0
    order = np.arange(len(dataset))
    indexed = list(enumerate(dataset))
    for epoch in range(tcfg.epochs):
        rng = np.random.default_rng([tcfg.seed, _TAG_SHUFFLE, epoch])
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), tcfg.batch_size):
            picks = [indexed[i] for i in order[start : start + tcfg.batch_size]]
            ordinals = [i for i, _ in picks]
            examples = [ex for _, ex in picks]
            model.zero_grad()
            loss = batch_loss(model, examples, ordinals, spec, vocab.eos)
            if not np.isfinite(loss.item()):
                raise TrainingDivergence(f"non-finite loss at step {step}")
            ag.backward(loss)
            opt.step()
            if step % tcfg.log_interval == 0:
                logll, p_end = track_eos(model, probe, vocab)
                log.eos_steps.append(step)
                log.eos_logll.append(logll)
                log.eos_p.append(p_end)
            log.steps.append(step)
            log.losses.append(loss.item())
            step += 1
    logll, p_end = track_eos(model, probe, vocab)
    log.eos_steps.append(step)
    log.eos_logll.append(logll)
    log.eos_p.append(p_end)
    model.zero_grad()
    return log

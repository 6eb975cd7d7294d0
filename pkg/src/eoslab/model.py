"""Tiny causal transformer over a scene-feature prefix plus caption tokens.

The feature rows are projected and prepended to the token embeddings, and a
single causal mask runs over the concatenated context, so one attention
matrix per layer/head covers scene-to-text and text-to-text flow alike.
Everything runs in float64 on the autograd engine in :mod:`eoslab.autograd`.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, LengthError, NumericError

_TAG_INIT = 7001

CHECKPOINT_FORMAT = "eoslab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int
    scene_slots: int
    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_seq: int = 48

    def __post_init__(self):
        counts = {
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "scene_slots": self.scene_slots,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "max_seq": self.max_seq,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_json(self):
        return {
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "scene_slots": self.scene_slots,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "max_seq": self.max_seq,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class Model:
    """Config plus named parameter tensors; the unit that checkpoints."""

    cfg: ModelConfig
    params: dict

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def param_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def copy(self):
        return Model(self.cfg, {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.params.items()})


def init_spec(cfg):
    """Ordered {name: (shape, std)} table for the scaled-normal init.

    std 0 means an all-zero tensor; layer-norm gains are the exception and
    start at one. Output-side projections inside residual branches get the
    usual 1/sqrt(2 * n_layers) shrink.
    """
    d, dff = cfg.d_model, cfg.d_ff
    res = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    spec = {
        "tok_emb": ((cfg.vocab_size, d), d**-0.5),
        "pos_emb": ((cfg.max_seq, d), d**-0.5),
        "feat_w": ((cfg.feature_dim, d), cfg.feature_dim**-0.5),
        "feat_b": ((d,), 0.0),
    }
    for l in range(cfg.n_layers):
        spec[f"l{l}.ln1_g"] = ((d,), 0.0)
        spec[f"l{l}.ln1_b"] = ((d,), 0.0)
        for w in ("wq", "wk", "wv"):
            spec[f"l{l}.attn_{w}"] = ((d, d), d**-0.5)
        spec[f"l{l}.attn_wo"] = ((d, d), d**-0.5 * res)
        for b in ("bq", "bk", "bv", "bo"):
            spec[f"l{l}.attn_{b}"] = ((d,), 0.0)
        spec[f"l{l}.ln2_g"] = ((d,), 0.0)
        spec[f"l{l}.ln2_b"] = ((d,), 0.0)
        spec[f"l{l}.ffn_w1"] = ((d, dff), d**-0.5)
        spec[f"l{l}.ffn_b1"] = ((dff,), 0.0)
        spec[f"l{l}.ffn_w2"] = ((dff, d), dff**-0.5 * res)
        spec[f"l{l}.ffn_b2"] = ((d,), 0.0)
    spec["ln_f_g"] = ((d,), 0.0)
    spec["ln_f_b"] = ((d,), 0.0)
    # vocabulary projection is bias-free: any end-of-sequence propensity has
    # to be carried by context features, never by a context-blind bias
    spec["out_w"] = ((d, cfg.vocab_size), d**-0.5)
    return spec


def init_params(cfg, seed):
    """Deterministic scaled-normal initialization; returns a Model."""
    rng = np.random.default_rng([seed, _TAG_INIT])
    params = {}
    for name, (shape, std) in init_spec(cfg).items():
        if std == 0.0:
            data = np.ones(shape) if name.endswith(("ln1_g", "ln2_g", "ln_f_g")) else np.zeros(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(cfg, params)


@dataclass
class ForwardTrace:
    """Logits, attention maps, and graph handles from one forward pass."""

    logits: np.ndarray        # [T, vocab]
    attn: np.ndarray          # [layers, heads, ctx, ctx]
    scene_slots: int
    tokens: tuple
    logits_node: Tensor = field(repr=False, default=None)
    attn_nodes: list = field(repr=False, default=None)


def _context_mask(total, key_visible=None):
    """Boolean allowed-mask [B?, 1, C, C]: causal plus optional hidden keys."""
    causal = np.tril(np.ones((total, total), dtype=bool))
    if key_visible is None:
        return causal[None, None, :, :]
    allowed = causal[None, :, :] & key_visible[:, None, :]
    return allowed[:, None, :, :]


def forward_batch(model, feats, tokens, key_visible=None, attn_override=None):
    """Batched forward pass.

    feats: [B, S, feature_dim]; tokens: int [B, T] (right-padded rows are
    fine, causality keeps them out of earlier positions). Returns
    (logits Tensor [B, T, V], list of per-layer attention Tensors
    [B, H, S+T, S+T]).
    """
    cfg = model.cfg
    p = model.params
    feats = np.asarray(feats, dtype=np.float64)
    tokens = np.asarray(tokens)
    B, T = tokens.shape
    S = feats.shape[1]
    if T > cfg.max_seq:
        raise LengthError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    if feats.shape[2] != cfg.feature_dim:
        raise ConfigError(f"feature dim {feats.shape[2]} != model feature_dim {cfg.feature_dim}")
    C = S + T

    scene = ag.matmul(Tensor(feats), p["feat_w"]) + p["feat_b"]            # [B,S,D]
    emb = ag.rows(p["tok_emb"], tokens) + ag.rows(p["pos_emb"], np.arange(T))
    x = ag.concat([scene, emb], axis=1)                                    # [B,C,D]

    allowed = _context_mask(C, key_visible)
    attns = []
    H, Dh = cfg.n_heads, cfg.d_head
    for l in range(cfg.n_layers):
        h = ag.layer_norm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
        q = ag.matmul(h, p[f"l{l}.attn_wq"]) + p[f"l{l}.attn_bq"]
        k = ag.matmul(h, p[f"l{l}.attn_wk"]) + p[f"l{l}.attn_bk"]
        v = ag.matmul(h, p[f"l{l}.attn_wv"]) + p[f"l{l}.attn_bv"]
        q = ag.transpose(ag.reshape(q, (B, C, H, Dh)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(k, (B, C, H, Dh)), (0, 2, 1, 3))
        v = ag.transpose(ag.reshape(v, (B, C, H, Dh)), (0, 2, 1, 3))
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (Dh**-0.5)
        if attn_override is not None and attn_override[l] is not None:
            a = ag.as_tensor(attn_override[l])
            if a.data.shape[-2:] != (C, C):
                raise ConfigError("attention override shape mismatch")
            if a.data.ndim == 3:
                a = ag.reshape(a, (1, H, C, C))
        else:
            a = ag.masked_softmax(scores, allowed)
        attns.append(a)
        o = ag.matmul(a, v)
        o = ag.reshape(ag.transpose(o, (0, 2, 1, 3)), (B, C, cfg.d_model))
        x = x + (ag.matmul(o, p[f"l{l}.attn_wo"]) + p[f"l{l}.attn_bo"])
        h = ag.layer_norm(x, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        h = ag.matmul(ag.gelu(ag.matmul(h, p[f"l{l}.ffn_w1"]) + p[f"l{l}.ffn_b1"]), p[f"l{l}.ffn_w2"])
        x = x + (h + p[f"l{l}.ffn_b2"])
    x = ag.layer_norm(x, p["ln_f_g"], p["ln_f_b"])
    xt = ag.narrow(x, 1, S, T)
    logits = ag.matmul(xt, p["out_w"])
    return logits, attns


def forward(model, features, tokens, key_visible=None, attn_override=None):
    """Single-example forward pass returning a ForwardTrace.

    `features` may be a FeatureGrid or a raw [S, feature_dim] array (probes
    hand in manipulated grids). `key_visible`, when given, is a boolean
    [S+T] mask of context positions other positions may attend to.
    """
    feats = getattr(features, "tokens", features)
    feats = np.asarray(feats, dtype=np.float64)[None, :, :]
    tok = np.asarray(tokens)[None, :]
    kv = None if key_visible is None else np.asarray(key_visible, dtype=bool)[None, :]
    logits, attns = forward_batch(model, feats, tok, key_visible=kv, attn_override=attn_override)
    attn = np.stack([a.data[0] for a in attns])
    return ForwardTrace(
        logits=logits.data[0],
        attn=attn,
        scene_slots=feats.shape[1],
        tokens=tuple(int(t) for t in tokens),
        logits_node=logits,
        attn_nodes=attns,
    )


def loss_and_grads(model, features, tokens, labels, objective, eos_index, ordinal=0):
    """Loss plus reverse-mode gradients for every parameter tensor.

    Parameters untouched by the computation get exact-zero gradient arrays.
    """
    from . import objectives as obj

    model.zero_grad()
    trace = forward(model, features, tokens)
    loss = obj.evaluate(objective, trace, labels, eos_index, ordinal=ordinal)
    if not np.isfinite(loss.value):
        raise NumericError(f"non-finite loss {loss.value}")
    ag.backward(loss.node)
    grads = {}
    for name, t in model.params.items():
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
    return loss.value, grads


def stable_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def eos_probability(trace, positions, eos_index):
    """Full-vocabulary softmax at each position; EOS entry returned."""
    rows = np.asarray(trace.logits)[list(positions)]
    return [float(p) for p in stable_softmax(rows, axis=-1)[:, eos_index]]


@dataclass(frozen=True)
class DecodeConfig:
    """Greedy decoding; length_penalty adds penalty*t to the EOS logit at
    decode step t (t starts at 1), exponential in probability space."""

    max_len: int = 40
    length_penalty: float = 0.0


def generate_batch(model, feats, dcfg, vocab):
    """Greedy-decode a batch of scenes; returns one caption per row.

    feats: [B, S, feature_dim]. Captions start with BOS and include a final
    EOS only if the model emitted one before max_len tokens.
    """
    feats = np.asarray(feats, dtype=np.float64)
    B = feats.shape[0]
    seqs = np.full((B, 1), vocab.bos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    ended = np.zeros(B, dtype=bool)
    limit = min(dcfg.max_len, model.cfg.max_seq - 1)
    with ag.no_grad():
        for t in range(1, limit + 1):
            logits, _ = forward_batch(model, feats, seqs)
            step = logits.data[:, -1, :].copy()
            step[:, vocab.eos] += dcfg.length_penalty * t
            nxt = step.argmax(axis=-1)
            nxt[done] = vocab.eos
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            ended |= (~done) & (nxt == vocab.eos)
            done = done | (nxt == vocab.eos)
            if done.all():
                break
    out = []
    for b in range(B):
        row = [int(x) for x in seqs[b]]
        if vocab.eos in row:
            row = row[: row.index(vocab.eos) + 1]
        out.append(tuple(row))
    return out


def generate(model, features, dcfg, vocab):
    feats = getattr(features, "tokens", features)
    return generate_batch(model, np.asarray(feats)[None, :, :], dcfg, vocab)[0]


def save_checkpoint(path, model):
    """JSON header line + raw little-endian float64 tensor bytes.

    Byte-stable for identical models: names are sorted and no timestamps or
    environment details are written.
    """
    names = sorted(model.params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_json(),
        "tensors": [{"name": n, "shape": list(model.params[n].data.shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path} is not a checkpoint file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig.from_json(header["config"])
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ConfigError(f"checkpoint truncated at tensor {entry['name']}")
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            params[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
    expected = set(init_spec(cfg))
    if set(params) != expected:
        raise ConfigError("checkpoint tensor names do not match the architecture")
    return Model(cfg, params)

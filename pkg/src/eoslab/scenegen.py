"""Synthetic scenes, perception-limited feature grids, and templated captions.

A scene is a handful of attributed objects with per-object salience. Rendering
turns it into a fixed grid of feature rows; objects below the perception
threshold are replaced by pure noise, which is the lever that lets captions
deliberately describe more than the features can support.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, GenerationError

# rng stream tags, so the same seed never feeds two different draws
_TAG_SCENE = 101
_TAG_FEATURES = 202
_TAG_CAPTION = 303
_TAG_MIXTURE = 404

DETAIL_LEVELS = ("perceivable_only", "full", "over_detailed")

_CLASS_WORDS = (
    "cube", "ball", "cone", "disk", "ring", "rod", "slab", "tile",
    "bowl", "cup", "fork", "lamp", "book", "shoe", "drum", "bell",
    "kite", "boat", "cart", "gear", "vase", "coin", "dice", "pipe",
    "star", "leaf", "shell", "brick", "chair", "table", "plant", "clock",
)
_ATTR_WORDS = (
    "red", "blue", "green", "gray", "pink", "gold", "teal", "black",
    "white", "brown", "small", "large", "tiny", "huge", "shiny", "dull",
    "round", "flat", "rough", "smooth", "dark", "pale", "striped", "dotted",
)


@dataclass(frozen=True)
class Vocab:
    """Token inventory: specials, one token per object class and attribute."""

    tokens: tuple
    bos: int
    eos: int
    period: int
    article: int
    object_ids: tuple
    attribute_ids: tuple

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocab tokens must be unique")
        if len({self.bos, self.eos, self.period}) != 3:
            raise ConfigError("BOS, EOS and PERIOD must be distinct")

    def __len__(self):
        return len(self.tokens)

    def index(self, token):
        return self.tokens.index(token)

    def decode(self, ids):
        return " ".join(self.tokens[i] for i in ids)


def build_vocab(n_classes=32, n_attributes=24):
    if not (1 <= n_classes <= len(_CLASS_WORDS)):
        raise ConfigError(f"n_classes must be in [1, {len(_CLASS_WORDS)}]")
    if not (1 <= n_attributes <= len(_ATTR_WORDS)):
        raise ConfigError(f"n_attributes must be in [1, {len(_ATTR_WORDS)}]")
    specials = ("<bos>", "<eos>", ".", "a")
    classes = _CLASS_WORDS[:n_classes]
    attrs = _ATTR_WORDS[:n_attributes]
    tokens = specials + classes + attrs
    base = len(specials)
    return Vocab(
        tokens=tokens,
        bos=0,
        eos=1,
        period=2,
        article=3,
        object_ids=tuple(range(base, base + n_classes)),
        attribute_ids=tuple(range(base + n_classes, base + n_classes + n_attributes)),
    )


@dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    attributes: tuple
    salience: float

    def __post_init__(self):
        if not 0.0 <= self.salience <= 1.0:
            raise ConfigError(f"salience {self.salience} outside [0, 1]")


@dataclass(frozen=True)
class Scene:
    objects: tuple
    seed: int

    def class_set(self):
        return {o.class_id for o in self.objects}


@dataclass(frozen=True)
class SceneConfig:
    n_objects: tuple = (2, 5)
    attrs_per_object: tuple = (1, 1)
    # when set, the first object's salience is drawn from [anchor, 1] so every
    # scene keeps at least one clearly visible subject; None = pure uniform
    anchor_salience: float | None = None
    # order slots most-salient-first, like confidence-ranked detector output
    sort_by_salience: bool = False

    def validate(self, vocab):
        lo, hi = self.n_objects
        if not (0 <= lo <= hi):
            raise ConfigError(f"bad object-count range {self.n_objects}")
        if hi > len(vocab.object_ids):
            raise ConfigError("object-count range exceeds distinct classes in vocab")
        alo, ahi = self.attrs_per_object
        if not (0 <= alo <= ahi <= len(vocab.attribute_ids)):
            raise ConfigError(f"bad attrs-per-object range {self.attrs_per_object}")
        if self.anchor_salience is not None and not 0.0 <= self.anchor_salience <= 1.0:
            raise ConfigError(f"anchor_salience {self.anchor_salience} outside [0, 1]")


@dataclass(frozen=True)
class PerceptionConfig:
    """How scenes render to features and how far captions may overreach."""

    threshold: float = 0.45
    slots: int = 6
    feature_noise: float = 0.05
    degrade_scale: float = 1.0
    distractors: tuple = (1, 3)
    # describe objects in a seed-determined random order instead of slot
    # order, so coverage must be judged from content, not position
    shuffle_caption: bool = False

    def validate(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        if self.slots < 1:
            raise ConfigError("slots must be >= 1")
        dlo, dhi = self.distractors
        if not (0 <= dlo <= dhi):
            raise ConfigError(f"bad distractor range {self.distractors}")


@dataclass(frozen=True)
class FeatureGrid:
    tokens: np.ndarray          # [slots, feature_dim]
    perceivable_mask: np.ndarray  # [slots] bool


@dataclass(frozen=True)
class Example:
    scene: Scene
    features: FeatureGrid
    caption: tuple               # BOS ... EOS
    labels: tuple                # caption shifted left by one
    detail_level: str

    @property
    def tokens(self):
        """Model input: the caption without its final token."""
        return self.caption[:-1]


def feature_dim(vocab, pcfg=None):
    """Class dims + attribute dims + slot-position dims.

    Slot-position indicators play the role of positional encoding for the
    feature rows; they survive degradation untouched so slot identity stays
    readable even when content does not.
    """
    slots = PerceptionConfig().slots if pcfg is None else pcfg.slots
    return len(vocab.object_ids) + len(vocab.attribute_ids) + slots


def gen_scene(seed, cfg, vocab):
    """Deterministic scene draw: distinct classes, uniform salience."""
    cfg.validate(vocab)
    rng = np.random.default_rng([seed, _TAG_SCENE])
    lo, hi = cfg.n_objects
    n = int(rng.integers(lo, hi + 1))
    class_ids = rng.choice(vocab.object_ids, size=n, replace=False)
    objects = []
    for i, cid in enumerate(class_ids):
        alo, ahi = cfg.attrs_per_object
        k = int(rng.integers(alo, ahi + 1))
        attrs = tuple(int(a) for a in rng.choice(vocab.attribute_ids, size=k, replace=False))
        salience = float(rng.uniform(0.0, 1.0))
        if i == 0 and cfg.anchor_salience is not None:
            salience = cfg.anchor_salience + (1.0 - cfg.anchor_salience) * salience
        objects.append(ObjectInstance(int(cid), attrs, salience))
    if cfg.sort_by_salience:
        objects.sort(key=lambda o: -o.salience)
    return Scene(tuple(objects), seed)


def render_features(scene, pcfg, vocab):
    """Render a scene into feature rows, degrading sub-threshold objects.

    Perceivable objects get a class/attribute indicator vector plus small
    noise; imperceptible ones have their content dims replaced by pure
    Gaussian noise, so the row keeps its shape but carries no signal. The
    slot-position dims stay clean on every row (degradation hits content,
    not layout) and empty slots carry only their position indicator.
    """
    pcfg.validate()
    if len(scene.objects) > pcfg.slots:
        raise ConfigError(f"scene has {len(scene.objects)} objects but only {pcfg.slots} slots")
    n_classes = len(vocab.object_ids)
    content_dim = n_classes + len(vocab.attribute_ids)
    rng = np.random.default_rng([scene.seed, _TAG_FEATURES])
    grid = np.zeros((pcfg.slots, content_dim + pcfg.slots))
    mask = np.zeros(pcfg.slots, dtype=bool)
    for i, obj in enumerate(scene.objects):
        if obj.salience >= pcfg.threshold:
            row = np.zeros(content_dim)
            row[obj.class_id - vocab.object_ids[0]] = 1.0
            for a in obj.attributes:
                row[n_classes + a - vocab.attribute_ids[0]] = 1.0
            grid[i, :content_dim] = row + rng.normal(0.0, pcfg.feature_noise, size=content_dim)
            mask[i] = True
        else:
            grid[i, :content_dim] = rng.normal(0.0, pcfg.degrade_scale, size=content_dim)
    grid[:, content_dim:] = np.eye(pcfg.slots)
    grid.setflags(write=False)
    mask.setflags(write=False)
    return FeatureGrid(grid, mask)


def _sentence(obj, vocab):
    for a in obj.attributes:
        if a not in vocab.attribute_ids:
            raise GenerationError(f"attribute token {a} not in vocab")
    if obj.class_id not in vocab.object_ids:
        raise GenerationError(f"class token {obj.class_id} not in vocab")
    return (vocab.article,) + tuple(obj.attributes) + (obj.class_id, vocab.period)


def gen_caption(scene, detail_level, vocab, pcfg, distractors=None):
    """One templated sentence per described object, terminated by EOS.

    perceivable_only covers objects above threshold; full covers every
    object; over_detailed additionally invents sentences about classes
    absent from the scene.
    """
    if detail_level not in DETAIL_LEVELS:
        raise ConfigError(f"unknown detail level {detail_level!r}")
    pcfg.validate()
    if detail_level == "perceivable_only":
        described = [o for o in scene.objects if o.salience >= pcfg.threshold]
    else:
        described = list(scene.objects)
    rng = np.random.default_rng([scene.seed, _TAG_CAPTION])
    sentences = [_sentence(obj, vocab) for obj in described]
    if detail_level == "over_detailed":
        if distractors is None:
            dlo, dhi = pcfg.distractors
            distractors = int(rng.integers(dlo, dhi + 1))
        present = scene.class_set()
        absent = [c for c in vocab.object_ids if c not in present]
        if distractors > 0 and not absent:
            raise GenerationError("no absent classes left to invent distractor sentences")
        for _ in range(distractors):
            cid = int(rng.choice(absent))
            attr = int(rng.choice(vocab.attribute_ids))
            sentences.append(_sentence(ObjectInstance(cid, (attr,), 0.0), vocab))
    if pcfg.shuffle_caption and len(sentences) > 1:
        order = rng.permutation(len(sentences))
        sentences = [sentences[i] for i in order]
    parts = [vocab.bos]
    for sentence in sentences:
        parts.extend(sentence)
    parts.append(vocab.eos)
    return tuple(parts)


def make_example(seed, detail_level, scene_cfg, pcfg, vocab):
    scene = gen_scene(seed, scene_cfg, vocab)
    features = render_features(scene, pcfg, vocab)
    caption = gen_caption(scene, detail_level, vocab, pcfg)
    return Example(scene, features, caption, caption[1:], detail_level)


@dataclass(frozen=True)
class DatasetConfig:
    """One dataset split: `size` scenes seeded from `seed_start` upward."""

    size: int
    seed_start: int
    mixture: dict = field(default_factory=lambda: {"perceivable_only": 0.4, "full": 0.3, "over_detailed": 0.3})
    scene: SceneConfig = SceneConfig()
    perception: PerceptionConfig = PerceptionConfig()

    def validate(self, vocab):
        if self.size <= 0:
            raise ConfigError("dataset size must be > 0")
        if not self.mixture:
            raise ConfigError("mixture must be nonempty")
        for level, w in self.mixture.items():
            if level not in DETAIL_LEVELS:
                raise ConfigError(f"unknown detail level {level!r} in mixture")
            if w < 0:
                raise ConfigError("mixture weights must be >= 0")
        if sum(self.mixture.values()) <= 0:
            raise ConfigError("mixture weights sum to 0")
        self.scene.validate(vocab)
        self.perception.validate()

    def seed_range(self):
        return (self.seed_start, self.seed_start + self.size)


def check_disjoint_seeds(a, b):
    """Config error if two splits share any scene seed."""
    lo_a, hi_a = a.seed_range()
    lo_b, hi_b = b.seed_range()
    if max(lo_a, lo_b) < min(hi_a, hi_b):
        raise ConfigError(f"seed ranges overlap: [{lo_a},{hi_a}) vs [{lo_b},{hi_b})")


def build_dataset(dcfg, vocab):
    """Materialize a split; pure function of (config, vocab)."""
    dcfg.validate(vocab)
    levels = sorted(dcfg.mixture)
    weights = np.array([dcfg.mixture[l] for l in levels], dtype=np.float64)
    weights = weights / weights.sum()
    rng = np.random.default_rng([dcfg.seed_start, _TAG_MIXTURE])
    picks = rng.choice(len(levels), size=dcfg.size, p=weights)
    return [
        make_example(dcfg.seed_start + i, levels[int(picks[i])], dcfg.scene, dcfg.perception, vocab)
        for i in range(dcfg.size)
    ]


def _vocab_to_json(vocab):
    return {
        "tokens": list(vocab.tokens),
        "n_classes": len(vocab.object_ids),
        "n_attributes": len(vocab.attribute_ids),
    }


def _vocab_from_json(obj):
    vocab = build_vocab(obj["n_classes"], obj["n_attributes"])
    if list(vocab.tokens) != obj["tokens"]:
        raise ConfigError("dataset vocab does not match this build's word lists")
    return vocab


def _dcfg_to_json(dcfg):
    return {
        "size": dcfg.size,
        "seed_start": dcfg.seed_start,
        "mixture": dict(sorted(dcfg.mixture.items())),
        "scene": {
            "n_objects": list(dcfg.scene.n_objects),
            "attrs_per_object": list(dcfg.scene.attrs_per_object),
            "anchor_salience": dcfg.scene.anchor_salience,
            "sort_by_salience": dcfg.scene.sort_by_salience,
        },
        "perception": {
            "threshold": dcfg.perception.threshold,
            "slots": dcfg.perception.slots,
            "feature_noise": dcfg.perception.feature_noise,
            "degrade_scale": dcfg.perception.degrade_scale,
            "distractors": list(dcfg.perception.distractors),
            "shuffle_caption": dcfg.perception.shuffle_caption,
        },
    }


def _dcfg_from_json(obj):
    return DatasetConfig(
        size=obj["size"],
        seed_start=obj["seed_start"],
        mixture=dict(obj["mixture"]),
        scene=SceneConfig(
            n_objects=tuple(obj["scene"]["n_objects"]),
            attrs_per_object=tuple(obj["scene"]["attrs_per_object"]),
            anchor_salience=obj["scene"].get("anchor_salience"),
            sort_by_salience=obj["scene"].get("sort_by_salience", False),
        ),
        perception=PerceptionConfig(
            threshold=obj["perception"]["threshold"],
            slots=obj["perception"]["slots"],
            feature_noise=obj["perception"]["feature_noise"],
            degrade_scale=obj["perception"]["degrade_scale"],
            distractors=tuple(obj["perception"]["distractors"]),
            shuffle_caption=obj["perception"].get("shuffle_caption", False),
        ),
    )


def save_dataset(path, examples, dcfg, vocab):
    """Line-delimited records under a self-describing header.

    Feature grids are never stored; they are recomputed from scene +
    perception config on load.
    """
    header = {
        "format": "eoslab-dataset",
        "version": 1,
        "config": _dcfg_to_json(dcfg),
        "vocab": _vocab_to_json(vocab),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            rec = {
                "seed": ex.scene.seed,
                "detail_level": ex.detail_level,
                "objects": [
                    {"class_id": o.class_id, "attributes": list(o.attributes), "salience": o.salience}
                    for o in ex.scene.objects
                ],
                "caption": list(ex.caption),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path):
    """Returns (examples, dataset config, vocab)."""
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "eoslab-dataset":
            raise ConfigError(f"{path} is not a dataset file")
        if header.get("version") != 1:
            raise ConfigError(f"unsupported dataset version {header.get('version')}")
        vocab = _vocab_from_json(header["vocab"])
        dcfg = _dcfg_from_json(header["config"])
        examples = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            objects = tuple(
                ObjectInstance(o["class_id"], tuple(o["attributes"]), o["salience"])
                for o in rec["objects"]
            )
            scene = Scene(objects, rec["seed"])
            caption = tuple(rec["caption"])
            examples.append(
                Example(scene, render_features(scene, dcfg.perception, vocab),
                        caption, caption[1:], rec["detail_level"])
            )
    return examples, dcfg, vocab


def with_examples(dcfg, n):
    """Config for a same-flavored split truncated/extended to n examples."""
    return replace(dcfg, size=n)

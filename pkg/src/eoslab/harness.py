"""Experiment orchestration: dataset building, training runs, scoring and
filtering, probes, evaluation, and report emission.

Every run is a pure function of its config dict; artifacts land in the
config's out_dir next to a manifest carrying the config hash, seed, and
package version, so reruns are byte-comparable.
"""

import hashlib
import json
import os
from dataclasses import replace

import numpy as np

from . import __version__
from . import svgplot
from .errors import ConfigError
from .hallmetrics import chair_eval, omission_analysis, truncate_baseline
from .model import (DecodeConfig, ModelConfig, generate_batch, init_params,
                    load_checkpoint, save_checkpoint)
from .objectives import ObjectiveSpec
from .probes import (Manipulation, MANIPULATION_MODES, aggregation_pattern,
                     flow_proportions, saliency, sample_non_eos_target,
                     tendency_curve)
from .scenegen import (DatasetConfig, PerceptionConfig, SceneConfig,
                       build_dataset, build_vocab, check_disjoint_seeds,
                       feature_dim, load_dataset, save_dataset)
from .scoring import FilterPlan, filter_dataset, load_scores, save_scores, score_dataset, score_histogram
from .training import TrainConfig, TrainingLog, train

RUN_KINDS = (
    "train_mle", "train_selective", "train_combined", "further_train",
    "score", "filter", "probe_saliency", "probe_tendency",
    "probe_aggregation", "eval",
)

_TAG_TARGETS = 909


def config_hash(config):
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _manifest(out_dir, config, artifacts):
    _write_json(os.path.join(out_dir, "manifest.json"), {
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("seed", 0),
        "version": __version__,
        "artifacts": sorted(artifacts),
    })


def _dataset_config_from_json(section, shared):
    return DatasetConfig(
        size=section["size"],
        seed_start=section["seed_start"],
        mixture=section.get("mixture", {"perceivable_only": 0.4, "full": 0.3, "over_detailed": 0.3}),
        scene=SceneConfig(
            n_objects=tuple(shared.get("scene", {}).get("n_objects", (2, 5))),
            attrs_per_object=tuple(shared.get("scene", {}).get("attrs_per_object", (1, 1))),
            anchor_salience=shared.get("scene", {}).get("anchor_salience"),
            sort_by_salience=shared.get("scene", {}).get("sort_by_salience", False),
        ),
        perception=PerceptionConfig(
            threshold=shared.get("perception", {}).get("threshold", 0.45),
            slots=shared.get("perception", {}).get("slots", 6),
            feature_noise=shared.get("perception", {}).get("feature_noise", 0.05),
            degrade_scale=shared.get("perception", {}).get("degrade_scale", 1.0),
            distractors=tuple(shared.get("perception", {}).get("distractors", (1, 3))),
            shuffle_caption=shared.get("perception", {}).get("shuffle_caption", False),
        ),
    )


def build_datasets(config):
    """`dataset build`: materialize train and eval splits with disjoint seeds."""
    vocab_cfg = config.get("vocab", {})
    vocab = build_vocab(vocab_cfg.get("n_classes", 32), vocab_cfg.get("n_attributes", 24))
    train_cfg = _dataset_config_from_json(config["train"], config)
    eval_cfg = _dataset_config_from_json(config["eval"], config)
    check_disjoint_seeds(train_cfg, eval_cfg)
    out_train, out_eval = config["out_train"], config["out_eval"]
    for path, dcfg in ((out_train, train_cfg), (out_eval, eval_cfg)):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        save_dataset(path, build_dataset(dcfg, vocab), dcfg, vocab)
    return {"out_train": out_train, "out_eval": out_eval}


def _model_config(model_section, vocab, pcfg):
    return ModelConfig(
        vocab_size=len(vocab),
        feature_dim=feature_dim(vocab, pcfg),
        scene_slots=pcfg.slots,
        n_layers=model_section.get("n_layers", 3),
        n_heads=model_section.get("n_heads", 4),
        d_model=model_section.get("d_model", 64),
        d_ff=model_section.get("d_ff", 128),
        max_seq=model_section.get("max_seq", 48),
    )


def _train_config(section, seed):
    return TrainConfig(
        epochs=section.get("epochs", 3),
        batch_size=section.get("batch_size", 16),
        lr=section.get("lr", 3e-3),
        seed=seed,
        log_interval=section.get("log_interval", 50),
        probe_size=section.get("probe_size", 64),
    )


def _objective(config):
    section = config.get("objective", {})
    kind = section.get("kind")
    if kind is None:
        kind = {"train_mle": "mle", "train_selective": "selective", "train_combined": "combined"}.get(config["kind"])
    if kind is None:
        raise ConfigError("objective.kind is required for further_train")
    return ObjectiveSpec(kind=kind, combine_ratio=section.get("combine_ratio", 1.0))


def _run_training(config, out_dir):
    examples, dcfg, vocab = load_dataset(config["train_data"])
    seed = config.get("seed", 0)
    tcfg = _train_config(config.get("train", {}), seed)
    if config["kind"] == "further_train":
        model = load_checkpoint(config["init_from"])
    else:
        model = init_params(_model_config(config.get("model", {}), vocab, dcfg.perception), seed)
    spec = _objective(config)
    log = train(model, examples, spec, tcfg, vocab)
    ckpt = os.path.join(out_dir, "checkpoint.ckpt")
    save_checkpoint(ckpt, model)
    log_path = os.path.join(out_dir, "training_log.tsv")
    log.save(log_path)
    emit_training_plot(out_dir, log)
    _manifest(out_dir, config, ["checkpoint.ckpt", "training_log.tsv", "training.svg", "training.tsv"])
    return {"checkpoint": ckpt, "log": log_path, "final_loss": log.losses[-1]}


def _run_score(config, out_dir):
    examples, _, vocab = load_dataset(config["data"])
    model = load_checkpoint(config["checkpoint"])
    scores = score_dataset(model, examples, vocab.eos)
    path = os.path.join(out_dir, "scores.tsv")
    save_scores(path, scores)
    emit_score_plots(out_dir, scores)
    _manifest(out_dir, config, ["scores.tsv"] + [f"score_dist_{k}.{e}" for k in ("pos", "neg", "final") for e in ("svg", "tsv")])
    return {"scores": path, "n": len(scores)}


def _run_filter(config, out_dir):
    examples, dcfg, vocab = load_dataset(config["data"])
    scores = load_scores(config["scores"])
    plan = FilterPlan(
        mode=config.get("mode", "top"),
        ratio=config.get("ratio", 0.2),
        seed=config.get("seed", 0),
    )
    kept, removed = filter_dataset(examples, scores, plan)
    out_data = os.path.join(out_dir, "filtered.jsonl")
    save_dataset(out_data, kept, replace(dcfg, size=len(kept)), vocab)
    _write_json(os.path.join(out_dir, "filter_manifest.json"), {
        "source": config["data"],
        "mode": plan.mode,
        "ratio": plan.ratio,
        "seed": plan.seed,
        "removed_indices": sorted(removed),
        "n_kept": len(kept),
    })
    _manifest(out_dir, config, ["filtered.jsonl", "filter_manifest.json"])
    return {"filtered": out_data, "n_removed": len(removed)}


def _probe_inputs(config):
    examples, dcfg, vocab = load_dataset(config["data"])
    model = load_checkpoint(config["checkpoint"])
    limit = config.get("sample", 500)
    return examples, dcfg, vocab, model, limit


def _run_probe_saliency(config, out_dir):
    """Mean per-layer flow proportions for EOS targets vs content targets."""
    examples, dcfg, vocab, model, limit = _probe_inputs(config)
    eligible = [ex for ex in examples if sum(1 for t in ex.caption if t == vocab.period) >= 1]
    eligible = eligible[:limit]
    if not eligible:
        raise ConfigError("no multi-token captions to probe")
    sums = {"eos": None, "non_eos": None}
    counts = {"eos": 0, "non_eos": 0}
    for i, ex in enumerate(eligible):
        rng = np.random.default_rng([config.get("seed", 0), _TAG_TARGETS, i])
        for name, pos in (("eos", len(ex.caption) - 1),
                          ("non_eos", sample_non_eos_target(ex, vocab, rng))):
            report = saliency(model, ex, pos, vocab.period, vocab.eos)
            props = flow_proportions(report)
            sums[name] = props if sums[name] is None else sums[name] + props
            counts[name] += 1
    table = {name: sums[name] / counts[name] for name in sums}
    emit_flow_plot(out_dir, table)
    # the structured table doubles as the plot's data sibling
    path = os.path.join(out_dir, "saliency_flow.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("target\tlayer\tfrom_scene\tfrom_prev_sentences\tfrom_current_sentence\n")
        for name in ("eos", "non_eos"):
            for l, row in enumerate(table[name]):
                fh.write(f"{name}\t{l}\t{row[0]!r}\t{row[1]!r}\t{row[2]!r}\n")
    _manifest(out_dir, config, ["saliency_flow.tsv", "saliency_flow.svg"])
    return {"table": path, "n": counts["eos"]}


def _run_probe_aggregation(config, out_dir):
    examples, dcfg, vocab, model, limit = _probe_inputs(config)
    eligible = [ex for ex in examples if sum(1 for t in ex.caption if t == vocab.period) >= 1][:limit]
    if not eligible:
        raise ConfigError("no captions to probe")
    total = None
    for ex in eligible:
        report = saliency(model, ex, len(ex.caption) - 1, vocab.period, vocab.eos)
        pattern = aggregation_pattern(report)
        total = pattern if total is None else total + pattern
    table = total / len(eligible)
    layers = list(range(table.shape[0]))
    svgplot.line_chart(
        os.path.join(out_dir, "aggregation.svg"),
        [(name, layers, list(table[:, i])) for i, name in
         enumerate(("others_to_periods", "periods_to_target", "among_others"))],
        title="information aggregation by layer", xlabel="layer", ylabel="share of flow",
    )
    path = os.path.join(out_dir, "aggregation.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer\tothers_to_periods\tperiods_to_target\tamong_others\n")
        for l, row in enumerate(table):
            fh.write(f"{l}\t{row[0]!r}\t{row[1]!r}\t{row[2]!r}\n")
    _manifest(out_dir, config, ["aggregation.tsv", "aggregation.svg"])
    return {"table": path, "n": len(eligible)}


def _run_probe_tendency(config, out_dir):
    examples, dcfg, vocab, model, limit = _probe_inputs(config)
    modes = config.get("modes", list(MANIPULATION_MODES))
    section = config.get("manipulation", {})
    curves = {}
    for mode in modes:
        if mode not in MANIPULATION_MODES:
            raise ConfigError(f"unknown manipulation mode {mode!r}")
        m = Manipulation(
            mode=mode,
            noise_steps=section.get("noise_steps", 500),
            mask_prefix_len=section.get("mask_prefix_len", 0),
            aux_seed=section.get("aux_seed", config.get("seed", 0)),
        )
        curves[mode] = tendency_curve(model, examples, m, vocab, dcfg.scene, dcfg.perception, limit=limit)
    emit_tendency_plot(out_dir, curves)
    path = os.path.join(out_dir, "tendency.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("mode\trel_position\tmean_p_eos\tcount\tfit_a\tfit_b\tfit_residual\n")
        for mode, curve in curves.items():
            for (x, mu), c in zip(curve.points, curve.counts):
                fh.write(f"{mode}\t{x!r}\t{mu!r}\t{c}\t{curve.fit_a!r}\t{curve.fit_b!r}\t{curve.fit_residual!r}\n")
    _manifest(out_dir, config, ["tendency.tsv", "tendency.svg"])
    return {"table": path, "curves": {m: c.fit_b for m, c in curves.items()}}


def _run_eval(config, out_dir):
    examples, dcfg, vocab = load_dataset(config["data"])
    model = load_checkpoint(config["checkpoint"])
    decode = DecodeConfig(
        max_len=config.get("decode", {}).get("max_len", 40),
        length_penalty=config.get("decode", {}).get("length_penalty", 0.0),
    )
    captions = []
    step = config.get("decode_batch", 64)
    for start in range(0, len(examples), step):
        chunk = examples[start : start + step]
        feats = np.stack([ex.features.tokens for ex in chunk])
        captions.extend(generate_batch(model, feats, decode, vocab))
    if config.get("truncate") is not None:
        captions = truncate_baseline(captions, config["truncate"], vocab)
    scenes = [ex.scene for ex in examples]
    report = chair_eval(captions, scenes, vocab).to_json()
    report["config_hash"] = config_hash(config)
    report["seed"] = config.get("seed", 0)
    report["checkpoint"] = config["checkpoint"]
    report["decode"] = {"max_len": decode.max_len, "length_penalty": decode.length_penalty}
    if config.get("base_captions"):
        base = _load_captions(config["base_captions"])
        report["omission"] = omission_analysis(base, captions, scenes, vocab).to_json()
    cap_path = os.path.join(out_dir, "captions.jsonl")
    with open(cap_path, "w", encoding="utf-8") as fh:
        for cap in captions:
            fh.write(json.dumps(list(cap)) + "\n")
    report_path = os.path.join(out_dir, "eval_report.json")
    _write_json(report_path, report)
    _manifest(out_dir, config, ["captions.jsonl", "eval_report.json"])
    return {"report": report_path, "captions": cap_path, **{k: report[k] for k in ("chair_s", "chair_i", "recall", "mean_length")}}


def _load_captions(path):
    captions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                captions.append(tuple(json.loads(line)))
    return captions


def run(config):
    """Dispatch one experiment described by a config dict."""
    kind = config.get("kind")
    if kind not in RUN_KINDS:
        raise ConfigError(f"unknown run kind {kind!r}")
    out_dir = config.get("out_dir")
    if not out_dir:
        raise ConfigError("out_dir is required")
    os.makedirs(out_dir, exist_ok=True)
    if kind in ("train_mle", "train_selective", "train_combined", "further_train"):
        return _run_training(config, out_dir)
    if kind == "score":
        return _run_score(config, out_dir)
    if kind == "filter":
        return _run_filter(config, out_dir)
    if kind == "probe_saliency":
        return _run_probe_saliency(config, out_dir)
    if kind == "probe_aggregation":
        return _run_probe_aggregation(config, out_dir)
    if kind == "probe_tendency":
        return _run_probe_tendency(config, out_dir)
    return _run_eval(config, out_dir)


def emit_training_plot(out_dir, log):
    svgplot.line_chart(
        os.path.join(out_dir, "training.svg"),
        [
            ("loss", log.steps, log.losses),
            ("eos_log_likelihood", log.eos_steps, log.eos_logll),
            ("p_eos_at_sentence_end", log.eos_steps, log.eos_p),
        ],
        title="training curves", xlabel="step", ylabel="value",
    )


def emit_tendency_plot(out_dir, curves):
    series = []
    for mode, curve in curves.items():
        xs = [x for x, _ in curve.points]
        ys = [mu for _, mu in curve.points]
        series.append((mode, xs, ys))
    svgplot.line_chart(
        os.path.join(out_dir, "tendency.svg"), series,
        title="EOS tendency by relative position", xlabel="relative position", ylabel="mean p_EOS",
    )


def emit_flow_plot(out_dir, table):
    series = []
    for name in ("eos", "non_eos"):
        layers = list(range(table[name].shape[0]))
        series.append((f"{name}:scene", layers, list(table[name][:, 0])))
        series.append((f"{name}:prev", layers, list(table[name][:, 1])))
        series.append((f"{name}:current", layers, list(table[name][:, 2])))
    svgplot.line_chart(
        os.path.join(out_dir, "saliency_flow.svg"), series,
        title="information flow to target", xlabel="layer", ylabel="share of flow",
    )


def emit_score_plots(out_dir, scores):
    for name, values in (("pos", [s.s_pos for s in scores]),
                         ("neg", [s.s_neg for s in scores]),
                         ("final", [s.s_final for s in scores])):
        edges, counts = score_histogram(values)
        svgplot.bar_chart(
            os.path.join(out_dir, f"score_dist_{name}.svg"), edges, counts,
            title=f"s_{name} distribution", xlabel=f"s_{name}",
        )


def emit_reports(run_dir):
    """`report`: regenerate plots from the artifacts already in run_dir."""
    emitted = []
    log_path = os.path.join(run_dir, "training_log.tsv")
    if os.path.exists(log_path):
        emit_training_plot(run_dir, TrainingLog.load(log_path))
        emitted.append("training.svg")
    scores_path = os.path.join(run_dir, "scores.tsv")
    if os.path.exists(scores_path):
        emit_score_plots(run_dir, load_scores(scores_path))
        emitted.append("score_dist_*.svg")
    tendency_path = os.path.join(run_dir, "tendency.tsv")
    if os.path.exists(tendency_path):
        curves = _load_tendency(tendency_path)
        emit_tendency_plot(run_dir, curves)
        emitted.append("tendency.svg")
    return emitted


def _load_tendency(path):
    from .probes import TendencyCurve

    rows = {}
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            mode, x, mu, c, fa, fb, fr = line.rstrip("\n").split("\t")
            rows.setdefault(mode, []).append((float(x), float(mu), int(c), float(fa), float(fb), float(fr)))
    curves = {}
    for mode, entries in rows.items():
        points = tuple((x, mu) for x, mu, *_ in entries)
        counts = tuple(c for _, _, c, *_ in entries)
        fa, fb, fr = entries[0][3], entries[0][4], entries[0][5]
        curves[mode] = TendencyCurve(points, counts, fa, fb, fr)
    return curves

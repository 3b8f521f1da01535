"""End-to-end orchestration: synth -> train (per loss) -> extract ->
plda-train -> evaluate -> det-plot, with one root seed split per stage and
a manifest recording the resolved configuration.

Every stage reads and writes files under the output directory, so a rerun
with the same configuration reproduces every artifact byte for byte (the
manifest timestamp aside).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time

import numpy as np

from . import backend as backend_mod
from . import evaluation as eval_mod
from . import features as features_mod
from . import net as net_mod
from . import plotting
from . import synthdata
from . import trainer as trainer_mod
from .errors import StageError

log = logging.getLogger("spkver.pipeline")

try:
    from importlib.metadata import version as _pkg_version
    _VERSION = _pkg_version("spkver")
except Exception:  # pragma: no cover - not installed
    _VERSION = "unknown"

DEFAULT_CONFIG = {
    "root_seed": 0,
    "losses": ["softmax", "asoftmax", "triplet"],
    "backends": ["cosine", "euclidean", "plda"],
    "protocol": "equal-duration",
    "durations": [300],
    "enroll_frames": 3000,
    "plda_iters": 10,
    "plda_max_chunks": 4000,
}

_LIST_KEYS = {"losses", "backends", "durations"}
_INT_KEYS = {"root_seed", "enroll_frames", "plda_iters", "plda_max_chunks"}


def parse_pipeline_config(text: str) -> dict:
    """Key-value pipeline config. synth_train_* / synth_eval_* keys fill the
    two generator specs, train_* keys the shared training config."""
    cfg = dict(DEFAULT_CONFIG)
    synth_train, synth_eval, train_kv = [], [], []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = line.split(None, 1)
        value = value.strip()
        if key.startswith("synth_train_"):
            synth_train.append(f"{key[len('synth_train_'):]} {value}")
        elif key.startswith("synth_eval_"):
            synth_eval.append(f"{key[len('synth_eval_'):]} {value}")
        elif key.startswith("train_"):
            train_kv.append(f"{key[len('train_'):]} {value}")
        elif key in _LIST_KEYS:
            items = [v.strip() for v in value.split(",") if v.strip()]
            cfg[key] = [int(v) for v in items] if key == "durations" else items
        elif key in _INT_KEYS:
            cfg[key] = int(value)
        elif key == "protocol":
            cfg[key] = value
        else:
            raise ValueError(f"unknown pipeline config key {key!r}")
    cfg["synth_train"] = synthdata.spec_from_text("\n".join(synth_train))
    cfg["synth_eval"] = synthdata.spec_from_text("\n".join(synth_eval))
    cfg["train"] = trainer_mod.config_from_text("\n".join(train_kv))
    return cfg


def read_pipeline_config(path: str) -> dict:
    with open(path) as fh:
        return parse_pipeline_config(fh.read())


def _stage(name):
    def wrap(fn, *args, **kwargs):
        log.info("stage %s", name)
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(name, exc) from exc
    return wrap


def pipeline_run(config: dict, out_dir: str) -> dict:
    """Execute every stage; returns a summary dict (also written to the
    manifest). Any stage failure raises StageError naming the stage."""
    losses = config["losses"]
    backends = config["backends"]
    durations = config["durations"]
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("data", "models", "emb", "plda", "scores", "reports", "plots"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    root = np.random.SeedSequence(config["root_seed"])
    seed_names = ["synth_train", "synth_eval", "trials", "extract", "evaluate"] + [
        f"train_{loss}" for loss in losses]
    children = root.spawn(len(seed_names))
    seeds = {name: child for name, child in zip(seed_names, children)}
    seed_ints = {name: int(child.generate_state(1)[0])
                 for name, child in seeds.items()}

    train_fea = os.path.join(out_dir, "data", "train.fea")
    eval_fea = os.path.join(out_dir, "data", "eval.fea")

    def synth_stage():
        spec_t = dataclasses.replace(
            config["synth_train"], seed=seed_ints["synth_train"])
        spec_e = dataclasses.replace(
            config["synth_eval"], seed=seed_ints["synth_eval"])
        features_mod.write_feature_archive(train_fea, synthdata.generate(spec_t))
        features_mod.write_feature_archive(eval_fea, synthdata.generate(spec_e))

    _stage("synth")(synth_stage)

    train_feats = _stage("load-train")(
        features_mod.read_feature_archive, train_fea)
    eval_feats = _stage("load-eval")(
        features_mod.read_feature_archive, eval_fea)

    speakers: dict[str, list[str]] = {}
    for f in eval_feats:
        speakers.setdefault(f.speaker_id, []).append(f.utterance_id)
    trial_set = _stage("trials")(
        eval_mod.make_trials, speakers,
        np.random.default_rng(seeds["trials"]))
    eval_mod.write_trials(os.path.join(out_dir, "scores", "trials.txt"),
                          trial_set.trials)

    summary: dict = {"eer": {}, "reports": {}}
    for loss in losses:
        cfg = dataclasses.replace(
            config["train"], loss=loss, seed=seed_ints[f"train_{loss}"])
        model_dir = os.path.join(out_dir, "models", loss)
        ckpt = _stage(f"train-{loss}")(
            trainer_mod.train, cfg, train_feats, model_dir)
        model_path = os.path.join(out_dir, "models", f"{loss}.net")
        net_mod.save_model(model_path, ckpt.params, ckpt.head, loss,
                           ckpt.label_map)

        plda_model = None
        if "plda" in backends:
            def fit_plda():
                rng = np.random.default_rng(seeds["extract"])
                chunk_embs = trainer_mod.extract_chunk_embeddings(
                    ckpt.params, train_feats, rng,
                    chunk_frames=config["train"].chunk_frames,
                    max_chunks=config["plda_max_chunks"])
                backend_mod.write_embedding_archive(
                    os.path.join(out_dir, "emb", f"{loss}_chunks.emb"),
                    chunk_embs)
                center = np.mean([e.vec for e in chunk_embs], axis=0)
                normalized = [backend_mod.length_normalize(e, center)
                              for e in chunk_embs]
                model = backend_mod.plda_train(normalized,
                                               iters=config["plda_iters"])
                model.center = center
                backend_mod.save_plda(
                    os.path.join(out_dir, "plda", f"{loss}.plda"), model)
                return model

            plda_model = _stage(f"plda-{loss}")(fit_plda)

        report = _stage(f"evaluate-{loss}")(
            eval_mod.run_protocol, config["protocol"], durations,
            ckpt.params, eval_feats, trial_set, backends,
            np.random.default_rng(seeds["evaluate"]),
            plda_model=plda_model, enroll_frames=config["enroll_frames"])

        report_path = os.path.join(out_dir, "reports", f"{loss}.csv")
        with open(report_path, "w") as fh:
            fh.write(report.to_csv())
        summary["reports"][loss] = report_path
        for (b, d), score_set in report.score_sets.items():
            eval_mod.write_scores(
                os.path.join(out_dir, "scores", f"{loss}_{b}_{d}.txt"),
                score_set)
        for (b, d), curve in report.curves.items():
            eval_mod.write_det_csv(
                os.path.join(out_dir, "reports", f"det_{loss}_{b}_{d}.csv"),
                curve)
        for (b, d), value in report.eer.items():
            summary["eer"][f"{loss}_{b}_{d}"] = value

    def plot_stage():
        for d in durations:
            paths = []
            for loss in losses:
                for b in backends:
                    p = os.path.join(out_dir, "reports", f"det_{loss}_{b}_{d}.csv")
                    if os.path.exists(p):
                        paths.append(p)
            if paths:
                plotting.det_plot(paths, os.path.join(
                    out_dir, "plots", f"det_{d}.svg"))

    _stage("det-plot")(plot_stage)

    manifest = {
        "version": _VERSION,
        "root_seed": config["root_seed"],
        "stage_seeds": seed_ints,
        "losses": losses,
        "backends": backends,
        "protocol": config["protocol"],
        "durations": durations,
        "synth_train": dataclasses.asdict(config["synth_train"]),
        "synth_eval": dataclasses.asdict(config["synth_eval"]),
        "train": dataclasses.asdict(config["train"]),
        "eer": summary["eer"],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    summary["manifest"] = manifest
    return summary

"""Command-line entry point.

Subcommands cover the whole pipeline: synth, featurize, train, extract,
plda-train, evaluate, det-plot, pipeline. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import backend as backend_mod
from . import evaluation as eval_mod
from . import features as features_mod
from . import net as net_mod
from . import plotting
from . import synthdata
from . import trainer as trainer_mod
from .errors import DataError, NumericError, StageError

log = logging.getLogger("spkver")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="spkver", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature archive")
    p.add_argument("--spec", required=True, help="key-value synth spec file")
    p.add_argument("--out", required=True, help="output feature archive")

    p = sub.add_parser("featurize", help="WAVs -> MFCC/VAD/CMN feature archive")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vad-offset", type=float, default=0.0)
    p.add_argument("--cmn-window", type=int, default=300)

    p = sub.add_parser("train", help="train an embedding network")
    p.add_argument("--config", required=True, help="key-value train config")
    p.add_argument("--features", required=True, help="training feature archive")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-dir", help="checkpoints + metrics directory")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("extract", help="features -> embedding archive")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunks", action="store_true",
                   help="embed fixed-length chunks instead of whole utterances")
    p.add_argument("--chunk-frames", type=int, default=200)
    p.add_argument("--max-chunks", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plda-train", help="fit the PLDA back-end")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=10)

    p = sub.add_parser("evaluate", help="run a trial protocol and report EERs")
    p.add_argument("--protocol", choices=("fixed-enroll", "equal-duration"),
                   required=True)
    p.add_argument("--durations", required=True,
                   help="comma-separated test durations in frames")
    p.add_argument("--backend", required=True,
                   help="comma-separated: cosine,euclidean,plda")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="eval feature archive")
    p.add_argument("--plda")
    p.add_argument("--enroll-frames", type=int, default=3000)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("det-plot", help="render DET-point CSVs to one SVG")
    p.add_argument("--out", required=True)
    p.add_argument("csv", nargs="+")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_synth(args):
    with open(args.spec) as fh:
        spec = synthdata.spec_from_text(fh.read())
    log.info("synth spec: %s", spec)
    feats = synthdata.generate(spec)
    n = features_mod.write_feature_archive(args.out, feats)
    log.info("wrote %d utterances to %s", n, args.out)


def _cmd_featurize(args):
    wavs = []
    for root, _, names in os.walk(args.wav_dir):
        for name in sorted(names):
            if name.lower().endswith(".wav"):
                wavs.append(os.path.join(root, name))
    wavs.sort()
    if not wavs:
        raise DataError(f"no .wav files under {args.wav_dir!r}")
    feats = []
    skipped = 0
    for path in wavs:
        stem = os.path.splitext(os.path.basename(path))[0]
        parent = os.path.basename(os.path.dirname(path))
        speaker = parent if os.path.abspath(os.path.dirname(path)) != \
            os.path.abspath(args.wav_dir) else stem.split("_")[0]
        w = features_mod.read_wav(path)
        f = features_mod.extract_mfcc(w, utterance_id=stem, speaker_id=speaker)
        try:
            f = features_mod.energy_vad(
                f, features_mod.VadConfig(offset=args.vad_offset))
        except DataError:
            skipped += 1
            continue
        feats.append(features_mod.sliding_cmn(f, args.cmn_window))
    n = features_mod.write_feature_archive(args.out, feats)
    log.info("wrote %d utterances to %s (%d skipped by VAD)",
             n, args.out, skipped)


def _cmd_train(args):
    cfg = trainer_mod.read_config(args.config)
    log.info("train config: %s", cfg)
    feats = features_mod.read_feature_archive(args.features)
    resume = trainer_mod.Checkpoint.load(args.resume) if args.resume else None
    ckpt = trainer_mod.train(cfg, feats, out_dir=args.out_dir, resume=resume)
    net_mod.save_model(args.out_model, ckpt.params, ckpt.head,
                       ckpt.loss_type, ckpt.label_map)
    log.info("saved model to %s", args.out_model)


def _cmd_extract(args):
    params, _, _, _ = net_mod.load_model(args.model)
    feats = features_mod.read_feature_archive(args.features)
    if args.chunks:
        rng = np.random.default_rng(args.seed)
        embs = trainer_mod.extract_chunk_embeddings(
            params, feats, rng, chunk_frames=args.chunk_frames,
            max_chunks=args.max_chunks)
    else:
        embs = trainer_mod.extract_utterance_embeddings(params, feats)
    n = backend_mod.write_embedding_archive(args.out, embs)
    log.info("wrote %d embeddings to %s", n, args.out)


def _cmd_plda_train(args):
    embs = backend_mod.read_embedding_archive(args.embeddings)
    center = np.mean([e.vec for e in embs], axis=0)
    normalized = [backend_mod.length_normalize(e, center) for e in embs]
    model = backend_mod.plda_train(normalized, iters=args.iters)
    model.center = center
    backend_mod.save_plda(args.out, model)
    log.info("PLDA trained on %d embeddings (%d speakers), ll %.4f -> %.4f",
             len(embs), len({e.speaker_id for e in embs}),
             model.log_likelihoods[0], model.log_likelihoods[-1])


def _cmd_evaluate(args):
    params, _, _, _ = net_mod.load_model(args.model)
    feats = features_mod.read_feature_archive(args.features)
    backends = [b.strip() for b in args.backend.split(",") if b.strip()]
    durations = [int(d) for d in args.durations.split(",")]
    plda_model = backend_mod.load_plda(args.plda) if args.plda else None
    rng = np.random.default_rng(args.seed)
    speakers: dict[str, list[str]] = {}
    for f in feats:
        speakers.setdefault(f.speaker_id, []).append(f.utterance_id)
    trial_set = eval_mod.make_trials(speakers, rng)
    os.makedirs(args.out_dir, exist_ok=True)
    eval_mod.write_trials(os.path.join(args.out_dir, "trials.txt"),
                          trial_set.trials)
    report = eval_mod.run_protocol(
        args.protocol, durations, params, feats, trial_set, backends, rng,
        plda_model=plda_model, enroll_frames=args.enroll_frames)
    with open(os.path.join(args.out_dir, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    for (b, d), score_set in report.score_sets.items():
        eval_mod.write_scores(
            os.path.join(args.out_dir, f"scores_{b}_{d}.txt"), score_set)
    for (b, d), curve in report.curves.items():
        eval_mod.write_det_csv(
            os.path.join(args.out_dir, f"det_{b}_{d}.csv"), curve)
    for b in backends:
        for d in durations:
            log.info("EER[%s, %d frames] = %.4f%%", b, d,
                     100.0 * report.eer[(b, d)])


def _cmd_det_plot(args):
    plotting.det_plot(args.csv, args.out)
    log.info("wrote %s", args.out)


def _cmd_pipeline(args):
    from . import pipeline as pipeline_mod
    config = pipeline_mod.read_pipeline_config(args.config)
    summary = pipeline_mod.pipeline_run(config, args.out)
    for key in sorted(summary["eer"]):
        log.info("EER[%s] = %.4f%%", key, 100.0 * summary["eer"][key])


_COMMANDS = {
    "synth": _cmd_synth,
    "featurize": _cmd_featurize,
    "train": _cmd_train,
    "extract": _cmd_extract,
    "plda-train": _cmd_plda_train,
    "evaluate": _cmd_evaluate,
    "det-plot": _cmd_det_plot,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _COMMANDS[args.command](args)
    except StageError as exc:
        log.error("%s", exc)
        cause = exc.cause
        return 3 if isinstance(cause, NumericError) else 2
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except (DataError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Trial construction, verification scoring, EER, and DET curves.

Trials follow the 1-enroll / 3-test-per-speaker protocol: the full cross
product of every enroll utterance against every test utterance, so S
speakers give 3*S^2 trials of which 3*S are targets.

The error-rate convention: a trial is accepted when score >= threshold
(ties accept). False-alarm rate is the fraction of nontargets accepted;
miss rate is the fraction of targets rejected. The EER is found by sweeping
all distinct scores and linearly interpolating between the two adjacent
operating points where FA - miss changes sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend as backend_mod
from . import features as features_mod
from . import net as net_mod
from .errors import InsufficientUtterances, SingleClassScores, UtteranceTooShort


@dataclass(frozen=True)
class Trial:
    enroll_utt: str
    test_utt: str
    target: bool


@dataclass
class TrialSet:
    trials: list[Trial]
    enroll_utts: dict[str, list[str]]  # speaker -> chosen enroll utterance ids
    test_utts: dict[str, list[str]]


@dataclass
class ScoreSet:
    scores: list[tuple[Trial, float]]

    def split(self):
        tgt = np.array([s for t, s in self.scores if t.target])
        non = np.array([s for t, s in self.scores if not t.target])
        return tgt, non


@dataclass
class DetCurve:
    """Operating points along the threshold sweep; FA is non-increasing and
    miss non-decreasing."""
    fa: np.ndarray
    miss: np.ndarray
    thresholds: np.ndarray


def make_trials(speakers: dict[str, list[str]], rng: np.random.Generator,
                enroll_per_spk: int = 1, test_per_spk: int = 3) -> TrialSet:
    """Pick enroll/test utterances per speaker and build the full cross
    product. Each speaker needs enroll_per_spk + test_per_spk utterances."""
    need = enroll_per_spk + test_per_spk
    enroll_utts: dict[str, list[str]] = {}
    test_utts: dict[str, list[str]] = {}
    utt_speaker: dict[str, str] = {}
    for spk in sorted(speakers):
        utts = speakers[spk]
        if len(utts) < need:
            raise InsufficientUtterances(
                f"speaker {spk!r} has {len(utts)} utterances, needs {need}")
        chosen = rng.permutation(len(utts))[:need]
        enroll_utts[spk] = [utts[i] for i in chosen[:enroll_per_spk]]
        test_utts[spk] = [utts[i] for i in chosen[enroll_per_spk:]]
        for u in utts:
            utt_speaker[u] = spk
    trials = [
        Trial(e, t, utt_speaker[e] == utt_speaker[t])
        for spk_e in sorted(enroll_utts)
        for e in enroll_utts[spk_e]
        for spk_t in sorted(test_utts)
        for t in test_utts[spk_t]
    ]
    return TrialSet(trials, enroll_utts, test_utts)


def _operating_points(target_scores, nontarget_scores):
    """(fa, miss, threshold) arrays over all distinct scores, plus a final
    reject-everything point."""
    tgt = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tgt.size == 0 or non.size == 0:
        raise SingleClassScores("need at least one target and one nontarget score")
    thresholds = np.unique(np.concatenate([tgt, non]))
    # accept iff score >= threshold
    fa = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    miss = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    fa = np.append(fa, 0.0)
    miss = np.append(miss, 1.0)
    return fa, miss, thresholds


def compute_eer(target_scores, nontarget_scores) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps all distinct scores; when no operating point has FA == miss
    exactly, interpolates linearly between the two adjacent points where
    FA - miss changes sign.
    """
    fa, miss, thr = _operating_points(target_scores, nontarget_scores)
    diff = fa - miss
    idx = int(np.flatnonzero(diff <= 0)[0])  # diff starts at 1, ends at -1
    if diff[idx] == 0:
        return float(fa[idx]), float(thr[idx])
    lo = idx - 1
    alpha = diff[lo] / (diff[lo] - diff[idx])
    eer = fa[lo] + alpha * (fa[idx] - fa[lo])
    threshold = thr[lo] + alpha * (thr[idx] - thr[lo])
    return float(eer), float(threshold)


def compute_eer_scores(scores: ScoreSet) -> tuple[float, float]:
    tgt, non = scores.split()
    return compute_eer(tgt, non)


def det_curve(target_scores, nontarget_scores) -> DetCurve:
    fa, miss, thr = _operating_points(target_scores, nontarget_scores)
    return DetCurve(fa, miss, thr)


def det_curve_scores(scores: ScoreSet) -> DetCurve:
    tgt, non = scores.split()
    return det_curve(tgt, non)


# ---------------------------------------------------------------------------
# trial / score text files

def write_trials(path: str, trials: list[Trial]) -> None:
    with open(path, "w") as fh:
        for t in trials:
            label = "target" if t.target else "nontarget"
            fh.write(f"{t.enroll_utt} {t.test_utt} {label}\n")


def read_trials(path: str) -> list[Trial]:
    trials = []
    with open(path) as fh:
        for line in fh:
            enroll, test, label = line.split()
            trials.append(Trial(enroll, test, label == "target"))
    return trials


def write_scores(path: str, scores: ScoreSet) -> None:
    with open(path, "w") as fh:
        for trial, s in scores.scores:
            fh.write(f"{trial.enroll_utt} {trial.test_utt} {s:.17g}\n")


def read_scores(path: str, trials: list[Trial]) -> ScoreSet:
    by_pair = {(t.enroll_utt, t.test_utt): t for t in trials}
    out = []
    with open(path) as fh:
        for line in fh:
            enroll, test, s = line.split()
            out.append((by_pair[(enroll, test)], float(s)))
    return ScoreSet(out)


def write_det_csv(path: str, curve: DetCurve) -> None:
    with open(path, "w") as fh:
        fh.write("fa,miss\n")
        for f, m in zip(curve.fa, curve.miss):
            fh.write(f"{f:.17g},{m:.17g}\n")


# ---------------------------------------------------------------------------
# protocol runner

@dataclass
class ProtocolReport:
    protocol: str
    backends: list[str]
    durations: list[int]
    eer: dict[tuple[str, int], float] = field(default_factory=dict)
    curves: dict[tuple[str, int], DetCurve] = field(default_factory=dict)
    score_sets: dict[tuple[str, int], ScoreSet] = field(default_factory=dict)
    skipped_utterances: dict[int, int] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["backend," + ",".join(str(d) for d in self.durations)]
        for b in self.backends:
            row = [b] + [
                f"{100.0 * self.eer[(b, d)]:.4f}" if (b, d) in self.eer else ""
                for d in self.durations
            ]
            lines.append(",".join(row))
        lines.append("skipped," + ",".join(
            str(self.skipped_utterances.get(d, 0)) for d in self.durations))
        return "\n".join(lines) + "\n"


def _score_backend(name, enroll_emb, test_emb, plda_model):
    if name == "cosine":
        return backend_mod.cosine_score(enroll_emb, test_emb)
    if name == "euclidean":
        return backend_mod.euclidean_score(enroll_emb, test_emb)
    if name == "plda":
        return backend_mod.plda_llr(plda_model, enroll_emb, test_emb)
    raise ValueError(f"unknown backend {name!r}")


def run_protocol(protocol: str, durations: list[int], params,
                 eval_features: list, trial_set: TrialSet,
                 backends: list[str], rng: np.random.Generator,
                 plda_model=None, enroll_frames: int = 3000) -> ProtocolReport:
    """Crop eval utterances to each duration condition, extract embeddings,
    and score every trial with every back-end.

    protocol "fixed-enroll" crops enroll utterances to `enroll_frames` and
    test utterances to each duration; "equal-duration" crops both to the
    duration. Utterances shorter than their requested crop are skipped and
    counted; their trials are dropped.
    """
    if protocol not in ("fixed-enroll", "equal-duration"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if "plda" in backends and plda_model is None:
        raise ValueError("plda backend requested without a PLDA model")
    feats = {f.utterance_id: f for f in eval_features}
    enroll_ids = sorted({u for us in trial_set.enroll_utts.values() for u in us})
    test_ids = sorted({u for us in trial_set.test_utts.values() for u in us})
    report = ProtocolReport(protocol, list(backends), list(durations))

    for dur in durations:
        e_frames = enroll_frames if protocol == "fixed-enroll" else dur
        skipped = 0
        embs: dict[tuple[str, str], backend_mod.Embedding] = {}
        for role, ids, n in (("e", enroll_ids, e_frames), ("t", test_ids, dur)):
            for utt in ids:
                try:
                    cropped = features_mod.crop_to_duration(feats[utt], n, rng)
                except UtteranceTooShort:
                    skipped += 1
                    continue
                vec = net_mod.extract_embedding(params, cropped.frames)
                embs[(role, utt)] = backend_mod.Embedding(
                    vec, utt, feats[utt].speaker_id)
        report.skipped_utterances[dur] = skipped

        norm_cache: dict[tuple[str, str], backend_mod.Embedding] = {}
        if plda_model is not None:
            for key, e in embs.items():
                norm_cache[key] = backend_mod.length_normalize(e, plda_model.center)

        for b in backends:
            pairs = []
            source = norm_cache if b == "plda" else embs
            for trial in trial_set.trials:
                e = source.get(("e", trial.enroll_utt))
                t = source.get(("t", trial.test_utt))
                if e is None or t is None:
                    continue
                pairs.append((trial, _score_backend(b, e, t, plda_model)))
            score_set = ScoreSet(pairs)
            report.score_sets[(b, dur)] = score_set
            report.eer[(b, dur)], _ = compute_eer_scores(score_set)
            report.curves[(b, dur)] = det_curve_scores(score_set)
    return report

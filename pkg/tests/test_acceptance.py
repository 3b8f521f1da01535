"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 5 (the qualitative EER-ordering experiment) trains nine systems
and dominates the runtime; everything else finishes in a few minutes.
"""

import dataclasses
import math
import os

import numpy as np
import pytest

from _gradcheck import max_fd_error, relative_error
from spkver import backend, evaluation, losses, net, plotting, synthdata
from spkver import pipeline as pipeline_mod
from spkver import trainer as trainer_mod
from spkver.backend import Embedding
from spkver.losses import HeadParams, angular_margin, asoftmax_loss, phi, softmax_loss
from spkver.net import LayerSpec, forward, backward, init_net
from spkver.trainer import AnnealSchedule, TrainConfig


def _report(criterion, ok, detail=""):
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


def _tiny_arch(emb=5):
    return [LayerSpec("tdnn", 5, 6, 5), LayerSpec("tdnn", 6, 6, 3),
            LayerSpec("tdnn", 6, 6, 3), LayerSpec("tdnn", 6, 6, 1),
            LayerSpec("tdnn", 6, 8, 1), LayerSpec("pool", 8, 16),
            LayerSpec("fc", 16, 6), LayerSpec("fc", 6, emb)]


# ---------------------------------------------------------------------------
# 1. gradient integrity: full network + every loss vs finite differences

def _safe_instance(seed, head, kind, m):
    """Batch whose ReLU pre-activations avoid 0 and (for the angular loss)
    whose target angles avoid the phi knots, so central differences at
    h=1e-4 stay on one smooth piece."""
    rng = np.random.default_rng(seed)
    params = init_net(_tiny_arch(), rng)
    x = rng.normal(size=(4, 12, 5))
    y = rng.integers(0, 3, 4)
    _, tape = forward(params, x, mode="train", update_running=False)
    for layer, cache in zip(params.layers, tape):
        if "xhat" in cache:
            z = layer["gamma"] * cache["xhat"] + layer["beta"]
            if np.abs(z).min() < 5e-3:
                return None
    if kind == "asoftmax":
        emb, _ = forward(params, x, mode="train", update_running=False)
        wn = head.W / np.linalg.norm(head.W, axis=1, keepdims=True)
        cos = (emb @ wn.T)[np.arange(4), y] / np.linalg.norm(emb, axis=1)
        frac = m * np.arccos(np.clip(cos, -1, 1)) / np.pi
        if np.min(np.abs(frac - np.round(frac))) < 1e-2:
            return None
    return params, x, y


def _check_config(kind, m, lam, seed):
    rng = np.random.default_rng(10_000 + seed)
    if kind == "softmax":
        head = losses.init_head(3, 5, rng, loss="softmax")
    elif kind == "asoftmax":
        head = losses.init_head(3, 5, rng, loss="asoftmax", m=m)
    else:
        head = None
    inst = _safe_instance(seed, head, kind, m)
    if inst is None:
        return None
    params, x, y = inst
    frozen = {}

    def loss_and_grads():
        emb, tape = forward(params, x, mode="train", update_running=False)
        if kind == "softmax":
            value, grads, _ = softmax_loss(head, emb, y)
        elif kind == "asoftmax":
            value, grads, _ = asoftmax_loss(head, emb, y, anneal_lambda=lam)
        else:
            if "triplets" not in frozen:
                frozen["triplets"] = losses.mine_triplets(
                    emb, y, "semi-hard", np.random.default_rng(0))
            value, gx = losses.triplet_loss_from_triplets(
                emb, frozen["triplets"], 0.4)
            grads = {"X": gx}
        return value, grads, tape

    value, grads, tape = loss_and_grads()
    net_grads = backward(params, tape, grads["X"])
    arrays = dict(params.named_parameters())
    analytic = {}
    names = iter(list(arrays))
    for layer in net_grads:
        for key in ("W", "b", "gamma", "beta"):
            if key in layer:
                analytic[next(names)] = layer[key]
    if head is not None:
        arrays["head.W"] = head.W
        analytic["head.W"] = grads["W"]
        if head.b is not None:
            arrays["head.b"] = head.b
            analytic["head.b"] = grads["b"]
    return max_fd_error(lambda: loss_and_grads()[0], arrays, analytic,
                        recheck_h=1e-5)


def test_criterion_1_gradient_integrity():
    configs = [("softmax", 1, 0.0)]
    configs += [("asoftmax", m, lam) for m in (2, 3, 4) for lam in (0.0, 7.5)]
    configs += [("triplet", 1, 0.0)]
    worst, n_checked = 0.0, 0
    for kind, m, lam in configs:
        done = 0
        for seed in range(60):
            err = _check_config(kind, m, lam, seed)
            if err is None:
                continue
            worst = max(worst, err)
            n_checked += 1
            done += 1
            if done >= 3:
                break
        assert done >= 3, f"not enough valid seeds for {kind} m={m}"
    ok = worst < 1e-4 and n_checked >= 20
    _report(1, ok, f"max rel err {worst:.3g} over {n_checked} seeded checks")


# ---------------------------------------------------------------------------
# 2. phi-function suite

def test_criterion_2_phi_suite():
    ok = True
    detail = []
    for m in range(1, 7):
        for k in range(1, m):
            knot = k * np.pi / m
            left, _ = phi(np.cos(knot - 1e-10), m)
            right, _ = phi(np.cos(knot + 1e-10), m)
            if abs(left - right) >= 1e-9:
                ok = False
                detail.append(f"knot m={m} k={k}")
        theta = np.linspace(0.0, np.pi, 10_000)
        values, _ = phi(np.cos(theta), m)
        if not np.all(np.diff(values) < 0):
            ok = False
            detail.append(f"monotonicity m={m}")
        if abs(values[0] - 1.0) > 1e-9 or abs(values[-1] - (1 - 2 * m)) > 1e-9:
            ok = False
            detail.append(f"endpoints m={m}")
        u = np.linspace(-1, 1, 4001)
        if np.abs(losses.cos_multiple(u, m) - np.cos(m * np.arccos(u))).max() >= 1e-12:
            ok = False
            detail.append(f"multi-angle m={m}")
    _report(2, ok, "; ".join(detail) or "all phi properties hold for m in 1..6")


# ---------------------------------------------------------------------------
# 3. degeneracy: m=1 lambda=0 equals softmax on a normalized zero-bias head

def test_criterion_3_degeneracy():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 8))
        d = int(rng.integers(3, 12))
        n = int(rng.integers(2, 16))
        w = rng.normal(size=(c, d))
        x = rng.normal(size=(n, d))
        y = rng.integers(0, c, n)
        a, _, _ = asoftmax_loss(HeadParams(w, None, 1), x, y, 0.0)
        wn = w / np.linalg.norm(w, axis=1, keepdims=True)
        s, _, _ = softmax_loss(HeadParams(wn, np.zeros(c)), x, y)
        worst = max(worst, abs(a - s))
    _report(3, worst < 1e-10, f"max |asoftmax(m=1) - softmax| = {worst:.3g}")


# ---------------------------------------------------------------------------
# 4. margin geometry on 2-D, 2-class separable data

def _margin_points(seed, n_per=120, gap=0.8, radius=3.0):
    rng = np.random.default_rng(seed)
    pts, labs = [], []
    for c, base in enumerate((-gap / 2, gap / 2)):
        ang = base + rng.normal(0, 0.22, n_per)
        ang = np.clip(ang, base - gap / 2 + 0.06, base + gap / 2 - 0.06)
        rad = np.maximum(radius + rng.normal(0, 0.5, n_per), 0.5)
        pts.append(np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1))
        labs.append(np.full(n_per, c))
    return np.vstack(pts), np.concatenate(labs)


def _train_margin_system(seed, kind, m=4, steps=4000, lr=0.05, decay=2e-3):
    """Trainable 2x2 linear embedding map + classifier head; weight decay
    bounds the norms so both losses reach finite equilibria."""
    points, y = _margin_points(seed)
    rng = np.random.default_rng(1000 + seed)
    a = np.eye(2) + 0.1 * rng.normal(size=(2, 2))
    head = losses.init_head(2, 2, rng, loss=kind, m=m)
    for t in range(steps):
        emb = points @ a.T
        if kind == "softmax":
            _, g, _ = softmax_loss(head, emb, y)
        else:
            lam = 20.0 * 0.995 ** t
            _, g, _ = asoftmax_loss(head, emb, y, anneal_lambda=lam)
        a -= lr * (g["X"].T @ points + decay * a)
        head.W -= lr * (g["W"] + decay * head.W)
        if head.b is not None:
            head.b -= lr * g["b"]
    emb = points @ a.T
    en = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    min_sep = float(np.arccos(np.clip((en[y == 0] @ en[y == 1].T).max(), -1, 1)))
    wn = head.W / np.linalg.norm(head.W, axis=1, keepdims=True)
    if kind == "asoftmax":
        cos_all = en @ wn.T
        tgt = cos_all[np.arange(len(y)), y]
        oth = cos_all[np.arange(len(y)), 1 - y]
        margined, _ = phi(tgt, m)
        acc = float(np.mean(margined > oth))
        pred = angular_margin(head.W[0], head.W[1], m)
    else:
        acc = float(((emb @ head.W.T + head.b).argmax(axis=1) == y).mean())
        pred = 0.0
    return min_sep, pred, acc


def test_criterion_4_margin_geometry():
    soft_seps, asoft_seps, ratios = [], [], []
    for seed in range(5):
        s_sep, _, s_acc = _train_margin_system(seed, "softmax")
        a_sep, pred, a_acc = _train_margin_system(seed, "asoftmax")
        assert s_acc == 1.0, "softmax failed to classify the separable toy"
        assert a_acc == 1.0, "A-softmax margined classification incomplete"
        soft_seps.append(s_sep)
        asoft_seps.append(a_sep)
        ratios.append(a_sep / pred)
    med_soft = float(np.median(soft_seps))
    med_asoft = float(np.median(asoft_seps))
    med_ratio = float(np.median(ratios))
    ok = med_asoft > med_soft and med_ratio >= 0.8
    _report(4, ok, f"median sep: asoftmax {med_asoft:.3f} vs softmax "
                   f"{med_soft:.3f}; sep/bound {med_ratio:.2f} (need >= 0.8)")


# ---------------------------------------------------------------------------
# 6. EER oracle equivalence and trial-count identities

def _eer_bruteforce(tgt, non):
    thresholds = sorted(set(tgt) | set(non))
    thresholds.append(thresholds[-1] + 1.0)
    prev = None
    for thr in thresholds:
        fa = sum(1 for s in non if s >= thr) / len(non)
        miss = sum(1 for s in tgt if s < thr) / len(tgt)
        d = fa - miss
        if d == 0:
            return fa
        if d < 0:
            fa0, miss0 = prev
            d0 = fa0 - miss0
            alpha = d0 / (d0 - d)
            return fa0 + alpha * (fa - fa0)
        prev = (fa, miss)
    raise AssertionError("no crossing")


def test_criterion_6_eer_oracle_and_trial_counts():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        nt = int(rng.integers(1, 30))
        nn = int(rng.integers(1, 30))
        tgt = list(rng.integers(0, 8, nt) + rng.choice([0.0, 0.5], nt))
        non = list(rng.integers(0, 8, nn) + rng.choice([0.0, 0.5], nn))
        ours, _ = evaluation.compute_eer(tgt, non)
        worst = max(worst, abs(ours - _eer_bruteforce(tgt, non)))
    counts_ok = True
    for s in (1, 2, 10, 1000):
        speakers = {f"s{i:04d}": [f"s{i:04d}_u{j}" for j in range(4)]
                    for i in range(s)}
        ts = evaluation.make_trials(speakers, np.random.default_rng(0))
        n_target = sum(t.target for t in ts.trials)
        if len(ts.trials) != 3 * s * s or n_target != 3 * s:
            counts_ok = False
    ok = worst < 1e-12 and counts_ok
    _report(6, ok, f"max |eer - bruteforce| = {worst:.3g}; counts 3S^2/3S "
                   f"verified for S in {{1,2,10,1000}}")


# ---------------------------------------------------------------------------
# 7. PLDA correctness

def _dense_llr_oracle(model, e, t):
    b, w, mu = model.between, model.within, model.mu

    def log_normal(x, cov):
        _, logdet = np.linalg.slogdet(cov)
        return -0.5 * (x.size * np.log(2 * np.pi) + logdet
                       + x @ np.linalg.solve(cov, x))

    joint = np.block([[b + w, b], [b, b + w]])
    x = np.concatenate([e - mu, t - mu])
    return (log_normal(x, joint) - log_normal(e - mu, b + w)
            - log_normal(t - mu, b + w))


def test_criterion_7_plda():
    rng = np.random.default_rng(11)
    worst_llr = 0.0
    for dim in (1, 2, 3, 4, 5):
        a = rng.normal(size=(dim, dim))
        between = a @ a.T / dim + 0.05 * np.eye(dim)
        a = rng.normal(size=(dim, dim))
        within = a @ a.T / dim + 0.1 * np.eye(dim)
        model = backend.PldaModel(rng.normal(size=dim), between, within)
        for _ in range(30):
            e = rng.normal(size=dim) * 2
            t = rng.normal(size=dim) * 2
            ours = backend.plda_llr(model, Embedding(e), Embedding(t))
            worst_llr = max(worst_llr, abs(ours - _dense_llr_oracle(model, e, t)))

    monotone = True
    for trial in range(100):
        r = np.random.default_rng(trial)
        dim = int(r.integers(2, 5))
        psi = r.uniform(0.2, 3.0, dim)
        embs = []
        for s in range(25):
            u = r.normal(size=dim) * np.sqrt(psi)
            for j in range(4):
                embs.append(Embedding(u + r.normal(size=dim), f"u{s}_{j}", f"s{s}"))
        model = backend.plda_train(embs, iters=10)
        lls = np.array(model.log_likelihoods)
        if not np.all(np.diff(lls) >= -1e-6 * np.abs(lls[:-1])):
            monotone = False

    psi_true = np.geomspace(12.0, 0.5, 10)
    r = np.random.default_rng(6)
    embs = []
    for s in range(500):
        u = r.normal(size=10) * np.sqrt(psi_true)
        for j in range(10):
            embs.append(Embedding(u + r.normal(size=10), f"u{s}_{j}", f"s{s}"))
    est = np.sort(backend.plda_train(embs, iters=30).psi)[::-1]
    rec_err = float((np.abs(est - psi_true) / psi_true).max())

    ok = worst_llr < 1e-8 and monotone and rec_err < 0.15
    _report(7, ok, f"llr-vs-oracle {worst_llr:.3g}; EM monotone on 100 sets: "
                   f"{monotone}; psi recovery max rel err {rec_err:.3f}")


# ---------------------------------------------------------------------------
# 8. determinism: full pipeline twice -> byte-identical scores and reports

PIPE_CFG = """
root_seed 20
losses softmax,asoftmax
backends cosine,plda
protocol equal-duration
durations 200
plda_iters 4
plda_max_chunks 60

synth_train_n_speakers 6
synth_train_utts_per_speaker 4
synth_train_frames_per_utt 450
synth_train_dim 5
synth_train_speaker_spread 2.0
synth_train_channel_spread 0.4
synth_train_frame_noise 1.0

synth_eval_n_speakers 4
synth_eval_utts_per_speaker 4
synth_eval_frames_per_utt 260
synth_eval_dim 5
synth_eval_speaker_spread 2.0
synth_eval_channel_spread 0.4
synth_eval_frame_noise 1.0

train_width_divisor 64
train_embed_dim 4
train_minibatch_chunks 16
train_max_epochs 2
train_lr0 0.05
train_lr_stop 1e-4
train_dtype float32
"""


def test_criterion_8_pipeline_determinism(tmp_path):
    config = pipeline_mod.parse_pipeline_config(PIPE_CFG)
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    pipeline_mod.pipeline_run(config, str(out1))
    pipeline_mod.pipeline_run(config, str(out2))
    mismatched = []
    for sub in ("scores", "reports"):
        names1 = sorted(os.listdir(out1 / sub))
        names2 = sorted(os.listdir(out2 / sub))
        if names1 != names2:
            mismatched.append(f"{sub}: file sets differ")
            continue
        for name in names1:
            if (out1 / sub / name).read_bytes() != (out2 / sub / name).read_bytes():
                mismatched.append(f"{sub}/{name}")
    n_files = sum(len(os.listdir(out1 / sub)) for sub in ("scores", "reports"))
    _report(8, not mismatched,
            f"{n_files} score/report files byte-identical across reruns"
            if not mismatched else f"differing: {mismatched}")

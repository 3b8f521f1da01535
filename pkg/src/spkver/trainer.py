"""SGD training loop over chunk minibatches.

Plain stochastic gradient descent (momentum and weight decay exist but are
off by default): the learning rate starts at lr0, is multiplied by lr_decay
after each epoch, and training stops once it falls below lr_stop. An epoch
is one pass over the chunk archive, re-chunked with fresh random offsets
and reshuffled. The angular-margin annealing weight decays multiplicatively
per update down to a floor.
"""

from __future__ import annotations

import logging
import os
import pickle
from dataclasses import dataclass, field, asdict

import numpy as np

from . import features as features_mod
from . import losses as losses_mod
from . import net as net_mod
from .backend import Embedding
from .errors import DataError, NumericError

log = logging.getLogger("spkver.trainer")


@dataclass
class AnnealSchedule:
    enabled: bool = True
    lambda0: float = 1000.0
    decay: float = 0.96  # multiplicative, per update
    floor: float = 5.0

    def value(self, iteration: int) -> float:
        if not self.enabled:
            return 0.0
        return max(self.floor, self.lambda0 * self.decay ** iteration)


@dataclass
class TrainConfig:
    loss: str = "softmax"  # softmax | asoftmax | triplet
    margin_m: int = 3
    triplet_margin: float = 0.2
    mining: str = "semi-hard"
    minibatch_chunks: int = 1000
    chunk_frames: int = 200
    lr0: float = 0.01
    lr_decay: float = 0.9
    lr_stop: float = 1e-4
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    width_divisor: int = 1
    embed_dim: int | None = None
    dtype: str = "float64"
    max_epochs: int | None = None  # desk-scale cap; None follows lr_stop only
    max_chunks_per_utt: int | None = None
    triplet_classes_per_batch: int = 50
    triplet_chunks_per_class: int = 20
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)

    def __post_init__(self):
        if not (0 < self.lr_stop < self.lr0):
            raise ValueError("need lr0 > lr_stop > 0")
        if not (0 < self.lr_decay < 1):
            raise ValueError("need 0 < lr_decay < 1")
        if self.loss not in ("softmax", "asoftmax", "triplet"):
            raise ValueError(f"unknown loss {self.loss!r}")


_BOOL = {"true": True, "false": False, "1": True, "0": False}


def config_from_text(text: str) -> TrainConfig:
    """Parse the key-value config format; anneal fields use an anneal_ prefix."""
    kwargs = {}
    anneal = {}
    fields = TrainConfig.__dataclass_fields__
    afields = AnnealSchedule.__dataclass_fields__
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = line.split(None, 1)
        value = value.strip()
        if key.startswith("anneal_"):
            name = key[len("anneal_"):]
            if name not in afields:
                raise ValueError(f"unknown config key {key!r}")
            anneal[name] = (_BOOL[value.lower()] if name == "enabled"
                            else float(value))
        elif key in fields:
            typ = fields[key].type
            if typ == "str":
                kwargs[key] = value
            elif typ == "bool":
                kwargs[key] = _BOOL[value.lower()]
            elif typ == "float":
                kwargs[key] = float(value)
            elif typ.startswith("int | None"):
                kwargs[key] = None if value.lower() == "none" else int(value)
            else:
                kwargs[key] = int(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    if anneal:
        kwargs["anneal"] = AnnealSchedule(**anneal)
    return TrainConfig(**kwargs)


def config_to_text(cfg: TrainConfig) -> str:
    d = asdict(cfg)
    anneal = d.pop("anneal")
    lines = [f"{k} {v}" for k, v in d.items()]
    lines += [f"anneal_{k} {v}" for k, v in anneal.items()]
    return "\n".join(lines) + "\n"


def read_config(path: str) -> TrainConfig:
    with open(path) as fh:
        return config_from_text(fh.read())


@dataclass
class Checkpoint:
    params: net_mod.NetParams
    head: losses_mod.HeadParams | None
    loss_type: str
    label_map: list[str]
    epoch: int  # next epoch index
    iteration: int
    lr: float
    rng: np.random.Generator
    cfg: TrainConfig
    velocity: dict | None = None  # momentum buffers, when momentum > 0

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            pickle.dump(self, fh)
        os.replace(tmp, path)

    @staticmethod
    def load(path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            return pickle.load(fh)


def schedule_epochs(cfg: TrainConfig) -> int:
    """Number of epochs the lr schedule runs: lr0 * decay^e >= lr_stop."""
    epochs = 0
    while cfg.lr0 * cfg.lr_decay ** epochs >= cfg.lr_stop:
        epochs += 1
        if cfg.max_epochs is not None and epochs >= cfg.max_epochs:
            break
    return epochs


def build_label_map(feats) -> list[str]:
    return sorted({f.speaker_id for f in feats})


def _epoch_chunks(feats, label_index, cfg, rng):
    chunks = []
    for f in feats:
        if f.num_frames < cfg.chunk_frames:
            continue
        made = features_mod.make_chunks(
            f, label_index[f.speaker_id], rng, cfg.chunk_frames)
        if cfg.max_chunks_per_utt is not None:
            made = made[: cfg.max_chunks_per_utt]
        chunks.extend(made)
    return chunks


def _classifier_batches(chunks, cfg, rng):
    order = rng.permutation(len(chunks))
    n_batches = len(chunks) // cfg.minibatch_chunks
    for b in range(n_batches):
        idx = order[b * cfg.minibatch_chunks: (b + 1) * cfg.minibatch_chunks]
        yield [chunks[i] for i in idx]


def _triplet_batches(chunks, cfg, rng):
    by_class: dict[int, list[int]] = {}
    for i, c in enumerate(chunks):
        by_class.setdefault(c.speaker_index, []).append(i)
    k = cfg.triplet_chunks_per_class
    eligible = sorted(c for c, idx in by_class.items() if len(idx) >= k)
    if len(eligible) < 2:
        raise DataError(
            f"triplet batches need >= 2 classes with >= {k} chunks each")
    p = min(cfg.triplet_classes_per_batch, len(eligible))
    n_batches = max(1, len(chunks) // (p * k))
    for _ in range(n_batches):
        classes = rng.choice(len(eligible), size=p, replace=False)
        batch = []
        for ci in classes:
            pool = by_class[eligible[ci]]
            take = rng.choice(len(pool), size=k, replace=False)
            batch.extend(chunks[pool[i]] for i in take)
        yield batch


def _loss_and_grads(cfg, head, emb, labels, lam, rng):
    if cfg.loss == "softmax":
        return losses_mod.softmax_loss(head, emb, labels)
    if cfg.loss == "asoftmax":
        return losses_mod.asoftmax_loss(head, emb, labels, anneal_lambda=lam)
    return losses_mod.triplet_loss(
        emb, labels, margin=cfg.triplet_margin, mining=cfg.mining, rng=rng)


def _check_finite(params, head):
    for _, p in params.named_parameters():
        if not np.all(np.isfinite(p)):
            raise NumericError("network parameter became non-finite")
    if head is not None:
        if not np.all(np.isfinite(head.W)):
            raise NumericError("head weight became non-finite")
        if head.b is not None and not np.all(np.isfinite(head.b)):
            raise NumericError("head bias became non-finite")


def train(cfg: TrainConfig, feats, out_dir: str | None = None,
          resume: Checkpoint | None = None) -> Checkpoint:
    """Train on a list of FeatureMatrix; returns the final checkpoint.

    When out_dir is given, writes a checkpoint per epoch plus an append-only
    metrics.csv with (epoch, lr, loss, accuracy) rows.
    """
    if not feats:
        raise DataError("empty training set")
    label_map = build_label_map(feats)
    if len(label_map) < 2:
        raise DataError("training needs at least 2 speakers")
    label_index = {s: i for i, s in enumerate(label_map)}
    dtype = np.dtype(cfg.dtype)

    if resume is not None:
        params, head = resume.params, resume.head
        rng = resume.rng
        epoch, iteration = resume.epoch, resume.iteration
        velocity = resume.velocity
    else:
        rng = np.random.default_rng(cfg.seed)
        arch = net_mod.standard_architecture(
            in_dim=feats[0].dim, width_divisor=cfg.width_divisor,
            embed_dim=cfg.embed_dim)
        params = net_mod.init_net(arch, rng, dtype=dtype)
        if cfg.loss == "triplet":
            head = None
        else:
            head = losses_mod.init_head(
                len(label_map), net_mod.embedding_dim(arch), rng,
                loss=cfg.loss, m=cfg.margin_m, dtype=dtype)
        epoch, iteration = 0, 0
        velocity = None

    if cfg.momentum > 0 and velocity is None:
        velocity = {name: np.zeros_like(p) for name, p in params.named_parameters()}
        if head is not None:
            velocity["head.W"] = np.zeros_like(head.W)
            if head.b is not None:
                velocity["head.b"] = np.zeros_like(head.b)

    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        if resume is None and os.path.exists(metrics_path):
            os.remove(metrics_path)
        if not os.path.exists(metrics_path):
            with open(metrics_path, "w") as fh:
                fh.write("epoch,lr,loss,accuracy\n")

    def apply_update(name, p, g, lr):
        if cfg.weight_decay > 0 and name.endswith(".W"):
            g = g + cfg.weight_decay * p
        if velocity is not None:
            v = velocity[name]
            v *= cfg.momentum
            v += g
            g = v
        p -= dtype.type(lr) * g.astype(dtype, copy=False)

    lr = cfg.lr0 * cfg.lr_decay ** epoch
    while lr >= cfg.lr_stop and (cfg.max_epochs is None or epoch < cfg.max_epochs):
        chunks = _epoch_chunks(feats, label_index, cfg, rng)
        if not chunks:
            raise DataError("no usable chunks: all utterances shorter than "
                            f"{cfg.chunk_frames} frames")
        if cfg.loss == "triplet":
            batches = _triplet_batches(chunks, cfg, rng)
        else:
            batches = _classifier_batches(chunks, cfg, rng)

        total_loss, total_correct, total_n, n_batches = 0.0, 0, 0, 0
        for batch in batches:
            x = np.stack([c.frames for c in batch]).astype(dtype, copy=False)
            y = np.array([c.speaker_index for c in batch])
            emb, tape = net_mod.forward(params, x, mode="train")
            lam = cfg.anneal.value(iteration)
            loss, grads, aux = _loss_and_grads(cfg, head, emb, y, lam, rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, "
                                   f"iteration {iteration}")
            net_grads = net_mod.backward(params, tape, grads["X"])
            for (name, p), glayer in zip(params.named_parameters(),
                                         _flatten(net_grads)):
                apply_update(name, p, glayer, lr)
            if head is not None:
                apply_update("head.W", head.W, grads["W"], lr)
                if head.b is not None:
                    apply_update("head.b", head.b, grads["b"], lr)
            _check_finite(params, head)

            total_loss += loss * len(batch)
            if "logits" in aux:
                total_correct += int((aux["logits"].argmax(axis=1) == y).sum())
            total_n += len(batch)
            n_batches += 1
            iteration += 1

        mean_loss = total_loss / max(total_n, 1)
        accuracy = total_correct / total_n if cfg.loss != "triplet" else float("nan")
        log.info("epoch %d lr %.6g loss %.5f accuracy %.4f (%d batches)",
                 epoch, lr, mean_loss, accuracy, n_batches)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(f"{epoch},{lr:.17g},{mean_loss:.8g},{accuracy:.6g}\n")

        epoch += 1
        lr = cfg.lr0 * cfg.lr_decay ** epoch
        if out_dir is not None:
            Checkpoint(params, head, cfg.loss, label_map, epoch, iteration,
                       lr, rng, cfg, velocity).save(
                os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.ckpt"))

    return Checkpoint(params, head, cfg.loss, label_map, epoch, iteration,
                      lr, rng, cfg, velocity)


def _flatten(net_grads):
    for layer in net_grads:
        for key in ("W", "b", "gamma", "beta"):
            if key in layer:
                yield layer[key]


def evaluate_train_metrics(params, head, frames_batch, labels,
                           loss_type: str = "softmax",
                           anneal_lambda: float = 0.0):
    """Infer-mode loss and accuracy of a labeled chunk batch.

    Accuracy is argmax-logit == label; for the angular-margin head the
    argmax runs over the un-margined cosine scores. Triplet training has no
    head, so accuracy is NaN there.
    """
    if len(labels) == 0:
        raise ValueError("empty batch")
    x = np.stack([np.asarray(f) for f in frames_batch])
    y = np.asarray(labels)
    emb, _ = net_mod.forward(params, x, mode="infer")
    if loss_type == "softmax":
        loss, _, aux = losses_mod.softmax_loss(head, emb, y)
    elif loss_type == "asoftmax":
        loss, _, aux = losses_mod.asoftmax_loss(head, emb, y, anneal_lambda)
    else:
        loss, _, _ = losses_mod.triplet_loss(emb, y)
        return float(loss), float("nan")
    accuracy = float((aux["logits"].argmax(axis=1) == y).mean())
    return float(loss), accuracy


# ---------------------------------------------------------------------------
# embedding extraction helpers

def extract_utterance_embeddings(params, feats, batch_size: int = 64):
    """Infer-mode embeddings for whole utterances, batched by length."""
    by_len: dict[int, list] = {}
    for f in feats:
        by_len.setdefault(f.num_frames, []).append(f)
    out = []
    for t in sorted(by_len):
        group = by_len[t]
        for i in range(0, len(group), batch_size):
            part = group[i: i + batch_size]
            x = np.stack([f.frames for f in part])
            emb, _ = net_mod.forward(params, x, mode="infer")
            out.extend(
                Embedding(e, f.utterance_id, f.speaker_id)
                for e, f in zip(emb, part))
    return out


def extract_chunk_embeddings(params, feats, rng, chunk_frames: int = 200,
                             max_chunks: int | None = None,
                             batch_size: int = 256):
    """Embeddings of fixed-length chunks cut from each utterance, for
    training chunk-level back-ends."""
    items = []
    for f in feats:
        if f.num_frames < chunk_frames:
            continue
        for j, c in enumerate(features_mod.make_chunks(f, 0, rng, chunk_frames)):
            items.append((f"{f.utterance_id}#chunk{j}", f.speaker_id, c.frames))
    if max_chunks is not None and len(items) > max_chunks:
        pick = rng.permutation(len(items))[:max_chunks]
        items = [items[i] for i in sorted(pick)]
    out = []
    for i in range(0, len(items), batch_size):
        part = items[i: i + batch_size]
        x = np.stack([frames for _, _, frames in part])
        emb, _ = net_mod.forward(params, x, mode="infer")
        out.extend(
            Embedding(e, utt, spk)
            for e, (utt, spk, _) in zip(emb, part))
    return out

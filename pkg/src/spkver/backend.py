"""Verification back-ends: cosine and Euclidean scoring, and a
two-covariance PLDA (x = mu + u + v with u ~ N(0, B) per speaker and
v ~ N(0, W) per utterance) trained by EM and scored as a same/different
log-likelihood ratio in the simultaneously diagonalized basis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DataError,
    DegenerateCovariance,
    DimensionMismatch,
    ZeroVector,
)

VARIANCE_FLOOR = 1e-6
PLDA_MAGIC = b"PLDA"
PLDA_VERSION = 1


@dataclass
class Embedding:
    vec: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        self.vec = np.asarray(self.vec, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.vec)):
            raise ValueError(f"embedding {self.utterance_id!r} has non-finite values")


def length_normalize(e: Embedding, target_center: np.ndarray) -> Embedding:
    """Center and rescale so the output norm is sqrt(dim)."""
    v = e.vec - np.asarray(target_center, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ZeroVector(f"embedding {e.utterance_id!r} equals the center")
    return Embedding(v * (np.sqrt(v.size) / norm), e.utterance_id, e.speaker_id)


def cosine_score(a: Embedding, b: Embedding) -> float:
    na, nb = np.linalg.norm(a.vec), np.linalg.norm(b.vec)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine score of a zero vector is undefined")
    return float(np.dot(a.vec, b.vec) / (na * nb))


def euclidean_score(a: Embedding, b: Embedding) -> float:
    """Negated distance, so larger means more similar."""
    return -float(np.linalg.norm(a.vec - b.vec))


def _floor_psd(mat: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize and clip eigenvalues from below."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def _diagonalizing_transform(within: np.ndarray, between: np.ndarray):
    """T with T W T^t = I and T B T^t = diag(psi), psi >= 0."""
    vals, vecs = np.linalg.eigh(0.5 * (within + within.T))
    if np.any(vals <= 0):
        raise DegenerateCovariance("within-class covariance is not positive definite")
    w_inv_half = (vecs / np.sqrt(vals)) @ vecs.T
    mid = w_inv_half @ (0.5 * (between + between.T)) @ w_inv_half
    psi, u = np.linalg.eigh(0.5 * (mid + mid.T))
    order = np.argsort(psi)[::-1]
    psi = np.maximum(psi[order], 0.0)
    t = u[:, order].T @ w_inv_half
    return t, psi


@dataclass
class PldaModel:
    """Global mean plus between/within covariance factors.

    `center` is the raw-embedding mean used for length normalization at
    scoring time; `mu` is the mean of the (normalized) training vectors the
    covariances were fit around. T and psi cache the simultaneous
    diagonalization used by the closed-form LLR.
    """

    mu: np.ndarray
    between: np.ndarray
    within: np.ndarray
    center: np.ndarray = None
    transform: np.ndarray = field(default=None, repr=False)
    psi: np.ndarray = field(default=None, repr=False)
    log_likelihoods: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.center is None:
            self.center = np.zeros_like(self.mu)
        if self.transform is None:
            self.transform, self.psi = _diagonalizing_transform(
                self.within, self.between)

    @property
    def dim(self) -> int:
        return self.mu.size


def _group_by_speaker(embeddings: list[Embedding]):
    groups: dict[str, list[np.ndarray]] = {}
    for e in embeddings:
        groups.setdefault(e.speaker_id, []).append(e.vec)
    return {spk: np.vstack(vecs) for spk, vecs in groups.items()}


def _total_log_likelihood(groups, mu, between, within) -> float:
    """Exact log-likelihood of the two-covariance model.

    Per speaker the stacked covariance block-diagonalizes into the mean
    direction (within + n*between) and n-1 deviation directions (within).
    """
    dim = mu.size
    sign_w, logdet_w = np.linalg.slogdet(within)
    if sign_w <= 0:
        raise DegenerateCovariance("within covariance lost positive definiteness")
    w_inv = np.linalg.inv(within)
    total = 0.0
    for x in groups.values():
        n = x.shape[0]
        xbar = x.mean(axis=0) - mu
        dev = x - x.mean(axis=0)
        cov_mean = within + n * between
        sign_m, logdet_m = np.linalg.slogdet(cov_mean)
        if sign_m <= 0:
            raise DegenerateCovariance("mean-direction covariance not PD")
        quad_mean = n * xbar @ np.linalg.solve(cov_mean, xbar)
        quad_dev = float(np.sum(dev @ w_inv * dev))
        total += -0.5 * (n * dim * np.log(2 * np.pi) + logdet_m
                         + (n - 1) * logdet_w + quad_mean + quad_dev)
    return total


def plda_train(embeddings: list[Embedding], iters: int = 10) -> PldaModel:
    """Fit the two-covariance model by EM.

    Expects length-normalized embeddings. The global mean is the empirical
    mean and stays fixed; EM alternates posterior speaker-factor estimation
    with covariance re-estimation. With iters=0 the initialization (total
    covariance split evenly between B and W) is returned. The per-iteration
    total log-likelihoods are kept on the returned model.
    """
    groups = _group_by_speaker(embeddings)
    if len(groups) < 2:
        raise DataError("PLDA needs at least 2 speakers")
    all_vecs = np.vstack([x for x in groups.values()])
    n_total, dim = all_vecs.shape
    mu = all_vecs.mean(axis=0)
    centered = all_vecs - mu
    total_cov = centered.T @ centered / n_total
    if np.linalg.matrix_rank(total_cov) < dim:
        raise DegenerateCovariance("training embeddings do not span the space")

    between = _floor_psd(0.5 * total_cov, 0.0)
    within = _floor_psd(0.5 * total_cov, VARIANCE_FLOOR)

    lls = []
    for _ in range(iters):
        lls.append(_total_log_likelihood(groups, mu, between, within))
        r_between = np.zeros((dim, dim))
        r_within = np.zeros((dim, dim))
        for x in groups.values():
            n = x.shape[0]
            xbar = x.mean(axis=0) - mu
            # posterior of the speaker factor u: mean B(B + W/n)^-1 xbar,
            # covariance B - B(B + W/n)^-1 B (valid for singular B)
            gain = np.linalg.solve((between + within / n).T, between.T).T
            mean_post = gain @ xbar
            cov_post = between - gain @ between
            r_between += np.outer(mean_post, mean_post) + cov_post
            resid = (x - mu) - mean_post
            r_within += resid.T @ resid + n * cov_post
        between = _floor_psd(r_between / len(groups), 0.0)
        within = _floor_psd(r_within / n_total, VARIANCE_FLOOR)
    lls.append(_total_log_likelihood(groups, mu, between, within))
    return PldaModel(mu, between, within, log_likelihoods=lls)


def plda_llr(model: PldaModel, enroll: Embedding, test: Embedding) -> float:
    """log p(enroll, test | same speaker) - log p(enroll) p(test).

    Closed form per dimension in the diagonalized basis where the within
    variance is 1 and the between variance is psi_d; symmetric in its
    arguments and identically 0 when psi = 0.
    """
    if enroll.vec.size != model.dim or test.vec.size != model.dim:
        raise DimensionMismatch(
            f"model dim {model.dim}, got {enroll.vec.size} and {test.vec.size}")
    e = model.transform @ (enroll.vec - model.mu)
    t = model.transform @ (test.vec - model.mu)
    psi = model.psi
    sq = e * e + t * t
    cross = e * t  # computed once so the result is bit-symmetric in (e, t)
    quad_same = ((psi + 1.0) * sq - 2.0 * psi * cross) / (2.0 * psi + 1.0)
    quad_diff = sq / (psi + 1.0)
    logdet_term = 2.0 * np.log1p(psi) - np.log1p(2.0 * psi)
    return float(0.5 * np.sum(logdet_term + quad_diff - quad_same))


def save_plda(path: str, model: PldaModel) -> None:
    """magic, version, dim, center, mu, T (row-major), psi, all float64 LE."""
    with open(path, "wb") as fh:
        fh.write(PLDA_MAGIC)
        fh.write(struct.pack("<II", PLDA_VERSION, model.dim))
        for arr in (model.center, model.mu, model.transform, model.psi):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_plda(path: str) -> PldaModel:
    with open(path, "rb") as fh:
        if fh.read(4) != PLDA_MAGIC:
            raise DataError(f"{path!r} is not a PLDA model file")
        version, dim = struct.unpack("<II", fh.read(8))
        if version != PLDA_VERSION:
            raise DataError(f"unsupported PLDA version {version}")

        def read(n):
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise DataError("truncated PLDA file")
            return np.frombuffer(raw, dtype="<f8").copy()

        center = read(dim)
        mu = read(dim)
        transform = read(dim * dim).reshape(dim, dim)
        psi = read(dim)
    t_inv = np.linalg.inv(transform)
    within = t_inv @ t_inv.T
    between = t_inv @ np.diag(psi) @ t_inv.T
    return PldaModel(mu, between, within, center=center,
                     transform=transform, psi=psi)


def write_embedding_archive(path: str, embeddings: list[Embedding]) -> int:
    from . import archive
    return archive.write_records(
        path,
        ((e.utterance_id, e.speaker_id, e.vec[None, :]) for e in embeddings),
        magic=archive.EMBEDDING_MAGIC,
    )


def read_embedding_archive(path: str) -> list[Embedding]:
    from . import archive
    return [
        Embedding(mat[0], utt, spk)
        for utt, spk, mat in archive.iter_records(path, archive.EMBEDDING_MAGIC)
    ]

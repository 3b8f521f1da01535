"""Training criteria for the embedding network: softmax cross-entropy,
angular-margin softmax with integer margin m, and triplet loss.

The angular-margin target logit uses phi(theta) = (-1)^k cos(m*theta) - 2k
on [k*pi/m, (k+1)*pi/m], the monotone extension of cos(m*theta) to [0, pi].
cos(m*theta) and its derivative are evaluated as polynomials in cos(theta)
(Chebyshev recurrences), so every gradient is an explicit function of W and
x and no trigonometric backward pass is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, NoValidTriplet

COS_CLAMP = 1e-7  # keeps acos away from the branch points +-1


@dataclass
class HeadParams:
    """Classifier head. For the angular-margin loss the bias is absent and
    the weight rows are consumed in unit-normalized form."""

    W: np.ndarray  # (C, dim)
    b: np.ndarray | None = None  # (C,), softmax head only
    m: int = 1

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]


def init_head(num_classes: int, dim: int, rng: np.random.Generator,
              loss: str = "softmax", m: int = 1, dtype=np.float64) -> HeadParams:
    limit = 1.0 / np.sqrt(dim)
    w = rng.uniform(-limit, limit, size=(num_classes, dim)).astype(dtype)
    if loss == "softmax":
        return HeadParams(w, np.zeros(num_classes, dtype=dtype), 1)
    return HeadParams(w, None, m)


def cos_multiple(u, m: int):
    """cos(m*theta) as a polynomial in u = cos(theta), via T_{n+1} = 2u T_n - T_{n-1}."""
    u = np.asarray(u)
    if m < 0:
        raise ValueError("m must be >= 0")
    t_prev, t_cur = np.ones_like(u), u
    if m == 0:
        return t_prev
    for _ in range(m - 1):
        t_prev, t_cur = t_cur, 2.0 * u * t_cur - t_prev
    return t_cur


def cos_multiple_derivative(u, m: int):
    """d/du cos(m*acos(u)) = m * U_{m-1}(u), Chebyshev of the second kind."""
    u = np.asarray(u)
    if m < 1:
        raise ValueError("m must be >= 1")
    u_prev, u_cur = np.ones_like(u), 2.0 * u
    if m == 1:
        return m * u_prev
    for _ in range(m - 2):
        u_prev, u_cur = u_cur, 2.0 * u * u_cur - u_prev
    return m * u_cur


def phi(cos_theta, m: int):
    """The margin function and its interval index.

    Returns (value, k) with value = (-1)^k cos(m*theta) - 2k and
    k = floor(m*theta/pi) clamped to [0, m-1].
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    u = np.asarray(cos_theta, dtype=np.float64)
    theta = np.arccos(np.clip(u, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP))
    k = np.clip(np.floor(m * theta / np.pi).astype(np.int64), 0, m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    value = sign * cos_multiple(u, m) - 2.0 * k
    if np.isscalar(cos_theta):
        return float(value), int(k)
    return value, k


def _stable_log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_loss(head: HeadParams, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of the plain softmax head.

    Returns (loss, grads, aux) with grads = {'W', 'b', 'X'} and
    aux['logits'] the raw class scores.
    """
    n = x.shape[0]
    b = head.b if head.b is not None else 0.0
    logits = x @ head.W.T + b
    log_p = _stable_log_softmax(logits)
    loss = -log_p[np.arange(n), y].mean()
    g = np.exp(log_p)
    g[np.arange(n), y] -= 1.0
    g /= n
    grads = {"W": g.T @ x, "b": g.sum(axis=0), "X": g @ head.W}
    return loss, grads, {"logits": logits}


def asoftmax_loss(head: HeadParams, x: np.ndarray, y: np.ndarray,
                  anneal_lambda: float = 0.0):
    """Angular-margin softmax loss with margin m and optional annealing.

    The target-class logit is ||x|| * phi(theta_y); other logits stay
    ||x|| * cos(theta_j). With anneal_lambda > 0 the target logit is blended,
    ||x|| * (lambda * cos(theta_y) + phi(theta_y)) / (1 + lambda), which
    recovers the pure loss as lambda -> 0.

    Weight rows are normalized inside the op and the gradient includes the
    normalization Jacobian, so the stored W stays unconstrained.

    Returns (loss, grads, aux) with grads = {'W', 'X'} and aux['logits'] the
    un-margined cosine scores (used for the inference-time argmax).
    """
    if head.m < 1:
        raise ValueError(f"margin m must be >= 1, got {head.m}")
    lam = float(anneal_lambda)
    if lam < 0:
        raise ValueError("anneal_lambda must be >= 0")
    m = head.m
    n = x.shape[0]
    rows = np.arange(n)

    w_norms = np.linalg.norm(head.W, axis=1)
    if np.any(w_norms == 0):
        raise DegenerateInput("head contains a zero weight row")
    wn = head.W / w_norms[:, None]

    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0):
        raise DegenerateInput("zero-norm embedding reached the angular loss")

    s = x @ wn.T                    # (N, C) = ||x|| cos(theta_j)
    u = s[rows, y] / r              # cos(theta_y)
    phi_val, k = phi(u, m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    dphi_du = sign * cos_multiple_derivative(u, m)

    logits = s.copy()
    logits[rows, y] = (lam * s[rows, y] + r * phi_val) / (1.0 + lam)

    log_p = _stable_log_softmax(logits)
    loss = -log_p[rows, y].mean()

    g = np.exp(log_p)
    g[rows, y] -= 1.0
    g /= n

    # dlogit_y/ds_y = (lam + dphi/du)/(1+lam); dlogit_y/dr = (phi - u dphi/du)/(1+lam)
    gs = g.copy()
    gy = g[rows, y]
    gs[rows, y] = gy * (lam + dphi_du) / (1.0 + lam)
    gr = gy * (phi_val - u * dphi_du) / (1.0 + lam)

    gx = gs @ wn + (gr / r)[:, None] * x
    gwn = gs.T @ x
    # through the row normalization: project out the radial component
    gw = (gwn - (gwn * wn).sum(axis=1, keepdims=True) * wn) / w_norms[:, None]
    return loss, {"W": gw, "X": gx}, {"logits": s, "margined_logits": logits}


def angular_margin(w1: np.ndarray, w2: np.ndarray, m: int) -> float:
    """(m-1)/(m+1) times the angle between two class weight vectors."""
    n1, n2 = np.linalg.norm(w1), np.linalg.norm(w2)
    if n1 == 0 or n2 == 0:
        raise DegenerateInput("angular margin of a zero vector is undefined")
    theta = np.arccos(np.clip(np.dot(w1, w2) / (n1 * n2), -1.0, 1.0))
    return (m - 1) / (m + 1) * float(theta)


def mine_triplets(x: np.ndarray, y: np.ndarray, mining: str,
                  rng: np.random.Generator) -> np.ndarray:
    """Select (anchor, positive, negative) index triples within a minibatch.

    Every ordered same-class pair becomes an (anchor, positive); the negative
    is the hardest one farther than the positive ("semi-hard"), falling back
    to a random negative when none qualifies, or always random with
    mining="random".
    """
    if mining not in ("semi-hard", "random"):
        raise ValueError(f"unknown mining mode {mining!r}")
    y = np.asarray(y)
    n = len(y)
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    triplets = []
    for a in range(n):
        positives = np.flatnonzero((y == y[a]) & (np.arange(n) != a))
        negatives = np.flatnonzero(y != y[a])
        if positives.size == 0 or negatives.size == 0:
            continue
        for p in positives:
            if mining == "semi-hard":
                cand = negatives[d2[a, negatives] > d2[a, p]]
                if cand.size:
                    neg = cand[np.argmin(d2[a, cand])]
                else:
                    neg = negatives[rng.integers(0, negatives.size)]
            else:
                neg = negatives[rng.integers(0, negatives.size)]
            triplets.append((a, p, neg))
    if not triplets:
        raise NoValidTriplet(
            "minibatch has no class with 2 samples alongside another class")
    return np.asarray(triplets, dtype=np.int64)


def triplet_loss_from_triplets(x: np.ndarray, triplets: np.ndarray,
                               margin: float):
    """Hinged triplet loss on a fixed mined set.

    mean over triplets of max(0, ||a-p||^2 - ||a-n||^2 + margin); gradients
    flow only through triplets with a positive hinge.
    """
    a, p, ng = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    ap = x[a] - x[p]
    an = x[a] - x[ng]
    values = (ap * ap).sum(axis=1) - (an * an).sum(axis=1) + margin
    active = values > 0
    loss = np.maximum(values, 0.0).mean()
    gx = np.zeros_like(x)
    if active.any():
        scale = 2.0 / len(triplets)
        ap_g = scale * ap[active]
        an_g = scale * an[active]
        np.add.at(gx, a[active], ap_g - an_g)
        np.add.at(gx, p[active], -ap_g)
        np.add.at(gx, ng[active], an_g)
    return float(loss), gx


def triplet_loss(x: np.ndarray, y: np.ndarray, margin: float = 0.2,
                 mining: str = "semi-hard",
                 rng: np.random.Generator | None = None):
    """Mine triplets in the minibatch and evaluate the hinged loss.

    Returns (loss, grads, aux); aux carries the mined index triples.
    """
    rng = rng or np.random.default_rng()
    triplets = mine_triplets(x, y, mining, rng)
    loss, gx = triplet_loss_from_triplets(x, triplets, margin)
    return loss, {"X": gx}, {"triplets": triplets}

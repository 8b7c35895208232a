"""Two-layer MLP embedding with a prototype classifier head.

The embedding is Z = relu(X W1 + b1) W2 + b2. Class prototypes are mean
support embeddings; a query is classified by a softmax over negative
Euclidean (unsquared) distances to the prototypes. The episode loss is the
mean cross-entropy over query points, and gradients are exact analytic
derivatives flowing through queries, prototypes and support embeddings.
All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FewtabError
from .tasks import Episode

DIST_EPS = 1e-12  # floor inside the distance square root, for gradients at zero
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_FIELDS = ("w1", "b1", "w2", "b2")
_DECAYED = ("w1", "w2")  # biases are exempt from weight decay


class ModelError(FewtabError):
    pass


@dataclass(frozen=True)
class EncoderParams:
    w1: np.ndarray  # (d, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, embed)
    b2: np.ndarray  # (embed,)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(getattr(self, f).copy() for f in _FIELDS))


def init_params(d: int, hidden: int, embed: int, seed) -> EncoderParams:
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    if min(d, hidden, embed) < 1:
        raise ModelError(f"all dimensions must be >= 1, got d={d}, hidden={hidden}, embed={embed}")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / d)
    lim2 = np.sqrt(6.0 / hidden)
    return EncoderParams(
        w1=rng.uniform(-lim1, lim1, size=(d, hidden)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim2, lim2, size=(hidden, embed)),
        b2=np.zeros(embed),
    )


def encode(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Embed rows: relu(x W1 + b1) W2 + b2. No output activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != params.in_dim:
        raise ModelError(f"input has {x.shape[1]} columns, encoder expects {params.in_dim}")
    hidden = np.maximum(x @ params.w1 + params.b1, 0.0)
    return hidden @ params.w2 + params.b2


@dataclass(frozen=True)
class PrototypeSet:
    class_ids: tuple[int, ...]
    prototypes: np.ndarray  # (n_classes, embed)


def compute_prototypes(
    embeddings: np.ndarray,
    labels: np.ndarray,
    class_ids=None,
) -> PrototypeSet:
    """Per-class mean embeddings. With explicit ``class_ids``, every listed
    class must have at least one support embedding."""
    labels = np.asarray(labels)
    if class_ids is None:
        class_ids = np.unique(labels)
    protos = np.empty((len(class_ids), embeddings.shape[1]), dtype=np.float64)
    for row, c in enumerate(class_ids):
        members = labels == c
        if not members.any():
            raise ModelError(f"class {c} has no support embeddings")
        protos[row] = embeddings[members].mean(axis=0)
    return PrototypeSet(class_ids=tuple(int(c) for c in class_ids), prototypes=protos)


def _distances(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - prototypes[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2) + DIST_EPS)


def classify(query_embeddings: np.ndarray, prototypes: PrototypeSet) -> np.ndarray:
    """Row-stochastic probabilities: softmax over negative Euclidean
    distances to the prototypes, stabilized by max subtraction."""
    if prototypes.prototypes.shape[0] < 1:
        raise ModelError("need at least one prototype")
    logits = -_distances(query_embeddings, prototypes.prototypes)
    logits = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    return expd / expd.sum(axis=1, keepdims=True)


def episode_loss_and_grad(params: EncoderParams, episode: Episode) -> tuple[float, EncoderParams]:
    """Mean query cross-entropy and its exact gradient.

    Support embeddings receive gradient through the prototype means, so
    the returned gradient matches central finite differences of the loss.
    """
    xs = np.asarray(episode.support_x, dtype=np.float64)
    xq = np.asarray(episode.query_x, dtype=np.float64)
    ys = np.asarray(episode.support_y, dtype=np.int64)
    yq = np.asarray(episode.query_y, dtype=np.int64)
    k = episode.n_classes

    hs = xs @ params.w1 + params.b1
    a_s = np.maximum(hs, 0.0)
    zs = a_s @ params.w2 + params.b2
    hq = xq @ params.w1 + params.b1
    a_q = np.maximum(hq, 0.0)
    zq = a_q @ params.w2 + params.b2

    onehot = np.zeros((len(ys), k))
    onehot[np.arange(len(ys)), ys] = 1.0
    counts = onehot.sum(axis=0)
    protos = (onehot.T @ zs) / counts[:, None]

    diff = zq[:, None, :] - protos[None, :, :]  # (nq, k, embed)
    dist = np.sqrt(np.sum(diff * diff, axis=2) + DIST_EPS)
    logits = -dist
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    probs = expd / expd.sum(axis=1, keepdims=True)

    nq = len(yq)
    loss = float(-np.mean(np.log(probs[np.arange(nq), yq])))

    # d loss / d logits, then through logits = -dist
    g = probs.copy()
    g[np.arange(nq), yq] -= 1.0
    g /= nq
    w = -g / dist  # (nq, k)
    dzq = np.einsum("qk,qkd->qd", w, diff)
    dprotos = -np.einsum("qk,qkd->kd", w, diff)
    dzs = dprotos[ys] / counts[ys, None]

    gw1 = np.zeros_like(params.w1)
    gb1 = np.zeros_like(params.b1)
    gw2 = np.zeros_like(params.w2)
    gb2 = np.zeros_like(params.b2)
    for x, h, act, dz in ((xq, hq, a_q, dzq), (xs, hs, a_s, dzs)):
        gw2 += act.T @ dz
        gb2 += dz.sum(axis=0)
        dh = (dz @ params.w2.T) * (h > 0)
        gw1 += x.T @ dh
        gb1 += dh.sum(axis=0)
    return loss, EncoderParams(w1=gw1, b1=gb1, w2=gw2, b2=gb2)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: EncoderParams) -> "AdamState":
        return cls(
            m={f: np.zeros_like(getattr(params, f)) for f in _FIELDS},
            v={f: np.zeros_like(getattr(params, f)) for f in _FIELDS},
        )


def adam_step(
    params: EncoderParams,
    grads: EncoderParams,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> EncoderParams:
    """Classic Adam with bias correction; weight decay is added to the
    weight gradients (L2-coupled) and never to biases."""
    state.t += 1
    t = state.t
    out = {}
    for name in _FIELDS:
        p = getattr(params, name)
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ModelError(f"gradient shape {g.shape} does not match {name} shape {p.shape}")
        if weight_decay and name in _DECAYED:
            g = g + weight_decay * p
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[name] / (1.0 - ADAM_BETA1**t)
        v_hat = state.v[name] / (1.0 - ADAM_BETA2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return EncoderParams(**out)

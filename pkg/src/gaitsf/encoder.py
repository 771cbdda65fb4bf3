"""Part-sliced set-pooling encoder with hand-written gradients.

A sequence (T, 64, 44) is cut into P equal horizontal strips.  Each strip
is max-pooled over frames, flattened and projected by its own matrix
W_p; the P projections are concatenated and L2-normalized.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .silhouette import HEIGHT, WIDTH

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class EncoderParams:
    W: np.ndarray  # (P, strip_size, D)
    head: np.ndarray | None = None  # (n_classes, P*D) pre-training classifier
    head_bias: np.ndarray | None = None

    @property
    def n_parts(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[2]

    @property
    def embed_dim(self) -> int:
        return self.W.shape[0] * self.W.shape[2]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.W.copy(),
                             None if self.head is None else self.head.copy(),
                             None if self.head_bias is None else self.head_bias.copy())

    def without_head(self) -> "EncoderParams":
        return EncoderParams(self.W.copy())


@dataclass
class ParamGrads:
    W: np.ndarray
    head: np.ndarray | None = None
    head_bias: np.ndarray | None = None


@dataclass
class Embedding:
    vector: np.ndarray
    seq_id: str = ""
    augmented: bool = False


def init_params(n_parts=4, dim=16, height=HEIGHT, width=WIDTH, seed=0) -> EncoderParams:
    if height % n_parts:
        raise GeometryError(f"{n_parts} parts do not divide {height} rows")
    rng = np.random.default_rng(seed)
    strip = (height // n_parts) * width
    W = rng.normal(0.0, 1.0 / np.sqrt(strip), size=(n_parts, strip, dim))
    return EncoderParams(W)


def pool_frames(frames, n_parts) -> np.ndarray:
    """Set-pool a (T, H, W) or (B, T, H, W) stack into (…, P, strip) floats."""
    x = np.asarray(frames)
    H, Wd = x.shape[-2:]
    if H % n_parts:
        raise GeometryError(f"{n_parts} parts do not divide {H} rows")
    pooled = x.max(axis=-3)
    lead = pooled.shape[:-2]
    return pooled.reshape(*lead, n_parts, (H // n_parts) * Wd).astype(np.float64)


def _check_geometry(pooled, params):
    if pooled.shape[-2:] != params.W.shape[:2]:
        raise GeometryError(f"pooled input {pooled.shape[-2:]} does not match "
                            f"encoder geometry {params.W.shape[:2]}")


def forward_pooled(pooled, params):
    """Return (embeddings, pre-normalization norms) for pooled (B, P, S)."""
    _check_geometry(pooled, params)
    z = np.matmul(pooled.transpose(1, 0, 2), params.W).transpose(1, 0, 2)
    z = z.reshape(len(pooled), -1)
    norm = np.linalg.norm(z, axis=1)
    norm = np.maximum(norm, 1e-12)
    return z / norm[:, None], norm


def backward_pooled(pooled, params, emb, norm, upstream) -> np.ndarray:
    """Gradient w.r.t. W of sum_b upstream[b] . emb[b]."""
    g = np.asarray(upstream, dtype=np.float64)
    gz = (g - emb * np.sum(emb * g, axis=1, keepdims=True)) / norm[:, None]
    P, _, D = params.W.shape
    return np.matmul(pooled.transpose(1, 2, 0), gz.reshape(len(g), P, D).transpose(1, 0, 2))


def encode(seq, params: EncoderParams, augmented: bool = False) -> Embedding:
    frames = seq.frames if hasattr(seq, "frames") else seq
    pooled = pool_frames(frames, params.n_parts)[None]
    emb, _ = forward_pooled(pooled, params)
    return Embedding(emb[0], getattr(seq, "seq_id", ""), augmented)


def encode_many(frame_stacks, params: EncoderParams, chunk=256) -> np.ndarray:
    """Embeddings (N, P*D) for an iterable of (T, H, W) stacks."""
    out = []
    stacks = list(frame_stacks)
    for i in range(0, len(stacks), chunk):
        pooled = np.stack([pool_frames(f, params.n_parts) for f in stacks[i:i + chunk]])
        out.append(forward_pooled(pooled, params)[0])
    if not out:
        return np.zeros((0, params.embed_dim))
    return np.concatenate(out)


def encode_backward(seq, params: EncoderParams, upstream_grad) -> ParamGrads:
    """Exact gradient of ``upstream_grad . encode(seq)`` w.r.t. every W_p.

    Pooling happens before the projection, so the frame-wise max only
    selects which input is seen; the argmax itself carries no parameter
    gradient.
    """
    frames = seq.frames if hasattr(seq, "frames") else seq
    g = np.asarray(upstream_grad, dtype=np.float64).reshape(1, -1)
    if g.shape[1] != params.embed_dim:
        raise GeometryError(f"upstream grad length {g.shape[1]} != {params.embed_dim}")
    pooled = pool_frames(frames, params.n_parts)[None]
    emb, norm = forward_pooled(pooled, params)
    return ParamGrads(backward_pooled(pooled, params, emb, norm, g))


def sgd_step(params: EncoderParams, grads: ParamGrads, lr: float,
             weight_decay: float = 0.0) -> EncoderParams:
    """Plain SGD with decoupled-into-gradient L2 decay: w <- w - lr (g + wd w)."""
    pairs = [("W", params.W, grads.W)]
    if grads.head is not None:
        pairs.append(("head", params.head, grads.head))
    if grads.head_bias is not None:
        pairs.append(("head_bias", params.head_bias, grads.head_bias))
    for name, w, g in pairs:
        if g.shape != w.shape:
            raise GeometryError(f"{name}: grad shape {g.shape} != param shape {w.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; update rejected")
    new = params.copy()
    if lr == 0:
        return new
    new.W = params.W - lr * (grads.W + weight_decay * params.W)
    if grads.head is not None:
        new.head = params.head - lr * (grads.head + weight_decay * params.head)
    if grads.head_bias is not None:
        new.head_bias = params.head_bias - lr * grads.head_bias
    return new


def lr_at(step: int, base_lr: float, milestones=(), gamma: float = 0.1) -> float:
    return base_lr * gamma ** sum(step >= m for m in milestones)


# --------------------------------------------------------------------------
# supervised pre-training

def softmax_xent(logits, targets):
    """Mean cross-entropy and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(z)), targets]))
    p = np.exp(z - lse[:, None])
    p[np.arange(len(z)), targets] -= 1.0
    return loss, p / len(z)


@dataclass
class PretrainResult:
    params: EncoderParams
    loss_history: list = field(default_factory=list)


def pretrain(sequences, params: EncoderParams, epochs: int = 30, lr=0.1,
             weight_decay=5e-4, batch_size=64, n_frames=30, seed=0,
             milestones=(), logit_scale=16.0, labels=None) -> PretrainResult:
    """Supervised cross-entropy with a linear head.

    Targets are subject ids unless ``labels`` (one hashable per sequence)
    is given.  ``lr`` may be a float or a sequence of per-epoch rates.  The
    head acts on the unit-norm embedding scaled by ``logit_scale``.
    Returns encoder params with the head dropped, plus the per-step loss
    history.
    """
    seqs = list(sequences)
    targets = [s.subject_id for s in seqs] if labels is None else list(labels)
    if len(targets) != len(seqs):
        raise ValueError("one label per sequence")
    classes = sorted(set(targets))
    if len(classes) < 2:
        raise ValueError("pre-training needs at least 2 classes")
    cls = {c: i for i, c in enumerate(classes)}
    y = np.array([cls[t] for t in targets])
    rng = np.random.default_rng(seed)
    p = params.copy()
    p.head = rng.normal(0.0, 0.01, size=(len(classes), p.embed_dim))
    p.head_bias = np.zeros(len(classes))
    schedule = [lr] * epochs if np.isscalar(lr) else list(lr)
    history = []
    step = 0
    for ep in range(epochs):
        order = rng.permutation(len(seqs))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            pooled = np.stack([pool_frames(sample_frames(seqs[j].frames, n_frames, rng),
                                           p.n_parts) for j in idx])
            emb, norm = forward_pooled(pooled, p)
            logits = logit_scale * emb @ p.head.T + p.head_bias
            loss, dlogits = softmax_xent(logits, y[idx])
            history.append(loss)
            gh = logit_scale * dlogits.T @ emb
            gb = dlogits.sum(axis=0)
            gemb = logit_scale * dlogits @ p.head
            gW = backward_pooled(pooled, p, emb, norm, gemb)
            cur = lr_at(step, schedule[ep], milestones)
            p = sgd_step(p, ParamGrads(gW, gh, gb), cur, weight_decay)
            step += 1
        log.debug("pretrain epoch %d loss %.4f", ep, history[-1])
    return PretrainResult(p.without_head(), history)


def sample_frames(frames, n: int, rng: np.random.Generator) -> np.ndarray:
    """n frames uniformly without replacement; shorter sequences are padded
    by sampling with replacement."""
    T = len(frames)
    if n is None or n <= 0:
        return frames
    if T >= n:
        idx = np.sort(rng.choice(T, size=n, replace=False))
    else:
        idx = np.concatenate([np.arange(T), rng.integers(0, T, size=n - T)])
    return frames[idx]


def nearest_centroid_rank1(embeddings, labels) -> float:
    """Fraction of samples whose nearest class centroid is their own class."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    cents = np.stack([embeddings[labels == c].mean(axis=0) for c in classes])
    cents /= np.linalg.norm(cents, axis=1, keepdims=True)
    pred = classes[np.argmax(embeddings @ cents.T, axis=1)]
    return float(np.mean(pred == labels))

"""Cluster-level memory bank, ClusterNCE loss and momentum updates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


class BankError(ValueError):
    pass


@dataclass
class MomentumSchedule:
    m_max: float = 0.2
    m_min: float = 0.2
    T: int = 1
    mode: str = "fixed"  # fixed | cosine

    def __post_init__(self):
        if self.mode not in ("fixed", "cosine"):
            raise BankError(f"unknown momentum mode {self.mode!r}")
        if not 0 <= self.m_min <= self.m_max <= 1:
            raise BankError("need 0 <= m_min <= m_max <= 1")
        if self.T < 1:
            raise BankError("T must be >= 1")

    @classmethod
    def fixed(cls, m):
        return cls(m, m, 1, "fixed")


def momentum_at(schedule: MomentumSchedule, t: int) -> float:
    """Cosine-annealed momentum from m_max at t=0 down to m_min at t=T."""
    if schedule.mode == "fixed":
        return schedule.m_max
    if t > schedule.T:
        log.warning("momentum step %d beyond T=%d; clamping to m_min", t, schedule.T)
        return schedule.m_min
    return schedule.m_min + 0.5 * (schedule.m_max - schedule.m_min) * (
        1 + math.cos(t * math.pi / schedule.T))


@dataclass
class MemoryBank:
    centroids: np.ndarray  # (Q, dim)
    tau: float = 0.05
    schedule: MomentumSchedule = field(default_factory=lambda: MomentumSchedule.fixed(0.2))
    renormalize: bool = True
    step: int = 0  # position inside the momentum schedule

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    @property
    def momentum(self) -> float:
        return momentum_at(self.schedule, self.step)


def _check_unit(x, what):
    n = np.linalg.norm(x, axis=-1)
    if not np.all(np.abs(n - 1) <= UNIT_TOL):
        raise BankError(f"{what} must be unit-norm (max deviation {np.max(np.abs(n - 1)):.2e})")


def init_bank(centroids, tau=0.05, schedule: MomentumSchedule | None = None,
              renormalize=True) -> MemoryBank:
    C = np.array(centroids, dtype=np.float64, copy=True)
    if C.ndim != 2 or len(C) == 0:
        raise BankError("memory bank needs at least one centroid")
    if tau <= 0:
        raise BankError("temperature must be > 0")
    _check_unit(C, "centroids")
    return MemoryBank(C, float(tau), schedule or MomentumSchedule.fixed(0.2), renormalize)


@dataclass
class LossReport:
    loss: float
    grads: np.ndarray  # d(mean loss)/d query, (B, dim)
    positive_logits: np.ndarray  # q . C_+ / tau
    per_query: np.ndarray


def cluster_nce(bank: MemoryBank, queries, labels, check_unit=True) -> LossReport:
    """Softmax of each query against every centroid, own cluster positive.

    Mean over the batch; gradients are those of the mean.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(y) != len(q):
        raise BankError("one label per query")
    if np.any(y < 0) or np.any(y >= bank.n_clusters):
        raise BankError(f"label out of range 0..{bank.n_clusters - 1}")
    if check_unit:
        _check_unit(q, "queries")
    logits = q @ bank.centroids.T / bank.tau
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    rows = np.arange(len(q))
    pos = logits[rows, y]
    per = lse - pos
    prob = np.exp(logits - lse[:, None])
    prob[rows, y] -= 1.0
    grads = prob @ bank.centroids / (bank.tau * len(q))
    return LossReport(float(per.mean()), grads, pos, per)


def _move(bank, k, q, m):
    c = m * bank.centroids[k] + (1 - m) * q
    if bank.renormalize:
        n = np.linalg.norm(c)
        if n < 1e-12:
            raise BankError(f"centroid {k} collapsed to zero during update")
        c = c / n
    bank.centroids[k] = c


def momentum_update(bank: MemoryBank, q, cluster_id: int, m: float | None = None):
    """C_k <- m C_k + (1 - m) q, then back onto the unit sphere."""
    if not 0 <= cluster_id < bank.n_clusters:
        raise BankError(f"invalid cluster id {cluster_id}")
    m = bank.momentum if m is None else m
    if m == 1.0:
        return
    _move(bank, cluster_id, np.asarray(q, dtype=np.float64), m)


def multi_cluster_update(bank: MemoryBank, q, support_set, m: float | None = None):
    """Apply the momentum update with the same query to every id in ``support_set``."""
    ids = list(support_set)
    if not ids:
        raise BankError("empty support set")
    for k in ids:
        if not 0 <= k < bank.n_clusters:
            raise BankError(f"invalid cluster id {k} in support set")
    m = bank.momentum if m is None else m
    if m == 1.0:
        return
    q = np.asarray(q, dtype=np.float64)
    for k in ids:
        _move(bank, k, q, m)

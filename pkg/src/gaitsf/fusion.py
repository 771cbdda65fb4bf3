"""Selective Cluster Fusion and Selective Sample Fusion.

Cluster fusion: each cluster gets a support set of the clusters whose
original centroids sit closest to its cloth-augmented centroid; a query
then updates every centroid in its cluster's support set.

Sample fusion: clusters dominated by front/back-view sequences (FVC) are
dissolved and their members are re-assigned to the nearest non-FVC
cluster when similar enough, else marked as outliers.  The similarity
bound relaxes epoch by epoch at a rate tied to the change in cluster
count.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cluster import OUTLIER, PseudoLabels, densify
from .encoder import EncoderParams, encode_many, init_params, pretrain

log = logging.getLogger(__name__)

FRONT_BACK_VIEWS = (0, 180)


class FusionError(ValueError):
    pass


# --------------------------------------------------------------------------
# support sets

def select_support_sets(aug_centroids, centroids, a: int = 2) -> list[list[int]]:
    """S_k = [k] + the (a-1) other clusters most similar to augmented centroid k."""
    A = np.asarray(aug_centroids, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    Q = len(C)
    if len(A) != Q:
        raise FusionError("augmented centroids must be index-aligned with the bank")
    if a < 1:
        raise FusionError("support size a must be >= 1")
    if a > Q:
        raise FusionError(f"support size a={a} exceeds cluster count {Q}")
    sim = A @ C.T
    out = []
    for k in range(Q):
        row = -sim[k]
        row[k] = np.inf
        others = np.argsort(row, kind="stable")[:a - 1]
        out.append([k] + [int(j) for j in others])
    return out


def support_sets_to_json(support) -> str:
    return json.dumps({str(k): [int(j) for j in s] for k, s in enumerate(support)},
                      sort_keys=True)


# --------------------------------------------------------------------------
# view classifier

def front_back_label(view_deg) -> int:
    return int(int(view_deg) in FRONT_BACK_VIEWS)


@dataclass
class ViewClassifier:
    encoder: EncoderParams | None
    weights: np.ndarray | None = None
    bias: float = 0.0
    threshold: float = 0.5
    oracle_mode: bool = False
    heldout_accuracy: float = float("nan")

    def predict_proba(self, embeddings) -> np.ndarray:
        z = np.asarray(embeddings) @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-z))

    def flags(self, sequences) -> np.ndarray:
        """Front/back flag per sequence (True = front/back view)."""
        seqs = list(sequences)
        if self.oracle_mode:
            return np.array([front_back_label(s.view_deg) for s in seqs], dtype=bool)
        emb = encode_many([s.frames for s in seqs], self.encoder)
        return self.predict_proba(emb) > self.threshold

    @classmethod
    def oracle(cls):
        return cls(None, oracle_mode=True)


def train_view_classifier(sequences, encoder_params: EncoderParams | None = None,
                          heldout_frac=0.2, seed=0, C=10.0, epochs=20, lr=0.1,
                          n_parts=4, dim=16) -> ViewClassifier:
    """Front/back view classifier: 1 for 0/180 degree views, else 0.

    A logistic probe on frozen embeddings.  Without ``encoder_params`` a
    dedicated view encoder is first trained on the front/back labels; an
    identity encoder makes a poor base because it learns to ignore view.
    Held-out accuracy is measured on a subject-disjoint split that neither
    the view encoder nor the probe has seen.
    """
    from sklearn.linear_model import LogisticRegression

    seqs = list(sequences)
    y = np.array([front_back_label(s.view_deg) for s in seqs])
    if len(np.unique(y)) < 2:
        raise FusionError("view classifier needs both front/back and other views")
    subjects = np.array(sorted({s.subject_id for s in seqs}))
    rng = np.random.default_rng(seed)
    n_held = max(1, int(round(heldout_frac * len(subjects)))) if len(subjects) > 1 else 0
    held = set(rng.choice(subjects, size=n_held, replace=False).tolist()) if n_held else set()
    is_held = np.array([s.subject_id in held for s in seqs])
    train = ~is_held
    if len(np.unique(y[train])) < 2:
        train = np.ones(len(seqs), dtype=bool)
    if encoder_params is None:
        tr_seqs = [s for s, t in zip(seqs, train) if t]
        encoder_params = pretrain(tr_seqs, init_params(n_parts, dim, seed=seed), epochs=epochs,
                                  lr=lr, seed=seed, labels=y[train].tolist()).params
    emb = encode_many([s.frames for s in seqs], encoder_params)
    clf = LogisticRegression(C=C, max_iter=2000)
    clf.fit(emb[train], y[train])
    vc = ViewClassifier(encoder_params.without_head(), clf.coef_[0].copy(),
                        float(clf.intercept_[0]))
    if is_held.any():
        pred = vc.predict_proba(emb[is_held]) > vc.threshold
        vc.heldout_accuracy = float(np.mean(pred == y[is_held]))
    return vc


# --------------------------------------------------------------------------
# FVC detection and dissolution

@dataclass
class FvcReport:
    fvc_ids: list = field(default_factory=list)
    fractions: dict = field(default_factory=dict)  # cluster id -> front/back fraction
    reassignments: list = field(default_factory=list)  # (seq, old, new|-1, sim)

    def to_json(self) -> str:
        d = asdict(self)
        d["fractions"] = {str(k): v for k, v in self.fractions.items()}
        return json.dumps(d, sort_keys=True)


def detect_fvc(labels, view_flags, c_low: float = 0.8) -> FvcReport:
    """Clusters whose share of flagged (front/back) members exceeds ``c_low``."""
    a = labels.assignment if isinstance(labels, PseudoLabels) else np.asarray(labels)
    flags = np.asarray(view_flags, dtype=bool)
    if len(flags) != len(a):
        raise FusionError("one view flag per sequence")
    Q = int(a.max() + 1) if len(a) and a.max() >= 0 else 0
    rep = FvcReport()
    for k in range(Q):
        m = a == k
        n = int(m.sum())
        if n == 0:
            raise FusionError(f"cluster {k} is empty")
        frac = float(flags[m].sum()) / n
        rep.fractions[k] = frac
        if frac > c_low:
            rep.fvc_ids.append(k)
    return rep


def reassign_fvc(labels, embeddings, fvc_ids, centroids, s_c: float):
    """Dissolve FVC clusters; members join the most similar non-FVC cluster
    when that similarity exceeds ``s_c``, else become outliers.

    Returns (PseudoLabels with dense ids, FvcReport with the re-assignment log).
    """
    a = labels.assignment if isinstance(labels, PseudoLabels) else np.asarray(labels)
    a = a.copy()
    E = np.asarray(embeddings, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    fvc = sorted(set(int(k) for k in fvc_ids))
    rep = FvcReport(fvc_ids=fvc)
    if not fvc:
        return PseudoLabels(densify(a)), rep
    keep = np.array([k for k in range(len(C)) if k not in set(fvc)], dtype=np.int64)
    members = np.flatnonzero(np.isin(a, fvc))
    for i in members.tolist():
        old = int(a[i])
        if len(keep):
            sims = C[keep] @ E[i]
            j = int(np.argmax(sims))  # first maximum = lowest id
            best, s = int(keep[j]), float(sims[j])
        else:
            best, s = OUTLIER, float("-inf")
        new = best if s > s_c else OUTLIER
        a[i] = new
        rep.reassignments.append((i, old, new, s))
    old_to_new = {}
    dense = densify(a)
    for i in range(len(a)):
        if a[i] != OUTLIER:
            old_to_new[int(a[i])] = int(dense[i])
    rep.reassignments = [(i, o, old_to_new.get(n, OUTLIER) if n != OUTLIER else OUTLIER, s)
                         for i, o, n, s in rep.reassignments]
    return PseudoLabels(dense), rep


# --------------------------------------------------------------------------
# curriculum

@dataclass
class CurriculumState:
    s_o: float = 0.7
    lambda_base: float = 0.005
    s_c: float = 0.7
    lam: float = 0.005
    epoch: int = 0
    C_n: int = 0
    C_o: int = 0
    s_min: float = 0.0

    @classmethod
    def start(cls, s_o=0.7, lambda_base=0.005, s_min=0.0):
        return cls(s_o, lambda_base, s_o, lambda_base, 0, 0, 0, s_min)


def curriculum_step(state: CurriculumState, C_n: int, C_o: int) -> CurriculumState:
    """Lower the threshold by lambda = lambda_base * |C_n / C_o| (floored)."""
    if C_o == 0:
        raise FusionError("old cluster count must be >= 1")
    lam = state.lambda_base * abs(C_n / C_o)
    s_c = max(state.s_c - lam, state.s_min)
    return CurriculumState(state.s_o, state.lambda_base, s_c, lam, state.epoch + 1,
                           int(C_n), int(C_o), state.s_min)

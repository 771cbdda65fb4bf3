"""Training stages: supervised pre-training, clustering baseline, Selective Fusion.

Every random draw comes from a per-purpose stream spawned from the stage
seed (frames, batches, augmentation, clustering), so switching fusion on
or off never shifts the batches or frames the baseline path would see.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cluster as cl
from . import fusion as fu
from . import memory as mem
from .encoder import (EncoderParams, ParamGrads, backward_pooled, forward_pooled,
                      lr_at, pool_frames, sgd_step)
from .silhouette import sample_augment_op, dilate, erode

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    iters: int = 50
    batch_clusters: int = 8
    batch_seqs: int = 16
    lr: float = 1e-4
    weight_decay: float = 5e-4
    milestones: tuple = (3500, 8500)
    n_frames: int = 30
    s_up: float = 0.7
    n_neighbors: int = 40
    mutual_knn: bool = False
    infomap_trials: int = 1
    tau: float = 0.05
    momentum: float = 0.2
    momentum_mode: str = "fixed"
    m_max: float = 0.5
    m_min: float = 0.1
    renormalize: bool = True
    # selective fusion
    a: int = 2
    c_low: float = 0.8
    s_o: float = 0.7
    lambda_base: float = 0.005
    s_min: float = 0.0
    p_identity: float = 0.0
    seed: int = 0

    def validate(self):
        for name in ("epochs", "iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_clusters", "batch_seqs", "n_frames", "n_neighbors", "a",
                     "infomap_trials"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not -1 <= self.s_up <= 1:
            raise ValueError("s_up must lie in [-1, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")

    def schedule(self) -> mem.MomentumSchedule:
        if self.momentum_mode == "cosine":
            return mem.MomentumSchedule(self.m_max, self.m_min, max(self.iters, 1), "cosine")
        return mem.MomentumSchedule.fixed(self.momentum)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    n_clusters: int
    n_outliers: int
    mean_loss: float
    s_c: float | None = None
    lam: float | None = None
    n_fvc: int = 0
    support_sizes: list = field(default_factory=list)
    wall_time: float = 0.0
    losses: list = field(default_factory=list)

    def to_dict(self, with_losses=False):
        d = asdict(self)
        if not with_losses:
            d.pop("losses")
        d["support_sizes"] = sorted(set(self.support_sizes))
        return d


def sample_batch(labels, B_S: int, B_T: int, rng: np.random.Generator) -> np.ndarray:
    """B_S clusters x B_T member sequences; outliers never sampled."""
    a = labels.assignment if isinstance(labels, cl.PseudoLabels) else np.asarray(labels)
    ids = np.unique(a[a >= 0])
    if len(ids) == 0:
        raise ValueError("no clusters to sample from")
    chosen = rng.choice(ids, size=B_S, replace=len(ids) < B_S)
    out = []
    for k in chosen:
        members = np.flatnonzero(a == k)
        out.append(rng.choice(members, size=B_T, replace=len(members) < B_T))
    return np.concatenate(out)


class _Pooler:
    """Set-pooled inputs per sequence; frame subsampling only where it matters.

    When a sequence has no more frames than requested, any draw covers every
    frame (padding repeats frames), so the max-pool is fixed and cached.
    """

    def __init__(self, sequences, n_parts, n_frames):
        self.seqs = sequences
        self.n_parts = n_parts
        self.n_frames = n_frames
        self.cache = {}
        for i, s in enumerate(sequences):
            if s.n_frames <= n_frames:
                self.cache[i] = pool_frames(s.frames, n_parts)

    def select(self, idx, rng) -> list:
        """Per-sequence frame indices (None where the pooled input is cached)."""
        return [None if i in self.cache else
                np.sort(rng.choice(self.seqs[i].n_frames, size=self.n_frames, replace=False))
                for i in np.asarray(idx).tolist()]

    def pooled(self, idx, rng, selection=None) -> np.ndarray:
        idx = np.asarray(idx).tolist()
        sel = self.select(idx, rng) if selection is None else selection
        return np.stack([self.cache[i] if f is None else
                         pool_frames(self.seqs[i].frames[f], self.n_parts)
                         for i, f in zip(idx, sel)])


def _augmented_pooled(pooler: _Pooler, selection, aug_rng, p_identity) -> np.ndarray:
    out = []
    for i, f in enumerate(selection):
        frames = pooler.seqs[i].frames if f is None else pooler.seqs[i].frames[f]
        op = sample_augment_op(aug_rng, p_identity)
        fn = dilate if op.op == "dilate" else erode
        for r0, r1, k in op.segments():
            frames = fn(frames, k, (r0, r1))
        out.append(pool_frames(frames, pooler.n_parts))
    return np.stack(out)


def _embed_all(pooled, params, chunk=512):
    return np.concatenate([forward_pooled(pooled[i:i + chunk], params)[0]
                           for i in range(0, len(pooled), chunk)])


@dataclass
class StageState:
    """Everything besides the encoder needed to resume a stage exactly."""

    epoch: int = 0  # next epoch to run
    step: int = 0
    prev_q: int | None = None
    curriculum: fu.CurriculumState = field(default_factory=fu.CurriculumState)
    rng: dict = field(default_factory=dict)  # stream name -> bit generator state

    def to_dict(self):
        return {"epoch": self.epoch, "step": self.step, "prev_q": self.prev_q,
                "curriculum": asdict(self.curriculum), "rng": self.rng}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["epoch"]), int(d["step"]), d.get("prev_q"),
                   fu.CurriculumState(**d["curriculum"]), dict(d["rng"]))


def _train_stage(stage, sequences, params: EncoderParams, cfg: TrainConfig,
                 view_flags=None, fusion=False, callback=None, resume: StageState | None = None,
                 checkpoint_every=0, on_checkpoint=None):
    cfg.validate()
    seqs = list(sequences)
    params = params.without_head()
    records = []
    if cfg.epochs == 0:
        return params, records
    frame_ss, batch_ss, aug_ss, clu_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    rngs = {"frame": np.random.default_rng(frame_ss), "batch": np.random.default_rng(batch_ss),
            "aug": np.random.default_rng(aug_ss)}
    clu_seeds = np.random.default_rng(clu_ss).integers(0, 2**31 - 1, size=cfg.epochs)
    state = resume or StageState(curriculum=fu.CurriculumState.start(cfg.s_o, cfg.lambda_base,
                                                                      cfg.s_min))
    for name, st in state.rng.items():
        rngs[name].bit_generator.state = st
    frame_rng, batch_rng, aug_rng = rngs["frame"], rngs["batch"], rngs["aug"]
    pooler = _Pooler(seqs, params.n_parts, cfg.n_frames)
    curriculum = state.curriculum
    prev_q = state.prev_q
    step = state.step
    for ep in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        selection = pooler.select(range(len(seqs)), frame_rng)
        pooled_all = pooler.pooled(range(len(seqs)), None, selection)
        emb = _embed_all(pooled_all, params)
        labels, _ = cl.cluster_embeddings(emb, cfg.n_neighbors, cfg.s_up,
                                          seed=int(clu_seeds[ep]), trials=cfg.infomap_trials,
                                          mutual=cfg.mutual_knn)
        rec = EpochRecord(stage, ep, 0, 0, float("nan"))
        support = None
        bank = None
        if fusion:
            emb_ca = _embed_all(_augmented_pooled(pooler, selection, aug_rng, cfg.p_identity),
                                params)
            q_raw = labels.n_clusters
            raw_cents = cl.compute_centroids(emb, labels)
            fvc = fu.detect_fvc(labels, view_flags, cfg.c_low)
            rec.s_c = curriculum.s_c
            labels, _ = fu.reassign_fvc(labels, emb, fvc.fvc_ids, raw_cents, curriculum.s_c)
            rec.n_fvc = len(fvc.fvc_ids)
            curriculum = fu.curriculum_step(curriculum, q_raw, prev_q or q_raw)
            rec.lam = curriculum.lam
            prev_q = q_raw
        if labels.n_clusters == 0:
            log.warning("%s epoch %d: every sequence is an outlier; skipping", stage, ep)
            rec.n_outliers = labels.n_outliers()
        else:
            cents = cl.compute_centroids(emb, labels)
            if fusion:
                aug_cents = cl.compute_centroids(emb_ca, labels)
                support = fu.select_support_sets(aug_cents, cents, min(cfg.a, len(cents)))
                rec.support_sizes = [len(s) for s in support]
            bank = mem.init_bank(cents, cfg.tau, cfg.schedule(), cfg.renormalize)
            y_all = labels.assignment
            rec.n_clusters = labels.n_clusters
            rec.n_outliers = labels.n_outliers()
            for it in range(cfg.iters):
                idx = sample_batch(y_all, cfg.batch_clusters, cfg.batch_seqs, batch_rng)
                pooled = pooler.pooled(idx, frame_rng)
                e, norm = forward_pooled(pooled, params)
                y = y_all[idx]
                rep = mem.cluster_nce(bank, e, y, check_unit=False)
                gW = backward_pooled(pooled, params, e, norm, rep.grads)
                params = sgd_step(params, ParamGrads(gW), lr_at(step, cfg.lr, cfg.milestones),
                                  cfg.weight_decay)
                bank.step = it
                m = bank.momentum
                for q, k in zip(e, y.tolist()):
                    if support is None:
                        mem.momentum_update(bank, q, k, m)
                    else:
                        mem.multi_cluster_update(bank, q, support[k], m)
                rec.losses.append(rep.loss)
                step += 1
        rec.mean_loss = float(np.mean(rec.losses)) if rec.losses else float("nan")
        rec.wall_time = time.perf_counter() - t0
        records.append(rec)
        log.info("%s epoch %d: Q=%d outliers=%d fvc=%d loss=%.4f s_c=%s (%.1fs)", stage, ep,
                 rec.n_clusters, rec.n_outliers, rec.n_fvc, rec.mean_loss, rec.s_c,
                 rec.wall_time)
        if callback is not None:
            callback(rec, params)
        last = ep == cfg.epochs - 1
        if on_checkpoint is not None and (last or (checkpoint_every and
                                                   (ep + 1) % checkpoint_every == 0)):
            st = StageState(ep + 1, step, prev_q, curriculum,
                            {k: r.bit_generator.state for k, r in rngs.items()})
            on_checkpoint(params, bank, st)
    return params, records


def run_baseline(sequences, params: EncoderParams, cfg: TrainConfig, callback=None, **ckpt):
    """Cluster-contrast baseline: returns (params, epoch records).

    ``ckpt`` takes ``resume``, ``checkpoint_every`` and ``on_checkpoint``.
    """
    return _train_stage("baseline", sequences, params, cfg, callback=callback, **ckpt)


def run_selective_fusion(sequences, params: EncoderParams, cfg: TrainConfig,
                         view_classifier: fu.ViewClassifier | None = None, view_flags=None,
                         callback=None, **ckpt):
    """Selective Fusion stage.  Front/back flags come from ``view_flags`` if
    given, else from ``view_classifier`` (computed once; the classifier is
    frozen), else from the true view metadata."""
    seqs = list(sequences)
    if view_flags is None:
        vc = view_classifier or fu.ViewClassifier.oracle()
        view_flags = vc.flags(seqs)
    view_flags = np.asarray(view_flags, dtype=bool)
    return _train_stage("sf", seqs, params, cfg, view_flags=view_flags, fusion=True,
                        callback=callback, **ckpt)

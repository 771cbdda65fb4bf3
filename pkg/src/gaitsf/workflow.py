"""Stage drivers shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging
import math

import numpy as np

from . import fusion as fu
from .config import RunConfig
from .encoder import encode_many, init_params, nearest_centroid_rank1, pretrain
from .evaluation import SeqMeta, evaluate
from .pipeline import run_baseline, run_selective_fusion
from .silhouette import generate_dataset

log = logging.getLogger(__name__)

FRONT_BACK = (0, 180)


def generate_splits(cfg: RunConfig):
    """(pretrain sequences, train sequences); subject ids never overlap."""
    pre, _ = generate_dataset(cfg.synth_spec("pretrain"))
    tr, _ = generate_dataset(cfg.synth_spec("train"))
    return pre, tr


def pretrain_stage(cfg: RunConfig, seqs, epochs=None):
    """Identity encoder, view classifier and per-epoch loss records."""
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    res = pretrain(seqs, init_params(cfg.n_parts, cfg.dim, seed=cfg.seed), epochs=epochs,
                   lr=cfg.pretrain_lr, weight_decay=cfg.pretrain_weight_decay,
                   batch_size=cfg.pretrain_batch, n_frames=cfg.train_frames, seed=cfg.seed,
                   logit_scale=cfg.logit_scale)
    steps = math.ceil(len(seqs) / cfg.pretrain_batch)
    history = [{"stage": "pretrain", "epoch": e,
                "mean_loss": float(np.mean(res.loss_history[e * steps:(e + 1) * steps]))}
               for e in range(epochs)]
    vc = fu.train_view_classifier(seqs, None, seed=cfg.seed, epochs=cfg.view_epochs,
                                  lr=cfg.view_lr, n_parts=cfg.n_parts, dim=cfg.dim)
    log.info("view classifier held-out accuracy %.3f", vc.heldout_accuracy)
    return res.params, vc, history


def view_flags_for(cfg: RunConfig, seqs, view_classifier=None):
    if cfg.view_flags == "oracle" or view_classifier is None:
        return fu.ViewClassifier.oracle().flags(seqs)
    return view_classifier.flags(seqs)


def baseline_stage(cfg: RunConfig, seqs, params, epochs=None, **ckpt):
    tc = cfg.train_config("baseline")
    if epochs is not None:
        tc.epochs = epochs
    return run_baseline(seqs, params, tc, **ckpt)


def sf_stage(cfg: RunConfig, seqs, params, view_classifier=None, epochs=None, **ckpt):
    tc = cfg.train_config("sf")
    if epochs is not None:
        tc.epochs = epochs
    flags = view_flags_for(cfg, seqs, view_classifier)
    return run_selective_fusion(seqs, params, tc, view_flags=flags, **ckpt)


def evaluate_params(cfg: RunConfig, seqs, params, ranks=None, protocol=None):
    emb = encode_many([s.frames for s in seqs], params)
    return evaluate(emb, [SeqMeta.of(s) for s in seqs], protocol or cfg.protocol(),
                    ranks or cfg.ranks, cfg.exclude_same_view)


def pretrain_rank1(seqs, params) -> float:
    emb = encode_many([s.frames for s in seqs], params)
    return nearest_centroid_rank1(emb, [s.subject_id for s in seqs])

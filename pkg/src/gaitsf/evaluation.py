"""Gallery/probe identification: rank-k per condition and per probe view."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np


class ProtocolError(ValueError):
    pass


@dataclass
class SeqMeta:
    seq_id: str
    subject_id: int
    condition: str
    view_deg: int
    seq_index: int = 1

    @classmethod
    def of(cls, seq):
        return cls(seq.seq_id, seq.subject_id, seq.condition, seq.view_deg,
                   getattr(seq, "seq_index", 1))


@dataclass
class Protocol:
    gallery_condition: str = "NM"
    gallery_seqs: tuple = (1, 2, 3, 4)
    probe_conditions: tuple = ("NM", "BG", "CL")

    def split(self, metas):
        """Indices of gallery and probe entries."""
        gal, probe = [], []
        for i, m in enumerate(metas):
            if m.condition == self.gallery_condition and m.seq_index in self.gallery_seqs:
                gal.append(i)
            elif m.condition in self.probe_conditions:
                probe.append(i)
        return np.array(gal, dtype=np.int64), np.array(probe, dtype=np.int64)


@dataclass
class ResultTable:
    ranks: list
    per_condition: dict  # cond -> {"rank-k": pct}
    per_view: dict  # cond -> {view: rank-1 pct}
    n_probes: dict = field(default_factory=dict)
    skipped: int = 0
    exclude_same_view: bool = True
    per_view_n: dict = field(default_factory=dict)  # cond -> {view: probe count}

    def to_dict(self):
        return {
            "ranks": list(self.ranks),
            "exclude_same_view": self.exclude_same_view,
            "per_condition": {c: dict(v) for c, v in self.per_condition.items()},
            "per_view": {c: {str(k): v for k, v in d.items()} for c, d in self.per_view.items()},
            "n_probes": dict(self.n_probes),
            "per_view_n": {c: {str(k): v for k, v in d.items()}
                           for c, d in self.per_view_n.items()},
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["ranks"]), {c: dict(v) for c, v in d["per_condition"].items()},
                   {c: {int(k): v for k, v in m.items()} for c, m in d["per_view"].items()},
                   dict(d.get("n_probes", {})), int(d.get("skipped", 0)),
                   bool(d.get("exclude_same_view", True)),
                   {c: {int(k): v for k, v in m.items()}
                    for c, m in d.get("per_view_n", {}).items()})

    def rank(self, condition, k=1) -> float:
        return self.per_condition[condition][f"rank-{k}"]

    def view_rank1(self, views, conditions=None) -> float:
        """Rank-1 (%) pooled over the probes whose view is in ``views``."""
        hits = n = 0.0
        for c, d in self.per_view.items():
            if conditions is not None and c not in conditions:
                continue
            for v, acc in d.items():
                if v in views:
                    cnt = self.per_view_n.get(c, {}).get(v, 1)
                    hits += acc * cnt
                    n += cnt
        if n == 0:
            raise ProtocolError(f"no probes at views {sorted(views)}")
        return hits / n


def rank_k(gallery_emb, gallery_meta, probe_emb, probe_meta, ks=(1, 5),
           exclude_same_view=True) -> ResultTable:
    """Rank-k identification accuracy (%) per probe condition and per view.

    Gallery entries are ranked by cosine similarity; ties go to the entry
    with the smaller seq_id.  With ``exclude_same_view`` a probe is never
    matched against gallery entries of its own view; probes left with an
    empty gallery are counted in ``skipped``.
    """
    ks = sorted({int(k) for k in ([ks] if np.isscalar(ks) else ks)})
    if not ks or ks[0] < 1:
        raise ProtocolError("k must be >= 1")
    G = np.asarray(gallery_emb, dtype=np.float64)
    P = np.asarray(probe_emb, dtype=np.float64)
    gal_subjects = {m.subject_id for m in gallery_meta}
    missing = sorted({m.subject_id for m in probe_meta} - gal_subjects)
    if missing:
        raise ProtocolError(f"probe subjects missing from gallery: {missing}")
    order = sorted(range(len(gallery_meta)), key=lambda i: gallery_meta[i].seq_id)
    G = G[order]
    g_sub = np.array([gallery_meta[i].subject_id for i in order])
    g_view = np.array([gallery_meta[i].view_deg for i in order])
    sims = P @ G.T
    hits = {c: {k: [] for k in ks} for c in dict.fromkeys(m.condition for m in probe_meta)}
    view_hits = {c: {} for c in hits}
    skipped = 0
    for j, m in enumerate(probe_meta):
        cand = np.flatnonzero(g_view != m.view_deg) if exclude_same_view else np.arange(len(G))
        if len(cand) == 0:
            skipped += 1
            continue
        s = sims[j, cand]
        ranked = cand[np.argsort(-s, kind="stable")]
        correct = g_sub[ranked] == m.subject_id
        first = int(np.argmax(correct)) if correct.any() else len(correct)
        for k in ks:
            hits[m.condition][k].append(first < k)
        view_hits[m.condition].setdefault(m.view_deg, []).append(first < 1)
    per_condition, per_view, n_probes, per_view_n = {}, {}, {}, {}
    for c in hits:
        n = len(hits[c][ks[0]])
        if n == 0:
            continue
        n_probes[c] = n
        per_condition[c] = {f"rank-{k}": 100.0 * float(np.mean(hits[c][k])) for k in ks}
        per_view[c] = {v: 100.0 * float(np.mean(h)) for v, h in sorted(view_hits[c].items())}
        per_view_n[c] = {v: len(h) for v, h in sorted(view_hits[c].items())}
    return ResultTable(ks, per_condition, per_view, n_probes, skipped, exclude_same_view,
                       per_view_n)


def evaluate(embeddings, metas, protocol: Protocol | None = None, ks=(1, 5),
             exclude_same_view=True) -> ResultTable:
    protocol = protocol or Protocol()
    gal, probe = protocol.split(metas)
    if len(gal) == 0:
        raise ProtocolError("empty gallery")
    if len(probe) == 0:
        raise ProtocolError("empty probe set")
    E = np.asarray(embeddings)
    return rank_k(E[gal], [metas[i] for i in gal], E[probe], [metas[i] for i in probe], ks,
                  exclude_same_view)


def write_reports(table: ResultTable, out_dir) -> list:
    """Write ``metrics.json`` and ``per_view.csv`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    mpath = os.path.join(out_dir, "metrics.json")
    with open(mpath, "w") as fh:
        json.dump(table.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    views = sorted({v for d in table.per_view.values() for v in d})
    cpath = os.path.join(out_dir, "per_view.csv")
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition"] + [str(v) for v in views])
        for c, d in table.per_view.items():
            cells = [f"{d[v]:.1f}" if v in d else "" for v in views]
            w.writerow([c] + cells)
    return [mpath, cpath]


def read_metrics(path) -> ResultTable:
    with open(path) as fh:
        return ResultTable.from_dict(json.load(fh))

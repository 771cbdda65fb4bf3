"""On-disk formats: dataset directories, PGM frames, binary arrays.

Array files are ``MAGIC | u32 header length | JSON header | raw data``; the
header lists each array's name, shape and byte offset, and the data are
little-endian float64 packed back to back.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .encoder import EncoderParams
from .fusion import ViewClassifier
from .memory import MemoryBank, MomentumSchedule
from .silhouette import GaitSequence, Manifest

MAGIC = b"GSFA"
VERSION = 1


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# binary arrays

def save_arrays(path, arrays: dict, meta: dict | None = None, kind: str = "arrays"):
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {"version": VERSION, "kind": kind, "dtype": "<f8", "arrays": entries,
              "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_arrays(path):
    """Return (dict of arrays, header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an array file")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
    except ValueError as e:
        raise FormatError(f"{path}: bad header ({e})") from None
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    data = raw[8 + n:]
    out = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated array {e['name']}")
        out[e["name"]] = np.frombuffer(data[e["offset"]:end], dtype="<f8").reshape(
            e["shape"]).astype(np.float64)
    return out, header


def save_params(path, params: EncoderParams, meta: dict | None = None):
    arrays = {"W": params.W}
    if params.head is not None:
        arrays["head"] = params.head
    if params.head_bias is not None:
        arrays["head_bias"] = params.head_bias
    m = {"P": params.n_parts, "D": params.dim}
    m.update(meta or {})
    save_arrays(path, arrays, m, kind="encoder")


def load_params(path) -> EncoderParams:
    arrays, header = load_arrays(path)
    if header["kind"] != "encoder":
        raise FormatError(f"{path}: expected encoder params, found {header['kind']}")
    p = EncoderParams(arrays["W"], arrays.get("head"), arrays.get("head_bias"))
    m = header["meta"]
    if (p.n_parts, p.dim) != (m["P"], m["D"]):
        raise FormatError(f"{path}: header P/D disagree with array shapes")
    return p


def read_meta(path) -> dict:
    return load_arrays(path)[1]["meta"]


def save_bank(path, bank: MemoryBank):
    s = bank.schedule
    save_arrays(path, {"centroids": bank.centroids},
                {"tau": bank.tau, "renormalize": bank.renormalize, "step": bank.step,
                 "schedule": {"m_max": s.m_max, "m_min": s.m_min, "T": s.T, "mode": s.mode}},
                kind="bank")


def load_bank(path) -> MemoryBank:
    arrays, header = load_arrays(path)
    if header["kind"] != "bank":
        raise FormatError(f"{path}: expected a memory bank, found {header['kind']}")
    m = header["meta"]
    return MemoryBank(arrays["centroids"], m["tau"], MomentumSchedule(**m["schedule"]),
                      m["renormalize"], m["step"])


# --------------------------------------------------------------------------
# PGM frames and dataset directories

def write_pgm(path, frame):
    img = np.where(np.asarray(frame, dtype=bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} != 255")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) > 127


def save_dataset(out_dir, seqs, manifest: Manifest | None = None, extra=None):
    """Write ``manifest.jsonl`` plus ``seqs/<seq_id>/frame_NNNN.pgm``.

    ``extra`` maps seq_id to additional manifest fields (e.g. split).
    """
    extra = extra or {}
    os.makedirs(os.path.join(out_dir, "seqs"), exist_ok=True)
    lines = []
    records = {r["seq_id"]: r for r in manifest.records} if manifest else {}
    for q in seqs:
        rel = f"seqs/{q.seq_id}"
        d = os.path.join(out_dir, rel)
        os.makedirs(d, exist_ok=True)
        for t, f in enumerate(q.frames):
            write_pgm(os.path.join(d, f"frame_{t:04d}.pgm"), f)
        rec = dict(records.get(q.seq_id, {}))
        rec.update(seq_id=q.seq_id, subject_id=q.subject_id, condition=q.condition,
                   view_deg=q.view_deg, seq_index=q.seq_index, n_frames=q.n_frames, path=rel)
        rec.update(extra.get(q.seq_id, {}))
        lines.append(json.dumps(rec, sort_keys=True))
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(data_dir) -> list:
    path = os.path.join(data_dir, "manifest.jsonl")
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except ValueError as e:
                raise FormatError(f"{path}:{n}: {e}") from None
    return out


def load_dataset(data_dir, split=None) -> list:
    """Sequences listed in the manifest, optionally only those of ``split``."""
    seqs = []
    for r in read_manifest(data_dir):
        if split is not None and r.get("split") != split:
            continue
        d = os.path.join(data_dir, r["path"])
        frames = np.stack([read_pgm(os.path.join(d, f"frame_{t:04d}.pgm"))
                           for t in range(int(r["n_frames"]))])
        seqs.append(GaitSequence(r["seq_id"], int(r["subject_id"]), r["condition"],
                                 int(r["view_deg"]), frames, int(r.get("seq_index", 1))))
    return seqs


def save_view_classifier(path, vc: ViewClassifier):
    save_arrays(path, {"W": vc.encoder.W, "weights": vc.weights, "bias": np.array([vc.bias])},
                {"threshold": vc.threshold, "heldout_accuracy": vc.heldout_accuracy},
                kind="view")


def load_view_classifier(path) -> ViewClassifier:
    arrays, header = load_arrays(path)
    if header["kind"] != "view":
        raise FormatError(f"{path}: expected a view classifier, found {header['kind']}")
    m = header["meta"]
    return ViewClassifier(EncoderParams(arrays["W"]), arrays["weights"], float(arrays["bias"][0]),
                          m["threshold"], False, m["heldout_accuracy"])

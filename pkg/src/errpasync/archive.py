"""On-disk formats: session directories and model files.

A session directory holds ``meta.json``, ``eeg.bin`` (little-endian float32,
frame-interleaved) and ``events.jsonl`` (one ``{t, kind, payload}`` object
per line, sorted by ``t``). A model file is a JSON document with base64
encoded little-endian float64 arrays.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .classifier import GenericModel, LdaModel
from .dsp import FilterSpec
from .features import PcaModel
from .session import Block, SessionLog, Trial

ARCHIVE_FORMAT = "errpasync-session"
ARCHIVE_VERSION = 1
MODEL_FORMAT = "errpasync-model"
MODEL_VERSION = 1


class FormatError(ValueError):
    """A file on disk does not follow the expected layout."""


# --- arrays ------------------------------------------------------------------

def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj) -> np.ndarray:
    try:
        if obj["dtype"] != "<f8":
            raise FormatError(f"unsupported array dtype {obj['dtype']!r}")
        raw = base64.b64decode(obj["data"], validate=True)
        return np.frombuffer(raw, dtype="<f8").astype(float).reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed array: {exc}") from exc


# --- model file ----------------------------------------------------------------

def model_to_dict(model: GenericModel) -> dict:
    pca, lda = model.pca, model.lda
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "threshold": model.threshold,
        "filter": model.filter_spec.to_dict(),
        "n_channels": model.n_channels,
        "window": model.window,
        "leap": model.leap,
        "pca": {
            "mean": encode_array(pca.mean),
            "components": encode_array(pca.components),
            "explained_variance": encode_array(pca.explained_variance),
            "explained_variance_ratio": encode_array(pca.explained_variance_ratio),
            "total_variance": pca.total_variance,
        },
        "lda": {
            "weights": encode_array(lda.weights),
            "bias": lda.bias,
            "shrinkage": lda.shrinkage,
            "classes": list(lda.classes),
        },
        "info": model.info,
    }


def model_from_dict(doc: dict) -> GenericModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise FormatError("not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model file version {doc.get('version')!r}")
    try:
        p, l = doc["pca"], doc["lda"]
        pca = PcaModel(decode_array(p["mean"]), decode_array(p["components"]),
                       decode_array(p["explained_variance"]),
                       decode_array(p["explained_variance_ratio"]),
                       float(p["total_variance"]))
        lda = LdaModel(decode_array(l["weights"]), float(l["bias"]), float(l["shrinkage"]),
                       tuple(l["classes"]))
        return GenericModel(pca, lda, float(doc["threshold"]), FilterSpec(**doc["filter"]),
                            int(doc["n_channels"]), float(doc["window"]), float(doc["leap"]),
                            dict(doc.get("info", {})))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed model file: {exc}") from exc


def save_model(model: GenericModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n")


def load_model(path) -> GenericModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return model_from_dict(doc)


# --- session directory ---------------------------------------------------------

def write_session(session: SessionLog, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    eeg = np.ascontiguousarray(session.eeg, dtype="<f4")
    if eeg.ndim != 2 or eeg.shape[1] != len(session.channel_names):
        raise ValueError("eeg must be (frames, channels)")
    meta = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "sample_rate": session.sample_rate,
        "channel_names": list(session.channel_names),
        "n_frames": int(eeg.shape[0]),
        "participant": session.participant,
        "blocks": [b.to_dict() for b in session.blocks],
        "thresholds": {str(b.block): b.tau for b in session.blocks},
        "trials": [t.to_dict() for t in session.trials],
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    (d / "eeg.bin").write_bytes(eeg.tobytes())
    events = sorted(session.events, key=lambda e: e["t"])
    with open(d / "events.jsonl", "w") as fh:
        for e in events:
            fh.write(json.dumps({"t": e["t"], "kind": e["kind"], "payload": e["payload"]},
                                sort_keys=True) + "\n")
    return d


def read_session(directory) -> SessionLog:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a session directory")
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: missing meta.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d}/meta.json: invalid JSON ({exc})") from exc
    if meta.get("format") != ARCHIVE_FORMAT or meta.get("version") != ARCHIVE_VERSION:
        raise FormatError(f"{d}: unsupported archive format or version")
    try:
        names = list(meta["channel_names"])
        n_frames = int(meta["n_frames"])
        blocks = [Block(**b) for b in meta["blocks"]]
        trials = [Trial(**t) for t in meta["trials"]]
        sample_rate = float(meta["sample_rate"])
        participant = dict(meta["participant"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{d}/meta.json: {exc}") from exc
    try:
        raw = (d / "eeg.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: missing eeg.bin") from exc
    if len(raw) != n_frames * len(names) * 4:
        raise FormatError(f"{d}/eeg.bin: expected {n_frames * len(names) * 4} bytes, "
                          f"found {len(raw)}")
    eeg = np.frombuffer(raw, dtype="<f4").reshape(n_frames, len(names)).astype(np.float32)
    events = []
    try:
        with open(d / "events.jsonl") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                e = json.loads(line)
                if set(e) != {"t", "kind", "payload"}:
                    raise FormatError(f"{d}/events.jsonl:{lineno}: bad record keys")
                events.append(e)
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: missing events.jsonl") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d}/events.jsonl: invalid JSON ({exc})") from exc
    if any(a["t"] > b["t"] for a, b in zip(events, events[1:])):
        raise FormatError(f"{d}/events.jsonl: events are not sorted by time")
    return SessionLog(participant, sample_rate, names, eeg, events, blocks, trials)

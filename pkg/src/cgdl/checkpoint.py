"""Single-file checkpoint container for model, detector and run config.

Layout (all integers little-endian)::

    8 bytes   magic b"CGDLCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (sorted keys)
    ...       float64 array payload, concatenated in header order

The header lists every array with its name, shape and byte offset into the
payload. Nothing time- or host-dependent is written, so identical inputs give
identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .detector import ClassGaussian, DetectorThresholds, OpenSetDetector
from .errors import CheckpointError
from .ladder import LadderConfig, LadderModel

MAGIC = b"CGDLCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model: LadderModel
    detector: OpenSetDetector | None = None
    seed: int = 0
    epoch: int = 0
    run_config: dict = field(default_factory=dict)
    tool_version: str = __version__


def _pack_arrays(arrays: list[tuple[str, np.ndarray]]) -> tuple[list[dict], bytes]:
    index, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = [(f"param/{k}", v.data) for k, v in ckpt.model.params.items()]
    det_header = None
    if ckpt.detector is not None:
        det = ckpt.detector
        det_header = {
            "kind": det.kind,
            "tau_l": det.thresholds.tau_l,
            "tau_r": det.thresholds.tau_r,
            "softmax_threshold": det.softmax_threshold,
            "classes": [{"class_id": g.class_id, "count": g.count} for g in det.gaussians],
        }
        for g in det.gaussians:
            arrays.append((f"gauss/{g.class_id}/m", g.m))
            arrays.append((f"gauss/{g.class_id}/var", g.var))
    index, payload = _pack_arrays(arrays)
    header = {
        "tool_version": ckpt.tool_version,
        "model_config": ckpt.model.config.to_dict(),
        "seed": int(ckpt.seed),
        "epoch": int(ckpt.epoch),
        "run_config": ckpt.run_config,
        "detector": det_header,
        "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    start = _PREFIX.size
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = memoryview(buf)[start + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 8 * n
        if end > len(payload):
            raise CheckpointError(f"checkpoint truncated inside array {entry['name']}")
        arrays[entry["name"]] = (
            np.frombuffer(payload[entry["offset"]:end], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        )
    config = LadderConfig.from_dict(header["model_config"])
    params = {k[len("param/"):]: nx.parameter(v) for k, v in arrays.items() if k.startswith("param/")}
    expected = LadderModel.init(config, 0).params
    if set(params) != set(expected) or any(params[k].shape != expected[k].shape for k in expected):
        raise CheckpointError("checkpoint parameters do not match its model config")
    model = LadderModel(config, {k: params[k] for k in expected})
    detector = None
    if header.get("detector"):
        d = header["detector"]
        gaussians = [
            ClassGaussian(
                class_id=c["class_id"],
                m=arrays[f"gauss/{c['class_id']}/m"],
                var=arrays[f"gauss/{c['class_id']}/var"],
                count=c["count"],
            )
            for c in d["classes"]
        ]
        detector = OpenSetDetector(
            gaussians,
            DetectorThresholds(tau_l=d["tau_l"], tau_r=d["tau_r"]),
            kind=d["kind"],
            softmax_threshold=d["softmax_threshold"],
        )
    return Checkpoint(
        model=model,
        detector=detector,
        seed=header["seed"],
        epoch=header["epoch"],
        run_config=header.get("run_config", {}),
        tool_version=header.get("tool_version", ""),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())

"""Single-file binary checkpoints.

Layout: a magic line, an 8-byte little-endian header length, a JSON header,
then all parameter arrays concatenated as little-endian float64 in header
order. The header records the model hyperparameters, the graph config and
its hash, the parameter name/shape table, normalization statistics, the
fitted imputer, a payload SHA-256 and free-form metadata. Integrity and
shape agreement are verified on load.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import ConfigError, ShapeError
from .graph import build_graph
from .model import ModelHyper, ModelParams
from .preprocessing import NormStats
from .tgmi import TgmiModel

MAGIC = b"GNODE1\n"
FORMAT_VERSION = 1


def save_checkpoint(path, params, graph, stats=None, tgmi=None, meta=None):
    """Write params (+ stats, imputer, metadata) to ``path``."""
    names = params.names()
    table = [[name, list(params[name].shape)] for name in names]
    payload = b"".join(
        np.ascontiguousarray(params[name].data, dtype="<f8").tobytes()
        for name in names)
    header = {
        "format": FORMAT_VERSION,
        "hyper": params.hyper.as_dict(),
        "n_plant": params.n_plant,
        "graph_config": graph.to_config(),
        "graph_hash": graph.graph_hash(),
        "params": table,
        "norm_stats": stats.as_dict() if stats is not None else None,
        "tgmi": tgmi.as_dict() if tgmi is not None else None,
        "meta": meta or {},
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, graph, stats, tgmi, meta).

    ``stats``/``tgmi`` are None when absent. Raises ConfigError on magic,
    version or integrity mismatch and ShapeError on a bad parameter table.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a model checkpoint "
                              f"(bad magic {magic!r})")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        if header.get("format") != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint format "
                              f"{header.get('format')!r}")
        payload = fh.read(int(header["payload_bytes"]))
    if len(payload) != int(header["payload_bytes"]):
        raise ConfigError(f"{path}: truncated payload")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ConfigError(f"{path}: payload checksum mismatch")

    graph = build_graph(header["graph_config"])
    if graph.graph_hash() != header["graph_hash"]:
        raise ConfigError(f"{path}: graph hash mismatch")
    hyper = ModelHyper.from_dict(header["hyper"])
    params = ModelParams(hyper, int(header["n_plant"]))

    flat = np.frombuffer(payload, dtype="<f8")
    pos = 0
    from . import autodiff as ad
    for name, shape in header["params"]:
        shape = tuple(int(s) for s in shape)
        size = int(np.prod(shape)) if shape else 1
        if pos + size > flat.size:
            raise ShapeError(f"{path}: payload too short at {name}")
        arr = flat[pos:pos + size].reshape(shape).astype(np.float64)
        params._tensors[name] = ad.Tensor(arr.copy())
        pos += size
    if pos != flat.size:
        raise ShapeError(f"{path}: {flat.size - pos} unread payload values")

    stats = (NormStats.from_dict(header["norm_stats"])
             if header.get("norm_stats") else None)
    tgmi = (TgmiModel.from_dict(header["tgmi"])
            if header.get("tgmi") else None)
    return params, graph, stats, tgmi, header.get("meta", {})

"""Self-describing binary checkpoints for full and quantized models.

Layout: an 8-byte magic, a little-endian uint32 version, a uint32 record
count, then records of (name, dtype tag, shape, payload). Weight payloads
are little-endian 32-bit reals. A quantized checkpoint reuses the same
container and adds, per cluster, its bit width, its 64-bit scale, the
member parameter names, and bit-packed level payloads; residue tensors
stay plain 32-bit records.

Writes are deterministic: the same model produces the same bytes.
"""

from __future__ import annotations

import struct
from collections import namedtuple

import numpy as np

from .exceptions import CheckpointFormatError, ShapeError
from .model import TransformerLM, from_param_arrays
from .quant import (
    FULL_PRECISION_BITS,
    LayerCluster,
    QuantTable,
    QuantizedModel,
    pack_levels,
    unpack_levels,
)

MAGIC = b"QLMCHKPT"
VERSION = 1

TAG_F32 = 0
TAG_F64 = 1
TAG_I64 = 2
TAG_BYTES = 3

_META_FIELDS = ("vocab_size", "d_model", "d_ff", "n_heads", "n_layers",
                "max_len", "tied")

Record = namedtuple("Record", "name tag shape payload")


def _encode_record(rec: Record) -> bytes:
    name = rec.name.encode("utf-8")
    head = struct.pack("<H", len(name)) + name
    head += struct.pack("<BB", rec.tag, len(rec.shape))
    head += struct.pack(f"<{len(rec.shape)}I", *rec.shape)
    head += struct.pack("<Q", len(rec.payload))
    return head + rec.payload


def _tensor_record(name: str, arr: np.ndarray, tag: int = TAG_F32) -> Record:
    dtype = {TAG_F32: "<f4", TAG_F64: "<f8", TAG_I64: "<i8"}[tag]
    data = np.ascontiguousarray(arr).astype(dtype).tobytes()
    return Record(name, tag, tuple(int(s) for s in arr.shape), data)


def _scalar_record(name: str, value, tag: int) -> Record:
    return _tensor_record(name, np.asarray(value), tag)


def _bytes_record(name: str, payload: bytes, shape=None) -> Record:
    shape = (len(payload),) if shape is None else tuple(int(s) for s in shape)
    return Record(name, TAG_BYTES, shape, payload)


def write_records(path, records) -> None:
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", MAGIC, VERSION, len(records)))
        for rec in records:
            fh.write(_encode_record(rec))


def read_records(path) -> dict:
    """Parse a container into an ordered name -> Record mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise CheckpointFormatError("file too short for a checkpoint header")
    magic, version, count = struct.unpack_from("<8sII", blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    offset = 16
    records = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag, ndim = struct.unpack_from("<BB", blob, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            (payload_len,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            payload = blob[offset:offset + payload_len]
            if len(payload) != payload_len:
                raise CheckpointFormatError(f"record {name} is truncated")
            offset += payload_len
        except struct.error as e:
            raise CheckpointFormatError("truncated checkpoint") from e
        if tag not in (TAG_F32, TAG_F64, TAG_I64, TAG_BYTES):
            raise CheckpointFormatError(f"record {name} has unknown dtype tag {tag}")
        records[name] = Record(name, tag, tuple(shape), payload)
    if offset != len(blob):
        raise CheckpointFormatError("trailing bytes after the last record")
    return records


def _decode_array(rec: Record) -> np.ndarray:
    dtype = {TAG_F32: "<f4", TAG_F64: "<f8", TAG_I64: "<i8"}[rec.tag]
    count = int(np.prod(rec.shape)) if rec.shape else 1
    arr = np.frombuffer(rec.payload, dtype=dtype)
    if arr.size != count:
        raise CheckpointFormatError(
            f"record {rec.name} payload does not match shape {rec.shape}")
    return arr.reshape(rec.shape).copy()


def _meta_records(meta: dict) -> list:
    return [_scalar_record(f"meta.{k}", int(meta[k]), TAG_I64) for k in _META_FIELDS]


def _read_meta(records: dict) -> dict:
    meta = {}
    for key in _META_FIELDS:
        rec = records.get(f"meta.{key}")
        if rec is None:
            raise CheckpointFormatError(f"checkpoint lacks meta.{key}")
        meta[key] = int(_decode_array(rec))
    meta["tied"] = bool(meta["tied"])
    return meta


def save_model(path, model: TransformerLM) -> None:
    records = [_bytes_record("meta.kind", b"model")]
    records.extend(_meta_records(model.meta()))
    for name, tensor in model.params().items():
        records.append(_tensor_record(name, tensor.data, TAG_F32))
    write_records(path, records)


def _checkpoint_kind(records: dict) -> str:
    rec = records.get("meta.kind")
    if rec is None:
        raise CheckpointFormatError("checkpoint lacks a kind marker")
    return rec.payload.decode("utf-8")


def load_model(path) -> TransformerLM:
    records = read_records(path)
    if _checkpoint_kind(records) != "model":
        raise CheckpointFormatError("not a full-precision model checkpoint")
    meta = _read_meta(records)
    arrays = {name: _decode_array(rec) for name, rec in records.items()
              if not name.startswith("meta.")}
    try:
        return from_param_arrays(meta, arrays)
    except (KeyError, ShapeError) as e:
        raise CheckpointFormatError(f"invalid model records: {e}") from e


def save_quantized(path, qm: QuantizedModel) -> None:
    records = [_bytes_record("meta.kind", b"quantized")]
    records.extend(_meta_records(qm.meta))
    for cluster in qm.clusters:
        cid = cluster.id
        bits = qm.assignment[cid]
        records.append(_scalar_record(f"cluster.{cid}.bits", bits, TAG_I64))
        records.append(_bytes_record(
            f"cluster.{cid}.refs", "\n".join(cluster.param_refs).encode("utf-8")))
        if cid in qm.tables:
            table = qm.tables[cid]
            records.append(_scalar_record(f"cluster.{cid}.alpha", table.alpha, TAG_F64))
            for ref in cluster.param_refs:
                levels = qm.levels[ref]
                records.append(_bytes_record(
                    f"levels.{ref}", pack_levels(levels, table.n_bits), levels.shape))
    for name in qm.residue:
        records.append(_tensor_record(name, qm.residue[name], TAG_F32))
    write_records(path, records)


def load_quantized(path) -> QuantizedModel:
    records = read_records(path)
    if _checkpoint_kind(records) != "quantized":
        raise CheckpointFormatError("not a quantized checkpoint")
    meta = _read_meta(records)

    clusters = []
    assignment = {}
    tables = {}
    for name, rec in records.items():
        if not (name.startswith("cluster.") and name.endswith(".bits")):
            continue
        cid = name[len("cluster."):-len(".bits")]
        bits = int(_decode_array(rec))
        refs_rec = records.get(f"cluster.{cid}.refs")
        if refs_rec is None:
            raise CheckpointFormatError(f"cluster {cid} lacks its member list")
        refs = refs_rec.payload.decode("utf-8").split("\n")
        clusters.append(LayerCluster(cid, tuple(refs)))
        assignment[cid] = bits
        if bits != FULL_PRECISION_BITS:
            alpha_rec = records.get(f"cluster.{cid}.alpha")
            if alpha_rec is None:
                raise CheckpointFormatError(f"cluster {cid} lacks a scale record")
            tables[cid] = QuantTable(bits, float(_decode_array(alpha_rec)))

    levels = {}
    for cluster in clusters:
        if cluster.id not in tables:
            continue
        bits = tables[cluster.id].n_bits
        for ref in cluster.param_refs:
            rec = records.get(f"levels.{ref}")
            if rec is None:
                raise CheckpointFormatError(f"missing level record for {ref}")
            count = int(np.prod(rec.shape))
            levels[ref] = unpack_levels(rec.payload, bits, count).reshape(rec.shape)

    residue = {
        name: _decode_array(rec)
        for name, rec in records.items()
        if not name.startswith(("meta.", "cluster.", "levels."))
    }
    return QuantizedModel(meta, clusters, assignment, tables, levels, residue)


def checkpoint_kind(path) -> str:
    """'model' or 'quantized', without loading the payloads."""
    return _checkpoint_kind(read_records(path))

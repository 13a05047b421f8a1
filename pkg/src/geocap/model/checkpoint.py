"""Versioned binary checkpoint container.

Layout: magic ``GKCP``, u32 format version, u64 header length, a UTF-8
JSON header (config echo, seed, vocabulary, predicate vocabulary, type
tags, parameter manifest, arbitrary metadata), then the raw little-endian
parameter bytes in manifest order. Serialization is fully deterministic so
identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..corpus import Vocabulary
from ..errors import ConfigError, DataFormatError
from ..knowledge import PredicateVocabulary
from .captioner import CaptionModel
from .config import ModelConfig

MAGIC = b"GKCP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    seed: int
    vocab: Vocabulary
    predicate_vocab: PredicateVocabulary
    type_tags: tuple[str, ...]
    params: dict[str, np.ndarray]
    meta: dict


def _dtype_tag(dtype: np.dtype) -> str:
    return np.dtype(dtype).str.lstrip("<>|=")


def save_checkpoint(path, model: CaptionModel, vocab: Vocabulary,
                    predicate_vocab: PredicateVocabulary, type_tags, meta=None) -> None:
    params = model.parameters()
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in params:
        arr = np.ascontiguousarray(tensor.data)
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": _dtype_tag(arr.dtype),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "vocab_tokens": list(vocab.tokens),
        "predicates": list(predicate_vocab.predicates),
        "synonym_map": dict(sorted(predicate_vocab.synonym_map.items())),
        "type_tags": list(type_tags),
        "params": manifest,
        "meta": dict(meta or {}),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; refuses version or configuration mismatches."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (magic {blob[:4]!r})")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None:
        want = expected_config.to_dict()
        got = config.to_dict()
        diffs = {k: (got[k], want[k]) for k in want if got[k] != want[k]}
        if diffs:
            raise ConfigError(f"{path}: checkpoint config mismatch: {diffs}")
    base = 16 + header_len
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise DataFormatError(f"{path}: truncated parameter {entry['name']}")
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    vocab_tokens = header["vocab_tokens"]
    vocab_vectors = params.get("vocab_table")
    if vocab_vectors is None or vocab_vectors.shape[0] != len(vocab_tokens):
        raise DataFormatError(f"{path}: vocabulary table missing or inconsistent")
    vocab = Vocabulary(vocab_tokens, vocab_vectors.astype(np.float32))
    predicate_vocab = PredicateVocabulary(header["predicates"], header.get("synonym_map"))
    if "pred_table" in params:
        predicate_vocab.vectors = params["pred_table"]
    return Checkpoint(
        config=config,
        seed=int(header["seed"]),
        vocab=vocab,
        predicate_vocab=predicate_vocab,
        type_tags=tuple(header["type_tags"]),
        params=params,
        meta=header.get("meta", {}),
    )


def restore_model(ckpt: Checkpoint, dtype=np.float32) -> CaptionModel:
    """Rebuild a model and load every parameter tensor from the checkpoint."""
    type_table = ckpt.params["type_table"].astype(dtype)
    model = CaptionModel(
        ckpt.config,
        ckpt.vocab,
        type_table,
        n_predicates=len(ckpt.predicate_vocab),
        dtype=dtype,
    )
    names = {name for name, _ in model.parameters()}
    missing = names - set(ckpt.params)
    extra = set(ckpt.params) - names
    if missing or extra:
        raise ConfigError(
            f"checkpoint parameters do not match the model: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    for name, tensor in model.parameters():
        stored = ckpt.params[name]
        if tuple(stored.shape) != tensor.data.shape:
            raise ConfigError(
                f"parameter {name} has shape {stored.shape}, expected {tensor.data.shape}"
            )
        tensor.data[...] = stored.astype(tensor.data.dtype)
    ckpt.predicate_vocab.vectors = (
        model.pred_table.data if model.pred_table is not None else None
    )
    return model

"""Byte-stream front end: token codec, one-hot embedding, and corpus packing.

Every input is a raw byte sequence; token ids 0..255 are the byte values and
three specials complete the 259-symbol vocabulary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import OutOfRange, Tensor, index_select

VOCAB = 259
BOS = 256
EOS = 257
PAD = 258


def encode(data: bytes, add_bos: bool = False, add_eos: bool = False) -> np.ndarray:
    """Map bytes to token ids, optionally wrapped in BOS/EOS."""
    toks = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)
    parts = []
    if add_bos:
        parts.append([BOS])
    parts.append(toks)
    if add_eos:
        parts.append([EOS])
    return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts]) if len(parts) > 1 else toks


def decode(tokens) -> bytes:
    """Inverse of encode: byte tokens pass through, specials are dropped."""
    toks = np.asarray(tokens, dtype=np.int64)
    return bytes(toks[toks < 256].astype(np.uint8).tobytes())


def one_hot(t: int) -> np.ndarray:
    if not 0 <= t < VOCAB:
        raise OutOfRange(f"token {t} outside [0, {VOCAB - 1}]")
    v = np.zeros(VOCAB)
    v[t] = 1.0
    return v


def embed(tokens, weights: Tensor) -> Tensor:
    """Column lookup into weights[D, 259]; equals weights @ one_hot per token."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= VOCAB):
        raise OutOfRange("token id outside the vocabulary")
    return index_select(weights, 1, toks)


@dataclass
class PackedStream:
    tokens: np.ndarray
    boundaries: list[int] = field(default_factory=list)
    separator: bytes = b""


def pack_corpus(docs, separator: bytes, add_bos: bool = False, add_eos: bool = False) -> PackedStream:
    """Concatenate documents with a literal byte-string separator after each.

    A boundary offset is recorded immediately after every separator.
    """
    if not separator:
        raise ValueError("separator must be non-empty")
    parts = []
    boundaries = []
    pos = 0
    for doc in docs:
        toks = encode(doc, add_bos=add_bos, add_eos=add_eos)
        sep = encode(separator)
        parts.extend([toks, sep])
        pos += len(toks) + len(sep)
        boundaries.append(pos)
    tokens = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return PackedStream(tokens=tokens, boundaries=boundaries, separator=bytes(separator))


# ---------------------------------------------------------------------------
# on-disk corpus: raw byte file + manifest (offset, length, tag per line)
# ---------------------------------------------------------------------------


def corpus_paths(base: str) -> tuple[str, str]:
    return base + ".bin", base + ".manifest"


def write_corpus(base: str, docs, tags=None) -> None:
    docs = list(docs)
    tags = list(tags) if tags is not None else ["-"] * len(docs)
    if len(tags) != len(docs):
        raise ValueError("one tag per document required")
    bin_path, man_path = corpus_paths(base)
    offset = 0
    lines = []
    with open(bin_path, "wb") as fh:
        for doc, tag in zip(docs, tags):
            fh.write(doc)
            lines.append(f"{offset} {len(doc)} {tag}\n")
            offset += len(doc)
    with open(man_path, "w") as fh:
        fh.writelines(lines)


def read_corpus(base: str) -> tuple[list[bytes], list[str]]:
    bin_path, man_path = corpus_paths(base)
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    docs, tags = [], []
    with open(man_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            off_s, len_s, tag = line.split(maxsplit=2)
            off, length = int(off_s), int(len_s)
            if off + length > len(blob):
                raise ValueError(f"manifest entry past end of {bin_path}")
            docs.append(blob[off : off + length])
            tags.append(tag.rstrip("\n"))
    return docs, tags


def load_documents(path: str) -> list[bytes]:
    """Read training documents from a manifest-backed corpus or a line file."""
    if os.path.exists(path + ".manifest"):
        return read_corpus(path)[0]
    if path.endswith(".bin") and os.path.exists(path[: -len(".bin")] + ".manifest"):
        return read_corpus(path[: -len(".bin")])[0]
    with open(path, "rb") as fh:
        return [line for line in fh.read().split(b"\n") if line]

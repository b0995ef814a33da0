"""Binary codes, bit packing, Hamming ranking, and database encoding.

Codes live in two synchronized forms: an int8 sign matrix (r x n, entries
+/-1) and a packed uint64 matrix (n rows, ceil(r/64) words per instance,
little-endian within and across words). Bit=1 encodes sign=+1; bits past r
in the last word stay zero. sgn(0) maps to +1 everywhere.

The on-disk code file is a 12-byte header (u32 code length, u32 instance
count, u32 format version, little-endian) followed by the packed words,
column-major by instance (instance 0's words first).
"""

import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, LoadError
from .mlp import MlpEncoder, forward

CODE_FILE_VERSION = 1

# the packed format is little-endian; the uint8<->uint64 views below assume
# the host matches
assert sys.byteorder == "little"


def pack_signs(signs: np.ndarray) -> np.ndarray:
    """Pack an (r, n) +/-1 sign matrix into (n, ceil(r/64)) uint64 words."""
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise ContractError(f"sign matrix must be 2-D, got ndim={signs.ndim}")
    if not np.isin(signs, (-1, 1)).all():
        raise ContractError("sign matrix entries must be +/-1")
    r, n = signs.shape
    words = (r + 63) // 64
    bits = (signs.T > 0).astype(np.uint8)
    pad = words * 64 - r
    if pad:
        bits = np.pad(bits, ((0, 0), (0, pad)))
    packed_bytes = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed_bytes).view(np.uint64)


def unpack_codes(packed: np.ndarray, r: int) -> np.ndarray:
    """Inverse of pack_signs: (n, words) uint64 back to (r, n) int8 signs."""
    packed = np.ascontiguousarray(np.asarray(packed, dtype=np.uint64))
    if packed.ndim != 2:
        raise ContractError(f"packed matrix must be 2-D, got ndim={packed.ndim}")
    if packed.shape[1] != (r + 63) // 64:
        raise ContractError(
            f"packed width {packed.shape[1]} does not match r={r}"
        )
    bits = np.unpackbits(packed.view(np.uint8), axis=1, bitorder="little")[:, :r]
    return (bits.T.astype(np.int8) * 2 - 1)


@dataclass(frozen=True)
class CodeMatrix:
    """Sign and packed views of one code block, kept consistent."""

    signs: np.ndarray   # (r, n) int8 +/-1
    packed: np.ndarray  # (n, ceil(r/64)) uint64

    @property
    def r(self) -> int:
        return self.signs.shape[0]

    @property
    def n(self) -> int:
        return self.signs.shape[1]

    @classmethod
    def from_signs(cls, signs) -> "CodeMatrix":
        signs = np.asarray(signs, dtype=np.int8)
        return cls(signs, pack_signs(signs))

    @classmethod
    def from_real(cls, values: np.ndarray) -> "CodeMatrix":
        """Binarize real values; zero maps to +1."""
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ContractError("cannot binarize non-finite values")
        return cls.from_signs(np.where(values >= 0, 1, -1).astype(np.int8))

    def validate(self) -> None:
        if not np.isin(self.signs, (-1, 1)).all():
            raise ContractError("sign matrix entries must be +/-1")
        if self.packed.shape != (self.n, (self.r + 63) // 64):
            raise ContractError("packed shape inconsistent with sign shape")
        if not np.array_equal(self.packed, pack_signs(self.signs)):
            raise ContractError("packed words out of sync with signs")


def hamming_distance(a: np.ndarray, b: np.ndarray, r: int) -> int:
    """Hamming distance between two packed codes of the same length r."""
    a = np.asarray(a, dtype=np.uint64).ravel()
    b = np.asarray(b, dtype=np.uint64).ravel()
    words = (r + 63) // 64
    if a.size != words or b.size != words:
        raise ContractError(
            f"packed codes must have {words} words for r={r}, got {a.size} and {b.size}"
        )
    return int(np.bitwise_count(a ^ b).sum())


def distances_to_all(packed_db: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Hamming distance from one packed query to every database row."""
    packed_db = np.asarray(packed_db, dtype=np.uint64)
    query = np.asarray(query, dtype=np.uint64).ravel()
    if packed_db.ndim != 2 or packed_db.shape[1] != query.size:
        raise ContractError(
            f"database words {packed_db.shape} do not match query words {query.size}"
        )
    return np.bitwise_count(packed_db ^ query[None, :]).sum(axis=1).astype(np.int64)


def rank_all(packed_db: np.ndarray, query: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Positions of every database row sorted by (distance, id) ascending."""
    dists = distances_to_all(packed_db, query)
    return np.lexsort((ids, dists))


def topk(db: "RetrievalIndex", query_packed: np.ndarray, k: int) -> np.ndarray:
    """Ids of the k nearest database items; ties broken by ascending id."""
    if not (1 <= k <= db.codes.n):
        raise ContractError(f"k must be in [1, {db.codes.n}], got {k}")
    order = rank_all(db.codes.packed, query_packed, db.ids)
    return db.ids[order[:k]]


@dataclass(frozen=True)
class RetrievalIndex:
    """Database codes plus the labels and dataset ids behind each column."""

    codes: CodeMatrix
    labels: np.ndarray  # (c, n_db) uint8
    ids: np.ndarray     # (n_db,) dataset instance ids

    def validate(self) -> None:
        self.codes.validate()
        if self.labels.shape[1] != self.codes.n or self.ids.shape != (self.codes.n,):
            raise ContractError("index labels/ids misaligned with codes")


def encode_with(enc: MlpEncoder, feats: np.ndarray, what: str = "features") -> CodeMatrix:
    """Forward features through an encoder and binarize the outputs."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ContractError(f"{what} must be 2-D (rows are instances)")
    if feats.shape[1] != enc.input_dim:
        raise ContractError(
            f"{what} have {feats.shape[1]} dims but the encoder expects {enc.input_dim}"
        )
    out, _ = forward(enc, feats)
    return CodeMatrix.from_real(out)


def encode_queries(model, ds, split) -> CodeMatrix:
    """Hash the query set with the query-side encoder of the model's task."""
    if model.task == "i2t":
        return encode_with(model.image_encoder, ds.image_features[split.query_ids],
                           "query image features")
    return encode_with(model.text_encoder, ds.text_features[split.query_ids],
                       "query text features")


def encode_database(model, ds, split, reencode_train: bool = False) -> RetrievalIndex:
    """Build the database index for the model's task.

    Retrieval items that were in the training set reuse their learned code
    columns (the codes the objective optimized); out-of-sample items are
    hashed with the database-side encoder (text for i2t, image for t2i).
    reencode_train=True hashes every item fresh instead.
    """
    db_ids = np.asarray(split.retrieval_ids, dtype=np.int64)
    if model.task == "i2t":
        enc, feats = model.text_encoder, ds.text_features
    else:
        enc, feats = model.image_encoder, ds.image_features
    signs = np.empty((model.r, db_ids.size), dtype=np.int8)
    train_pos = {int(t): p for p, t in enumerate(split.train_ids)}
    if reencode_train:
        fresh = np.arange(db_ids.size)
    else:
        fresh = np.array(
            [p for p, i in enumerate(db_ids) if int(i) not in train_pos], dtype=np.intp
        )
        learned = np.array(
            [p for p, i in enumerate(db_ids) if int(i) in train_pos], dtype=np.intp
        )
        if learned.size:
            cols = np.array([train_pos[int(db_ids[p])] for p in learned], dtype=np.intp)
            signs[:, learned] = model.codes.signs[:, cols]
    if fresh.size:
        signs[:, fresh] = encode_with(enc, feats[db_ids[fresh]], "database features").signs
    index = RetrievalIndex(CodeMatrix.from_signs(signs), ds.labels[:, db_ids], db_ids)
    index.validate()
    return index


def write_codes(cm: CodeMatrix, path) -> Path:
    """Write header (r, n, version) plus packed words, instance-major."""
    cm.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack("<III", cm.r, cm.n, CODE_FILE_VERSION)
    path.write_bytes(header + np.ascontiguousarray(cm.packed).tobytes())
    return path


def read_codes(path) -> CodeMatrix:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"code file not found: {path}")
    payload = path.read_bytes()
    if len(payload) < 12:
        raise LoadError(f"code file too short for its header: {path}")
    r, n, version = struct.unpack("<III", payload[:12])
    if version != CODE_FILE_VERSION:
        raise LoadError(f"unsupported code file version {version}")
    if r < 1 or n < 1:
        raise LoadError(f"code file header has bad dims r={r} n={n}")
    words = (r + 63) // 64
    expected = 12 + n * words * 8
    if len(payload) != expected:
        raise LoadError(
            f"code file has wrong size: expected {expected} bytes, found {len(payload)}"
        )
    packed = np.frombuffer(payload[12:], dtype="<u8").reshape(n, words).copy()
    tail_bits = r % 64
    if tail_bits and np.any(packed[:, -1] >> np.uint64(tail_bits)):
        raise LoadError("code file has nonzero padding bits past the code length")
    return CodeMatrix(unpack_codes(packed, r), packed)

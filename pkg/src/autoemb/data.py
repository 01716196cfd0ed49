"""Rating streams: MovieLens-style CSV ingestion, id densification, synthetic streams."""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

logger = logging.getLogger(__name__)

HEADER = ("userId", "movieId", "rating", "timestamp")
RATING_MIN, RATING_MAX = 0.5, 5.0
CACHE_MAGIC = b"AEMBSTRM"
CACHE_VERSION = 1


def binary_label(rating):
    """1 iff rating > 3."""
    return (np.asarray(rating) > 3.0).astype(np.int64)


def class_label(rating):
    """Round half up, clamp to 1..5, shift to 0..4."""
    r = np.floor(np.asarray(rating, dtype=np.float64) + 0.5)
    return (np.clip(r, 1, 5) - 1).astype(np.int64)


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    rating: float
    timestamp: int

    @property
    def binary_label(self) -> int:
        return int(binary_label(self.rating))

    @property
    def class_label(self) -> int:
        return int(class_label(self.rating))


class IdMap:
    """Raw id <-> dense index, dense indices contiguous from 0 in insertion order."""

    def __init__(self, raw_ids=()):
        self._to_dense: dict = {}
        self._to_raw: list = []
        for r in raw_ids:
            self.add(r)

    def add(self, raw) -> int:
        idx = self._to_dense.get(raw)
        if idx is None:
            idx = len(self._to_raw)
            self._to_dense[raw] = idx
            self._to_raw.append(raw)
        return idx

    def dense(self, raw) -> int:
        return self._to_dense[raw]

    def raw(self, idx: int):
        return self._to_raw[idx]

    @property
    def raw_ids(self) -> list:
        return list(self._to_raw)

    def __len__(self) -> int:
        return len(self._to_raw)


@dataclass
class Stream:
    """Columnar interaction stream, ordered by timestamp."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    user_map: IdMap | None = field(default=None, repr=False)
    item_map: IdMap | None = field(default=None, repr=False)
    rejected: int = 0

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return Interaction(int(self.users[key]), int(self.items[key]), float(self.ratings[key]),
                               int(self.timestamps[key]))
        return Stream(self.users[key], self.items[key], self.ratings[key], self.timestamps[key],
                      self.n_users, self.n_items, self.user_map, self.item_map)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @property
    def binary_labels(self) -> np.ndarray:
        return binary_label(self.ratings)

    @property
    def class_labels(self) -> np.ndarray:
        return class_label(self.ratings)

    def labels(self, task: str) -> np.ndarray:
        return self.binary_labels if task == "regression" else self.class_labels

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamps) >= 0))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.users, self.items, self.ratings, self.timestamps):
            h.update(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()


def _open_text(path, mode="r"):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def parse_csv(path, header: bool | None = None) -> Stream:
    """Parse ``userId,movieId,rating,timestamp`` rows into a time-ordered stream.

    ``header=None`` auto-detects a header line.  A malformed row raises
    :class:`IngestionError` with its line number; a rating outside
    [0.5, 5] rejects the row and is counted in ``Stream.rejected``.
    """
    rows = []
    rejected = 0
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                looks_like_header = bool(row) and not _is_number(row[-1])
                if header or (header is None and looks_like_header):
                    if tuple(c.strip() for c in row) != HEADER:
                        raise IngestionError(f"line 1: unexpected header {row!r}, expected {','.join(HEADER)}")
                    continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise IngestionError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                rating = float(row[2])
                ts = int(row[3])
            except ValueError as exc:
                raise IngestionError(f"line {lineno}: {exc}") from None
            user, item = row[0].strip(), row[1].strip()
            if not user or not item:
                raise IngestionError(f"line {lineno}: empty id field")
            if not (RATING_MIN <= rating <= RATING_MAX):
                rejected += 1
                logger.warning("line %d: rating %s outside [%.1f, %.1f], row rejected", lineno, row[2],
                               RATING_MIN, RATING_MAX)
                continue
            rows.append((user, item, rating, ts))
    # stable sort keeps file order on equal timestamps
    rows.sort(key=lambda r: r[3])
    umap, imap = IdMap(), IdMap()
    users = np.fromiter((umap.add(r[0]) for r in rows), dtype=np.int64, count=len(rows))
    items = np.fromiter((imap.add(r[1]) for r in rows), dtype=np.int64, count=len(rows))
    stream = Stream(users, items, [r[2] for r in rows], [r[3] for r in rows],
                    len(umap), len(imap), umap, imap, rejected)
    if rejected:
        logger.info("parse_csv: %d rows rejected", rejected)
    return stream


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_csv(stream: Stream, path) -> None:
    """Inverse of :func:`parse_csv` (raw ids restored when id maps are present)."""
    with _open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for u, i, r, t in zip(stream.users, stream.items, stream.ratings, stream.timestamps):
            ru = stream.user_map.raw(int(u)) if stream.user_map else int(u)
            ri = stream.item_map.raw(int(i)) if stream.item_map else int(i)
            w.writerow((ru, ri, repr(float(r)), int(t)))


def save_cache(stream: Stream, path) -> None:
    """Little-endian binary cache: magic, version, sizes, columns, raw id tables."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQQQ", CACHE_VERSION, len(stream), stream.n_users, stream.n_items))
        fh.write(stream.users.astype("<i8").tobytes())
        fh.write(stream.items.astype("<i8").tobytes())
        fh.write(stream.ratings.astype("<f8").tobytes())
        fh.write(stream.timestamps.astype("<i8").tobytes())
        for m in (stream.user_map, stream.item_map):
            raws = m.raw_ids if m is not None else []
            fh.write(struct.pack("<Q", len(raws)))
            for r in raws:
                b = str(r).encode("utf-8")
                fh.write(struct.pack("<I", len(b)) + b)


def load_cache(path) -> Stream:
    blob = Path(path).read_bytes()
    if blob[:8] != CACHE_MAGIC:
        raise IngestionError(f"{path}: not an interaction cache")
    version, n, n_users, n_items = struct.unpack_from("<IQQQ", blob, 8)
    if version != CACHE_VERSION:
        raise IngestionError(f"{path}: unsupported cache version {version}")
    pos = 8 + struct.calcsize("<IQQQ")
    cols = []
    for dt in ("<i8", "<i8", "<f8", "<i8"):
        cols.append(np.frombuffer(blob, dtype=dt, count=n, offset=pos).copy())
        pos += 8 * n
    maps = []
    for _ in range(2):
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        raws = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", blob, pos)
            raws.append(blob[pos + 4:pos + 4 + ln].decode("utf-8"))
            pos += 4 + ln
        maps.append(IdMap(raws) if count else None)
    return Stream(*cols, int(n_users), int(n_items), maps[0], maps[1])


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-float(exponent))
    return w / w.sum()


def synth_stream(
    users: int,
    items: int,
    interactions: int,
    popularity_exponent: float,
    seed: int = 0,
    latent_dim: int = 8,
    bias_scale: float = 0.8,
    factor_scale: float = 1.0,
    noise: float = 0.5,
) -> Stream:
    """Synthetic popularity-skewed stream with learnable ratings.

    Users and items are drawn from Zipf laws with the given exponent (rank
    order shuffled over ids).  A rating is ``3.5 + b_u + b_i + <p_u, q_i> +
    noise`` rounded and clamped to 1..5, so roughly half the labels are
    positive.  Timestamps are the stream positions.
    """
    if min(users, items, interactions) < 1:
        raise ConfigError("synth_stream: users, items and interactions must be >= 1")
    rng = np.random.default_rng(seed)
    user_rank = rng.permutation(users)
    item_rank = rng.permutation(items)
    u = user_rank[rng.choice(users, size=interactions, p=zipf_probabilities(users, popularity_exponent))]
    i = item_rank[rng.choice(items, size=interactions, p=zipf_probabilities(items, popularity_exponent))]
    bu = rng.normal(0, bias_scale, users)
    bi = rng.normal(0, bias_scale, items)
    p = rng.normal(0, factor_scale, (users, latent_dim))
    q = rng.normal(0, factor_scale, (items, latent_dim))
    score = bu[u] + bi[i] + np.einsum("ij,ij->i", p[u], q[i]) / math.sqrt(latent_dim)
    score += rng.normal(0, noise, interactions)
    ratings = np.clip(np.floor(3.5 + score + 0.5), 1, 5)
    return Stream(u, i, ratings, np.arange(interactions), users, items)


def split_stream(stream: Stream, offline_fraction: float = 0.7) -> tuple:
    """Temporal prefix/suffix split at ``floor(fraction * len)``."""
    if not 0 < offline_fraction < 1:
        raise ConfigError(f"offline_fraction must be in (0, 1), got {offline_fraction}")
    k = int(math.floor(offline_fraction * len(stream)))
    return stream[:k], stream[k:]

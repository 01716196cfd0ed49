"""Multi-space embedding tables with linear unification and BatchNorm+tanh."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, EmbeddingLookupError, SnapshotError

logger = logging.getLogger(__name__)

BANK_MAGIC = b"AEBANK\x00\x01"
BANK_VERSION = 1


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class TransformedBatch:
    """N magnitude-comparable candidates, each ``B x d_N``."""

    candidates: list

    @property
    def n_spaces(self) -> int:
        return len(self.candidates)


class EmbeddingBank:
    """Per-entity embeddings in N spaces of increasing width.

    All spaces of one entity live in a single row of ``table`` (width
    ``sum(dims)``), so a lookup is one gather followed by column slices.
    ``transforms[n] = (W_n, b_n)`` with ``W_n`` of shape ``d_n x d_N``.
    """

    def __init__(
        self,
        entity_count: int,
        dims,
        rng: np.random.Generator | None = None,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.1,
        init_scale: float = 0.01,
    ):
        dims = [int(d) for d in dims]
        if not dims or any(d < 1 for d in dims):
            raise ContractError(f"dims must be positive, got {dims}")
        if any(b <= a for a, b in zip(dims, dims[1:])):
            raise ContractError(f"dims must be strictly increasing, got {dims}")
        if entity_count < 1:
            raise ContractError("entity_count must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.entity_count = int(entity_count)
        self.dims = dims
        self.bn_eps = float(bn_eps)
        self.bn_momentum = float(bn_momentum)
        self.offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        d_out = dims[-1]
        self.table = ad.parameter(rng.uniform(-init_scale, init_scale, size=(entity_count, sum(dims))))
        self.transforms = [
            (ad.parameter(xavier_uniform(rng, d, d_out)), ad.parameter(np.zeros(d_out))) for d in dims
        ]
        self.running_mean = [np.zeros(d_out) for _ in dims]
        self.running_var = [np.ones(d_out) for _ in dims]

    @property
    def n_spaces(self) -> int:
        return len(self.dims)

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def space_view(self, n: int) -> np.ndarray:
        """Read-only view of space ``n`` (0-based) as an ``entity_count x d_n`` matrix."""
        return self.table.data[:, self.offsets[n]:self.offsets[n + 1]]

    def parameters(self) -> list:
        out = [self.table]
        for w, b in self.transforms:
            out += [w, b]
        return out

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        bad = ids[(ids < 0) | (ids >= self.entity_count)]
        if bad.size:
            raise EmbeddingLookupError(f"entity id {int(bad[0])} out of range [0, {self.entity_count})")
        return ids

    def lookup(self, ids, space: int) -> Tensor:
        """Raw ``B x d_n`` embeddings of space ``space`` (1-based, as in d_1..d_N)."""
        if not 1 <= space <= self.n_spaces:
            raise ContractError(f"space must be in [1, {self.n_spaces}], got {space}")
        rows = ad.gather_rows(self.table, self._check_ids(ids))
        return ad.slice_cols(rows, self.offsets[space - 1], self.offsets[space])

    def lookup_all(self, ids) -> list:
        rows = ad.gather_rows(self.table, self._check_ids(ids))
        return [ad.slice_cols(rows, self.offsets[n], self.offsets[n + 1]) for n in range(self.n_spaces)]

    def unify(self, raw: list, mode: str = "train", update_stats: bool = True) -> TransformedBatch:
        """Map raw per-space embeddings to tanh(BN(W_n^T e + b_n)).

        ``mode="train"`` normalises with mini-batch statistics (and folds them
        into the running averages when ``update_stats``); ``mode="infer"``
        uses the running statistics.
        """
        if mode not in ("train", "infer"):
            raise ContractError(f"unknown unify mode {mode!r}")
        if len(raw) != self.n_spaces:
            raise ContractError(f"expected {self.n_spaces} raw embeddings, got {len(raw)}")
        out = []
        for n, (e, (w, b)) in enumerate(zip(raw, self.transforms)):
            z = ad.linear(e, w, b)
            if mode == "train":
                if z.shape[0] == 1:
                    logger.debug("unify: batch of one in train mode, normalised output is 0")
                if update_stats:
                    m = self.bn_momentum
                    self.running_mean[n] = (1 - m) * self.running_mean[n] + m * z.data.mean(axis=0)
                    self.running_var[n] = (1 - m) * self.running_var[n] + m * z.data.var(axis=0)
                zn = ad.batchnorm(z, self.bn_eps)
            else:
                zn = ad.batchnorm(z, self.bn_eps, self.running_mean[n], self.running_var[n])
            out.append(ad.tanh(zn))
        return TransformedBatch(out)

    def forward(self, ids, mode: str = "train", update_stats: bool = True) -> TransformedBatch:
        return self.unify(self.lookup_all(ids), mode=mode, update_stats=update_stats)

    # binary snapshot: magic, u32 version, u64 entity_count, u64 N, u64 dims[N],
    # then table, W_n, b_n, running mean/var as little-endian float64
    def to_bytes(self) -> bytes:
        parts = [BANK_MAGIC, struct.pack("<I", BANK_VERSION)]
        parts.append(struct.pack("<QQ", self.entity_count, self.n_spaces))
        parts.append(struct.pack(f"<{self.n_spaces}Q", *self.dims))
        parts.append(struct.pack("<dd", self.bn_eps, self.bn_momentum))
        arrays = [self.table.data]
        arrays += [a.data for wb in self.transforms for a in wb]
        arrays += self.running_mean + self.running_var
        parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingBank":
        if blob[:8] != BANK_MAGIC:
            raise SnapshotError("not an embedding-bank snapshot (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 8)
        if version != BANK_VERSION:
            raise SnapshotError(f"unsupported embedding-bank snapshot version {version}")
        pos = 12
        count, n = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        dims = list(struct.unpack_from(f"<{n}Q", blob, pos))
        pos += 8 * n
        eps, momentum = struct.unpack_from("<dd", blob, pos)
        pos += 16
        bank = cls.__new__(cls)
        bank.entity_count, bank.dims = int(count), [int(d) for d in dims]
        bank.bn_eps, bank.bn_momentum = eps, momentum
        bank.offsets = np.concatenate([[0], np.cumsum(bank.dims)]).astype(int)

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            return arr

        d_out = bank.dims[-1]
        bank.table = ad.parameter(take((bank.entity_count, sum(bank.dims))))
        bank.transforms = [(ad.parameter(take((d, d_out))), ad.parameter(take((d_out,)))) for d in bank.dims]
        bank.running_mean = [take((d_out,)) for _ in bank.dims]
        bank.running_var = [take((d_out,)) for _ in bank.dims]
        if pos != len(blob):
            raise SnapshotError("trailing bytes in embedding-bank snapshot")
        return bank

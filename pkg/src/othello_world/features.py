"""Per-step hidden representations and their binary file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .engine import Dataset
from .model import LayerError, ModelCheckpoint, all_position_logits

FEATURE_MAGIC = b"OWFEAT\x00\x01"


@dataclass
class FeatureMatrix:
    """``n`` step vectors of width ``h`` with (game, step) provenance per row.

    ``steps`` are 1-based: row with step ``i`` is the representation of the
    prefix holding the game's first ``i - 1`` moves.
    """

    rows: np.ndarray
    games: np.ndarray
    steps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        self.games = np.asarray(self.games, dtype=np.int64)
        self.steps = np.asarray(self.steps, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ValueError("feature rows must be a 2-D array")
        if not len(self.games) == len(self.steps) == len(self.rows):
            raise ValueError("provenance arrays must have one entry per row")

    @classmethod
    def from_array(cls, rows, meta: Optional[dict] = None) -> "FeatureMatrix":
        """Wrap a bare matrix; every row becomes its own game with step 1."""
        rows = np.asarray(rows)
        n = len(rows)
        return cls(rows, np.arange(n), np.ones(n, dtype=np.int64), dict(meta or {}))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def h(self) -> int:
        return self.rows.shape[1]

    def select(self, mask_or_index) -> "FeatureMatrix":
        return FeatureMatrix(
            self.rows[mask_or_index], self.games[mask_or_index], self.steps[mask_or_index], dict(self.meta)
        )

    def with_rows(self, rows: np.ndarray, **meta) -> "FeatureMatrix":
        return FeatureMatrix(rows, self.games, self.steps, {**self.meta, **meta})

    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.games.tolist(), self.steps.tolist()))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        prov = json.dumps(self.meta, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<QQ", self.n, self.h))
            fh.write(struct.pack("<I", len(prov)))
            fh.write(prov)
            fh.write(self.games.astype("<i8").tobytes())
            fh.write(self.steps.astype("<i8").tobytes())
            fh.write(np.ascontiguousarray(self.rows, dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        data = Path(path).read_bytes()
        if not data.startswith(FEATURE_MAGIC):
            raise ValueError("not a feature file (bad magic)")
        pos = len(FEATURE_MAGIC)
        n, h = struct.unpack_from("<QQ", data, pos)
        pos += 16
        (plen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos : pos + plen])
        pos += plen
        games = np.frombuffer(data, "<i8", n, pos).copy()
        pos += 8 * n
        steps = np.frombuffer(data, "<i8", n, pos).copy()
        pos += 8 * n
        rows = np.frombuffer(data, "<f4", n * h, pos).reshape(n, h).copy()
        return cls(rows, games, steps, meta)


def pair_rows(a: FeatureMatrix, b: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of ``a`` and ``b`` that share a (game, step) key, in ``a`` order."""
    index = {k: i for i, k in enumerate(b.keys())}
    ia, ib = [], []
    for i, k in enumerate(a.keys()):
        j = index.get(k)
        if j is not None:
            ia.append(i)
            ib.append(j)
    return np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64)


@torch.no_grad()
def extract_features(
    ckpt: ModelCheckpoint,
    games: Dataset | Sequence[Sequence[int]],
    layer: int,
    batch: int = 256,
    game_ids: Optional[Sequence[int]] = None,
) -> FeatureMatrix:
    """Hidden state of decoder block ``layer`` at the last position of every true prefix.

    Rows are ordered by game, then step.  Because attention is causal, one
    teacher-forced pass per game yields exactly the per-prefix vectors.
    """
    n_layers = ckpt.config.layers
    if not 0 <= layer < n_layers:
        raise LayerError(f"layer {layer} outside [0, {n_layers})")
    model = ckpt.model()
    seqs = [g.moves for g in games] if isinstance(games, Dataset) else [tuple(g) for g in games]
    ids = list(range(len(seqs))) if game_ids is None else list(game_ids)
    chunks, gcol, scol = [], [], []
    for lo in range(0, len(seqs), batch):
        part = seqs[lo : lo + batch]
        _, hidden = all_position_logits(model, part, layer)
        hidden = hidden.numpy()
        for i, g in enumerate(part):
            chunks.append(hidden[i, : len(g)])
            gcol.extend([ids[lo + i]] * len(g))
            scol.extend(range(1, len(g) + 1))
    meta = {
        "model_id": ckpt.id,
        "layer": layer,
        "dataset_id": games.content_hash() if isinstance(games, Dataset) else "",
        "preprocessing": [],
    }
    rows = np.concatenate(chunks).astype(np.float32) if chunks else np.zeros((0, ckpt.config.hidden_dim), np.float32)
    return FeatureMatrix(rows, np.array(gcol), np.array(scol), meta)

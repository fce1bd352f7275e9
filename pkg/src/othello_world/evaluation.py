"""Top-1 legality error rates for one- and two-move generation.

Every prefix of every test game is scored, starting with the bare ``[BOS]``
prefix.  A prediction counts as an error when the generated tile is not a
legal placement on the board reached by the true prefix.  In the two-move
setting the second tile is checked on the board produced by the model's own
first tile, and a prefix is skipped when the true game has no move after it.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .engine import Board, Dataset, IllegalMove, apply_move, tile_to_square
from .model import ModelCheckpoint, ModelConfig, TrainConfig, all_position_logits, greedy_two_step, train

log = logging.getLogger(__name__)

Predictor = Callable[[tuple, int], Sequence[int]]
Scorable = Union[ModelCheckpoint, Predictor]


@dataclass
class ErrorReport:
    hop: int
    total_prefixes: int
    errors: int
    per_position_counts: list[tuple[int, int, int]] = field(default_factory=list)
    dataset_id: str = ""
    checkpoint_id: str = ""

    @property
    def error_rate(self) -> float:
        return self.errors / self.total_prefixes if self.total_prefixes else 0.0

    @property
    def per_position_breakdown(self) -> list[tuple[int, float]]:
        """(step, error rate) for every step that had at least one scored prefix."""
        return [(step, err / n) for step, n, err in self.per_position_counts if n]

    def to_record(self) -> dict:
        return {
            "hop": self.hop,
            "prefixes": self.total_prefixes,
            "errors": self.errors,
            "rate": self.error_rate,
            "dataset": self.dataset_id,
            "checkpoint": self.checkpoint_id,
        }

    def to_line(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.to_record().items())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["error_rate"] = self.error_rate
        return d


def _legal_square_masks(moves: Sequence[int]) -> tuple[list[Board], list[int]]:
    boards = [Board()]
    for t in moves:
        boards.append(apply_move(boards[-1], t))
    return boards, [b.legal_mask() for b in boards]


def _is_legal(mask: int, tile: int) -> bool:
    return 0 <= tile < 60 and bool((mask >> tile_to_square(tile)) & 1)


def _ckpt_first_moves(ckpt: ModelCheckpoint, games: Sequence[tuple], batch: int = 256):
    import torch

    model = ckpt.model()
    out = []
    with torch.no_grad():
        for lo in range(0, len(games), batch):
            chunk = games[lo : lo + batch]
            logits, _ = all_position_logits(model, chunk)
            best = logits.argmax(dim=-1).numpy()
            out.extend(best[i, : len(g)] for i, g in enumerate(chunk))
    return out


def _ckpt_two_moves(ckpt: ModelCheckpoint, games: Sequence[tuple], batch: int = 256):
    firsts, seconds = [], []
    for lo in range(0, len(games), batch):
        f, s = greedy_two_step(ckpt, games[lo : lo + batch])
        firsts.extend(f)
        seconds.extend(s)
    return firsts, seconds


def _predictor_moves(pred: Predictor, games: Sequence[tuple], k: int):
    firsts, seconds = [], []
    for g in games:
        f, s = [], []
        for j in range(len(g)):
            out = list(pred(tuple(g[:j]), k))
            f.append(out[0])
            s.append(out[1] if k == 2 else -1)
        firsts.append(np.array(f))
        seconds.append(np.array(s))
    return firsts, seconds


def _ids(model: Scorable, test: Dataset) -> tuple[str, str]:
    ck = model.id if isinstance(model, ModelCheckpoint) else getattr(model, "__name__", "predictor")
    return test.content_hash(), ck


def eval_1hop(model: Scorable, test: Dataset) -> ErrorReport:
    """Fraction of true prefixes whose greedy next move is illegal."""
    if len(test) == 0:
        raise ValueError("test dataset is empty")
    games = [g.moves for g in test]
    if isinstance(model, ModelCheckpoint):
        firsts = _ckpt_first_moves(model, games)
    else:
        firsts, _ = _predictor_moves(model, games, 1)
    width = max(len(g) for g in games)
    seen = np.zeros(width + 1, dtype=np.int64)
    bad = np.zeros(width + 1, dtype=np.int64)
    for g, pred in zip(games, firsts):
        _, masks = _legal_square_masks(g)
        for j in range(len(g)):
            step = j + 1
            seen[step] += 1
            if not _is_legal(masks[j], int(pred[j])):
                bad[step] += 1
    did, cid = _ids(model, test)
    per = [(s, int(seen[s]), int(bad[s])) for s in range(1, width + 1)]
    return ErrorReport(1, int(seen.sum()), int(bad.sum()), per, did, cid)


def eval_2hop(model: Scorable, test: Dataset) -> ErrorReport:
    """Fraction of prefixes where either of two consecutive greedy moves is illegal."""
    if len(test) == 0:
        raise ValueError("test dataset is empty")
    games = [g.moves for g in test]
    if isinstance(model, ModelCheckpoint):
        firsts, seconds = _ckpt_two_moves(model, games)
    else:
        firsts, seconds = _predictor_moves(model, games, 2)
    width = max(len(g) for g in games)
    seen = np.zeros(width + 1, dtype=np.int64)
    bad = np.zeros(width + 1, dtype=np.int64)
    for g, f, s in zip(games, firsts, seconds):
        boards, masks = _legal_square_masks(g)
        for j in range(len(g) - 1):
            step = j + 1
            seen[step] += 1
            first = int(f[j])
            if not _is_legal(masks[j], first):
                bad[step] += 1
                continue
            after = apply_move(boards[j], first)
            if not _is_legal(after.legal_mask(), int(s[j])):
                bad[step] += 1
    did, cid = _ids(model, test)
    per = [(s, int(seen[s]), int(bad[s])) for s in range(1, width + 1)]
    return ErrorReport(2, int(seen.sum()), int(bad.sum()), per, did, cid)


def evaluate(model: Scorable, test: Dataset, hop: int) -> ErrorReport:
    if hop == 1:
        return eval_1hop(model, test)
    if hop == 2:
        return eval_2hop(model, test)
    raise ValueError(f"hop must be 1 or 2, got {hop}")


def split_dataset(data: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    """(train, validation, test) split.

    The last 20,000 games are held out as 10,000 validation then 10,000 test
    games.  Datasets under 40,000 games are split 80/10/10 in file order.
    """
    n = len(data)
    if n >= 40_000:
        a, b = n - 20_000, n - 10_000
    else:
        a, b = int(n * 0.8), int(n * 0.9)
    return data[:a], data[a:b], data[b:]


@dataclass
class SweepRow:
    model: str
    scale: int
    hop: int
    prefixes: int
    errors: int
    rate: float
    checkpoint: str = ""
    error: str = ""


def sweep(
    configs: dict[str, ModelConfig],
    scales: Sequence[int],
    train_pool: Dataset,
    test: Dataset,
    train_configs: Callable[[int], TrainConfig] | dict[int, TrainConfig],
    hops: Sequence[int] = (1, 2),
    checkpoint_cache: Optional[Callable[[str, int, Callable[[], ModelCheckpoint]], ModelCheckpoint]] = None,
) -> list[SweepRow]:
    """Train each config on the first ``scale`` games of ``train_pool`` and score it.

    A failure in one (config, scale) cell is recorded in that cell's rows and
    the sweep carries on.
    """
    if list(scales) != sorted(scales):
        raise ValueError("scales must be sorted ascending")
    rows = []
    for name, cfg in configs.items():
        for scale in scales:
            tc = train_configs[scale] if isinstance(train_configs, dict) else train_configs(scale)
            try:
                if scale > len(train_pool):
                    raise ValueError(f"scale {scale} exceeds the {len(train_pool)} available games")

                def fit(cfg=cfg, tc=tc, scale=scale):
                    return train(cfg, tc, train_pool[:scale])

                ckpt = checkpoint_cache(name, scale, fit) if checkpoint_cache else fit()
                for hop in hops:
                    rep = evaluate(ckpt, test, hop)
                    rows.append(SweepRow(name, scale, hop, rep.total_prefixes, rep.errors, rep.error_rate, ckpt.id))
                    log.info("%s scale=%d hop=%d rate=%.4f", name, scale, hop, rep.error_rate)
            except Exception as exc:  # noqa: BLE001 - cell failures are reported, not raised
                log.warning("sweep cell %s/%d failed: %s", name, scale, exc)
                for hop in hops:
                    rows.append(SweepRow(name, scale, hop, 0, 0, float("nan"), "", repr(exc)))
    return rows


def write_sweep(rows: Sequence[SweepRow], table_path, plot_path) -> None:
    """Aggregate table (CSV) plus plot data (one JSON object per line)."""
    table_path, plot_path = Path(table_path), Path(plot_path)
    table_path.parent.mkdir(parents=True, exist_ok=True)
    plot_path.parent.mkdir(parents=True, exist_ok=True)
    with open(table_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "scale", "hop", "prefixes", "errors", "rate"])
        for r in rows:
            w.writerow([r.model, r.scale, r.hop, r.prefixes, r.errors, f"{r.rate:.6f}"])
    with open(plot_path, "w") as fh:
        for r in rows:
            fh.write(json.dumps({"series": f"{r.model}/hop{r.hop}", "x": r.scale, "y": r.rate}) + "\n")


def write_reports(reports: Sequence[ErrorReport], path, extra: Optional[dict] = None) -> Path:
    """One ``key=value`` record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = "".join(f" {k}={v}" for k, v in (extra or {}).items())
    path.write_text("".join(r.to_line() + suffix + "\n" for r in reports))
    return path

"""PCA of step features and latent move projection boards.

Board SVG schema (checked by :func:`validate_board_svg`):

* root ``<svg>`` with ``width``/``height`` = 8 * 40 + 2 * 20 and a ``<title>``;
* 64 ``<rect>`` squares with ``id="tile-A1"`` .. ``id="tile-H8"`` and
  ``class="square"``;
* a ``<rect class="prob">`` overlay for each top-5 tile, fill ``#1f5fff`` with
  ``fill-opacity`` = probability / top probability (4 decimals);
* a ``<rect class="shadow">`` for each of the 3 nearest tiles, fill ``#000000``
  with ``fill-opacity`` = 0.6 * max(cosine, 0) (4 decimals);
* one ``<rect class="top-candidate">`` with black stroke, no fill;
* ``<circle class="disc black|white">`` per disc, ``id="disc-XX"``;
* ``<circle class="legal">`` marker for each legal tile.

Plot data files hold one point per line: ``model step x y [z]``, after a
``#`` header line naming the columns.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .alignment import AlignmentMap, align_supervised, preprocess, procrustes_fit
from .engine import (
    BLACK,
    NUM_TILES,
    TILE_LABELS,
    WHITE,
    Board,
    IllegalMove,
    replay,
    tile_to_square,
)
from .features import FeatureMatrix, extract_features
from .model import BOS, ModelCheckpoint, next_move_distribution


class DimError(ValueError):
    pass


class IllegalPrefix(ValueError):
    pass


@dataclass
class PcaResult:
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    projected: np.ndarray
    mean: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, np.float64) - self.mean) @ self.components.T

    def reconstruct(self) -> np.ndarray:
        return self.projected @ self.components + self.mean


def pca(F, d: int) -> PcaResult:
    """Mean-centred SVD PCA; each component's largest-magnitude entry is positive."""
    X = np.asarray(F.rows if isinstance(F, FeatureMatrix) else F, dtype=np.float64)
    n, h = X.shape
    if not 1 <= d <= min(n - 1, h):
        raise DimError(f"d={d} outside [1, {min(n - 1, h)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:d].copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    var = s**2
    total = var.sum()
    ratio = var[:d] / total if total > 0 else np.zeros(d)
    return PcaResult(comps, ratio, Xc @ comps.T, mean)


@dataclass
class ProjectionPoint:
    model: str
    step: int
    coords: tuple


def project_game(
    ckpt_a: ModelCheckpoint,
    ckpt_b: ModelCheckpoint,
    game: Sequence[int],
    d: int = 2,
    layer: int = -1,
    alignment: Optional[AlignmentMap] = None,
    labels: tuple[str, str] = ("A", "B"),
) -> list[ProjectionPoint]:
    """Joint PCA of one game's step features from two models, B mapped onto A.

    Without an explicit ``alignment`` the map is fitted on the game's own
    (step, step) pairs.
    """
    game = tuple(game)
    la = layer % ckpt_a.config.layers
    lb = layer % ckpt_b.config.layers
    fa = preprocess(extract_features(ckpt_a, [game], la))
    fb = preprocess(extract_features(ckpt_b, [game], lb))
    W = alignment.W if alignment is not None else procrustes_fit(fb, fa).W
    joint = np.vstack([fa.rows, fb.rows @ W])
    res = pca(joint, d)
    n = len(game)
    points = []
    for i in range(2 * n):
        model = labels[0] if i < n else labels[1]
        points.append(ProjectionPoint(model, (i % n) + 1, tuple(float(v) for v in res.projected[i])))
    return points


def write_plot_data(points: Sequence[ProjectionPoint], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = len(points[0].coords) if points else 2
    header = "# model step " + " ".join("xyz"[:dims]) + "\n"
    body = "".join(
        f"{p.model} {p.step} " + " ".join(f"{v:.6f}" for v in p.coords) + "\n" for p in points
    )
    path.write_text(header + body)
    return path


def validate_plot_data(text: str) -> int:
    """Check a plot-data file; returns the number of points."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# model step x y"):
        raise ValueError("missing plot-data header")
    width = len(lines[0].split()) - 1
    count = 0
    for k, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != width:
            raise ValueError(f"line {k}: expected {width} fields")
        if not parts[0] or "#" in parts[0]:
            raise ValueError(f"line {k}: bad model id")
        if int(parts[1]) < 1:
            raise ValueError(f"line {k}: step must be >= 1")
        [float(v) for v in parts[2:]]
        count += 1
    return count


@dataclass
class BoardProjection:
    prefix: tuple
    probabilities: np.ndarray
    top5: list[tuple[int, float]]
    top_candidate: int
    nearest3: list[tuple[int, float]]
    legality_mask: np.ndarray
    board: Board = field(default_factory=Board)

    @property
    def top_candidate_legal(self) -> bool:
        return bool(self.legality_mask[self.top_candidate])

    def describe(self) -> str:
        top = ", ".join(f"{TILE_LABELS[t]}:{p:.3f}" for t, p in self.top5)
        near = ", ".join(f"{TILE_LABELS[t]}:{c:.3f}" for t, c in self.nearest3)
        return f"top5=[{top}] candidate={TILE_LABELS[self.top_candidate]} nearest3=[{near}]"


def _rank_desc(values: np.ndarray) -> np.ndarray:
    """Indices sorted by value descending, ties by lowest index."""
    return np.lexsort((np.arange(len(values)), -values))


def board_adjacent(a: int, b: int) -> bool:
    sa, sb = tile_to_square(a), tile_to_square(b)
    return a != b and max(abs(sa // 8 - sb // 8), abs(sa % 8 - sb % 8)) == 1


def latent_move_projection(ckpt: ModelCheckpoint, prefix: Sequence[int]) -> BoardProjection:
    """Next-move probabilities for ``prefix`` plus the tiles whose input embeddings
    are closest (cosine) to the top candidate's."""
    prefix = tuple(prefix)
    try:
        board = replay(prefix)
    except IllegalMove as exc:
        raise IllegalPrefix(str(exc)) from None
    probs = next_move_distribution(ckpt, [BOS, *prefix])
    order = _rank_desc(probs)
    top5 = [(int(t), float(probs[t])) for t in order[:5]]
    top = top5[0][0]
    emb = ckpt.model().tile_embeddings().detach().double().numpy()
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    cos = emb @ emb[top]
    cos[top] = -np.inf
    near = _rank_desc(cos)[:3]
    nearest3 = [(int(t), float(cos[t])) for t in near]
    mask = np.zeros(NUM_TILES, dtype=bool)
    legal = board.legal_mask()
    for t in range(NUM_TILES):
        mask[t] = bool((legal >> tile_to_square(t)) & 1)
    return BoardProjection(prefix, probs, top5, top, nearest3, mask, board)


_CELL = 40
_MARGIN = 20


def _square_xy(square: int) -> tuple[int, int]:
    return _MARGIN + (square % 8) * _CELL, _MARGIN + (square // 8) * _CELL


def _square_label(square: int) -> str:
    return "ABCDEFGH"[square % 8] + str(square // 8 + 1)


def board_svg(bp: BoardProjection) -> str:
    size = 8 * _CELL + 2 * _MARGIN
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f"<title>latent move projection after {len(bp.prefix)} moves</title>",
    ]
    for sq in range(64):
        x, y = _square_xy(sq)
        out.append(
            f'<rect id="tile-{_square_label(sq)}" class="square" x="{x}" y="{y}" '
            f'width="{_CELL}" height="{_CELL}" fill="#2e8b57" stroke="#000000" stroke-width="1"/>'
        )
    top_p = bp.top5[0][1] if bp.top5 and bp.top5[0][1] > 0 else 1.0
    for t, p in bp.top5:
        x, y = _square_xy(tile_to_square(t))
        out.append(
            f'<rect class="prob" data-tile="{TILE_LABELS[t]}" data-p="{p:.6f}" x="{x}" y="{y}" '
            f'width="{_CELL}" height="{_CELL}" fill="#1f5fff" fill-opacity="{p / top_p:.4f}"/>'
        )
    for t, c in bp.nearest3:
        x, y = _square_xy(tile_to_square(t))
        out.append(
            f'<rect class="shadow" data-tile="{TILE_LABELS[t]}" data-cos="{c:.6f}" x="{x + 4}" y="{y + 4}" '
            f'width="{_CELL - 8}" height="{_CELL - 8}" fill="#000000" fill-opacity="{0.6 * max(c, 0.0):.4f}"/>'
        )
    x, y = _square_xy(tile_to_square(bp.top_candidate))
    out.append(
        f'<rect class="top-candidate" data-tile="{TILE_LABELS[bp.top_candidate]}" x="{x + 1}" y="{y + 1}" '
        f'width="{_CELL - 2}" height="{_CELL - 2}" fill="none" stroke="#000000" stroke-width="3"/>'
    )
    for sq in range(64):
        bit = 1 << sq
        color = "black" if bp.board.black & bit else "white" if bp.board.white & bit else None
        if color is None:
            continue
        x, y = _square_xy(sq)
        fill = "#000000" if color == "black" else "#ffffff"
        out.append(
            f'<circle id="disc-{_square_label(sq)}" class="disc {color}" cx="{x + _CELL // 2}" '
            f'cy="{y + _CELL // 2}" r="{_CELL // 2 - 4}" fill="{fill}" stroke="#000000" stroke-width="1"/>'
        )
    for t in np.flatnonzero(bp.legality_mask):
        x, y = _square_xy(tile_to_square(int(t)))
        out.append(
            f'<circle class="legal" data-tile="{TILE_LABELS[t]}" cx="{x + _CELL // 2}" cy="{y + _CELL // 2}" '
            f'r="3" fill="#ffd700"/>'
        )
    for c in range(8):
        out.append(f'<text x="{_MARGIN + c * _CELL + _CELL // 2}" y="{_MARGIN - 6}" font-size="12" text-anchor="middle">{"ABCDEFGH"[c]}</text>')
    for r in range(8):
        out.append(f'<text x="{_MARGIN - 6}" y="{_MARGIN + r * _CELL + _CELL // 2 + 4}" font-size="12" text-anchor="end">{r + 1}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_board_svg(bp: BoardProjection, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(board_svg(bp))
    return path


_NS = "{http://www.w3.org/2000/svg}"


def validate_board_svg(text: str) -> dict:
    """Check an SVG against the board schema; returns element counts."""
    root = ET.fromstring(text)
    if root.tag != _NS + "svg":
        raise ValueError("root element is not <svg>")
    if root.find(_NS + "title") is None:
        raise ValueError("missing <title>")
    rects = root.findall(_NS + "rect")
    circles = root.findall(_NS + "circle")
    squares = [r for r in rects if r.get("class") == "square"]
    ids = sorted(r.get("id") for r in squares)
    expected = sorted(_square_label(sq) for sq in range(64))
    if ids != ["tile-" + s for s in expected]:
        raise ValueError("squares must be tile-A1 .. tile-H8, once each")
    counts = {"square": len(squares)}
    for cls, limit in (("prob", 5), ("shadow", 3), ("top-candidate", 1)):
        found = [r for r in rects if r.get("class") == cls]
        if len(found) != limit:
            raise ValueError(f"expected {limit} {cls} overlays, found {len(found)}")
        for r in found:
            if r.get("data-tile") not in TILE_LABELS:
                raise ValueError(f"{cls} overlay has bad data-tile")
            if cls != "top-candidate":
                op = float(r.get("fill-opacity"))
                if not 0.0 <= op <= 1.0:
                    raise ValueError(f"{cls} opacity {op} outside [0, 1]")
        counts[cls] = len(found)
    discs = [c for c in circles if (c.get("class") or "").startswith("disc ")]
    for c in discs:
        if c.get("class") not in ("disc black", "disc white") or not (c.get("id") or "").startswith("disc-"):
            raise ValueError("malformed disc element")
    counts["disc"] = len(discs)
    counts["legal"] = sum(c.get("class") == "legal" for c in circles)
    return counts

"""Othello rules on 64-bit bitboards, random game generation and dataset I/O.

Squares are numbered ``row * 8 + col`` with row 0 holding rank 1 and col 0
holding file A, so bit 0 is A1 and bit 63 is H8.  The 60 playable tiles are
numbered 0..59 in the same row-major order with D4, E4, D5 and E5 skipped;
that numbering doubles as the token id order of the sequence models.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

__all__ = [
    "BLACK",
    "WHITE",
    "EMPTY",
    "TILE_LABELS",
    "NUM_TILES",
    "Board",
    "GameRecord",
    "Dataset",
    "IllegalMove",
    "IllegalGame",
    "ParseError",
    "SplitMix64",
    "tile_label",
    "parse_tile",
    "tile_to_square",
    "square_to_tile",
    "legal_moves",
    "apply_move",
    "replay",
    "generate_games",
    "write_dataset",
    "read_dataset",
    "parse_game_line",
]

EMPTY, BLACK, WHITE = 0, 1, 2

FULL = 0xFFFF_FFFF_FFFF_FFFF
NOT_A = 0xFEFE_FEFE_FEFE_FEFE
NOT_H = 0x7F7F_7F7F_7F7F_7F7F

_CENTER = (27, 28, 35, 36)  # D4 E4 D5 E5
_SQUARES = tuple(sq for sq in range(64) if sq not in _CENTER)
_TILE_OF_SQUARE = {sq: i for i, sq in enumerate(_SQUARES)}

NUM_TILES = 60
TILE_LABELS = tuple("ABCDEFGH"[sq % 8] + str(sq // 8 + 1) for sq in _SQUARES)
_TILE_OF_LABEL = {label: i for i, label in enumerate(TILE_LABELS)}

# (shift, destination mask); the mask drops bits that wrapped around a file edge
_DIRECTIONS = (
    (1, NOT_A),
    (-1, NOT_H),
    (8, FULL),
    (-8, FULL),
    (9, NOT_A),
    (7, NOT_H),
    (-7, NOT_A),
    (-9, NOT_H),
)


class IllegalMove(ValueError):
    """Raised when a placement does not flip any opponent disc or the tile is taken."""


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, token: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if token is not None:
            where.append(f"token {token}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.token = token


class IllegalGame(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, ply: Optional[int] = None):
        super().__init__(f"{message} (line {line})" if line is not None else message)
        self.line = line
        self.ply = ply


def tile_label(tile: int) -> str:
    return TILE_LABELS[tile]


def parse_tile(label: str) -> int:
    """Parse a tile label such as ``"d3"`` or ``"D3"`` into its tile index."""
    try:
        return _TILE_OF_LABEL[label.strip().upper()]
    except KeyError:
        raise ParseError(f"unknown tile label {label!r}") from None


def tile_to_square(tile: int) -> int:
    return _SQUARES[tile]


def square_to_tile(square: int) -> int:
    try:
        return _TILE_OF_SQUARE[square]
    except KeyError:
        raise ValueError(f"square {square} is a center square and has no tile") from None


def _shift(bb: int, amount: int, mask: int) -> int:
    if amount > 0:
        return (bb << amount) & mask & FULL
    return (bb >> -amount) & mask


def _move_mask(me: int, opp: int) -> int:
    # masking the opponent set to inner files/ranks stops runs at the edges,
    # so the shifts below never need their own wrap masks
    empty = ~(me | opp) & FULL
    moves = 0
    for step, inner in ((1, 0x7E7E7E7E7E7E7E7E), (8, 0x00FFFFFFFFFFFF00),
                        (7, 0x007E7E7E7E7E7E00), (9, 0x007E7E7E7E7E7E00)):
        o = opp & inner
        t = o & (me << step)
        t |= o & (t << step)
        t |= o & (t << step)
        t |= o & (t << step)
        t |= o & (t << step)
        t |= o & (t << step)
        moves |= t << step
        t = o & (me >> step)
        t |= o & (t >> step)
        t |= o & (t >> step)
        t |= o & (t >> step)
        t |= o & (t >> step)
        t |= o & (t >> step)
        moves |= t >> step
    return moves & empty


def _flips(me: int, opp: int, bit: int) -> int:
    flipped = 0
    for amount, mask in _DIRECTIONS:
        line = 0
        x = _shift(bit, amount, mask)
        while x & opp:
            line |= x
            x = _shift(x, amount, mask)
        if x & me:
            flipped |= line
    return flipped


def _bits(bb: int) -> Iterator[int]:
    while bb:
        low = bb & -bb
        yield low.bit_length() - 1
        bb ^= low


@dataclass(frozen=True)
class Board:
    """An Othello position: two disc bitboards plus the side to move."""

    black: int = (1 << 28) | (1 << 35)
    white: int = (1 << 27) | (1 << 36)
    to_move: int = BLACK

    @classmethod
    def initial(cls) -> "Board":
        return cls()

    @property
    def mover_discs(self) -> int:
        return self.black if self.to_move == BLACK else self.white

    @property
    def opponent_discs(self) -> int:
        return self.white if self.to_move == BLACK else self.black

    @property
    def cells(self) -> list[int]:
        """64 cell states (EMPTY, BLACK or WHITE), A1 first."""
        return [
            BLACK if (self.black >> sq) & 1 else WHITE if (self.white >> sq) & 1 else EMPTY
            for sq in range(64)
        ]

    def count(self, color: int) -> int:
        return (self.black if color == BLACK else self.white).bit_count()

    @property
    def discs(self) -> int:
        return (self.black | self.white).bit_count()

    def legal_mask(self) -> int:
        return _move_mask(self.mover_discs, self.opponent_discs)

    def is_terminal(self) -> bool:
        return not self.legal_mask() and not _move_mask(self.opponent_discs, self.mover_discs)

    def winner(self) -> Optional[str]:
        """'BlackWin', 'WhiteWin' or 'Draw' for a finished position, else None."""
        if not self.is_terminal():
            return None
        b, w = self.count(BLACK), self.count(WHITE)
        return "BlackWin" if b > w else "WhiteWin" if w > b else "Draw"

    def __str__(self) -> str:
        glyph = {EMPTY: ".", BLACK: "X", WHITE: "O"}
        cells = self.cells
        rows = ["  A B C D E F G H"]
        for r in range(8):
            rows.append(f"{r + 1} " + " ".join(glyph[cells[r * 8 + c]] for c in range(8)))
        return "\n".join(rows)


def legal_moves(board: Board) -> set[int]:
    """Tiles where the side to move flips at least one disc; empty when it must pass."""
    return {_TILE_OF_SQUARE[sq] for sq in _bits(board.legal_mask())}


def sorted_legal_moves(board: Board) -> list[int]:
    return [_TILE_OF_SQUARE[sq] for sq in _bits(board.legal_mask())]


def apply_move(board: Board, tile: int) -> Board:
    """Place a disc for the side to move and flip every bracketed line.

    The turn passes to the opponent unless the opponent has no legal reply, in
    which case the current player moves again.
    """
    if not 0 <= tile < NUM_TILES:
        raise IllegalMove(f"tile index {tile} out of range")
    bit = 1 << _SQUARES[tile]
    me, opp = board.mover_discs, board.opponent_discs
    if (me | opp) & bit:
        raise IllegalMove(f"{TILE_LABELS[tile]} is occupied")
    flipped = _flips(me, opp, bit)
    if not flipped:
        raise IllegalMove(f"{TILE_LABELS[tile]} flips nothing")
    me |= bit | flipped
    opp &= ~flipped
    other = WHITE if board.to_move == BLACK else BLACK
    nxt = other if _move_mask(opp, me) else board.to_move
    if board.to_move == BLACK:
        return Board(me, opp, nxt)
    return Board(opp, me, nxt)


def replay(moves: Iterable[int], board: Optional[Board] = None) -> Board:
    board = Board() if board is None else board
    for tile in moves:
        board = apply_move(board, tile)
    return board


@dataclass(frozen=True)
class GameRecord:
    moves: tuple[int, ...]
    outcome: Optional[str] = None

    def __post_init__(self):
        if len(self.moves) > NUM_TILES:
            raise IllegalGame(f"game has {len(self.moves)} moves, at most 60 allowed")

    def __len__(self) -> int:
        return len(self.moves)

    @property
    def labels(self) -> list[str]:
        return [TILE_LABELS[t] for t in self.moves]

    def boards(self) -> list[Board]:
        """Boards before each move plus the final board (len(moves) + 1 entries)."""
        out = [Board()]
        for tile in self.moves:
            out.append(apply_move(out[-1], tile))
        return out

    def validate(self) -> Board:
        return replay(self.moves)


@dataclass
class Dataset:
    games: list[GameRecord]
    source_tag: str = "synthetic"
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.games)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.games[idx], self.source_tag, self.seed)
        return self.games[idx]

    def __iter__(self) -> Iterator[GameRecord]:
        return iter(self.games)

    def to_text(self) -> str:
        return "".join(" ".join(g.labels) + "\n" for g in self.games)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def stats(self) -> dict:
        lengths = [len(g) for g in self.games]
        n = len(lengths)
        mean = sum(lengths) / n
        var = sum((x - mean) ** 2 for x in lengths) / n
        return {
            "count": n,
            "mean_length": mean,
            "std_length": var**0.5,
            "min_length": min(lengths),
            "full_length_fraction": sum(x == NUM_TILES for x in lengths) / n,
        }


class SplitMix64:
    """SplitMix64 (Steele, Lea and Flood 2014); integer-only, identical on every platform."""

    GAMMA = 0x9E37_79B9_7F4A_7C15

    def __init__(self, seed: int):
        self.state = seed & FULL

    def next(self) -> int:
        self.state = (self.state + self.GAMMA) & FULL
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9) & FULL
        z = ((z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB) & FULL
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n


def _random_game(seed: int) -> GameRecord:
    rng = SplitMix64(seed)
    me, opp = Board().black, Board().white
    color = BLACK
    moves = []
    while True:
        mask = _move_mask(me, opp)
        if not mask:
            if not _move_mask(opp, me):
                break
            me, opp, color = opp, me, WHITE + BLACK - color
            continue
        squares = list(_bits(mask))
        sq = squares[rng.below(len(squares))]
        bit = 1 << sq
        flipped = _flips(me, opp, bit)
        me |= bit | flipped
        opp &= ~flipped
        moves.append(_TILE_OF_SQUARE[sq])
        me, opp, color = opp, me, WHITE + BLACK - color
    black = me if color == BLACK else opp
    b, w = black.bit_count(), (me | opp).bit_count() - black.bit_count()
    outcome = "BlackWin" if b > w else "WhiteWin" if w > b else "Draw"
    return GameRecord(tuple(moves), outcome)


def generate_games(count: int, seed: int, start: int = 0) -> Dataset:
    """Uniform-random self-play games.

    Game ``i`` draws from its own SplitMix64 stream seeded with ``seed ^ i``, so
    any index range can be produced independently and concatenated.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    seed &= FULL
    games = [_random_game(seed ^ i) for i in range(start, start + count)]
    return Dataset(games, "synthetic", seed)


def parse_game_line(line: str, lineno: Optional[int] = None) -> Optional[tuple[int, ...]]:
    """Tile indices of one dataset line, or None for a blank/comment-only line."""
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    moves = []
    for k, token in enumerate(body.split(), start=1):
        try:
            moves.append(_TILE_OF_LABEL[token.upper()])
        except KeyError:
            raise ParseError(f"unknown tile label {token!r}", line=lineno, token=k) from None
    return tuple(moves)


def read_dataset(path, source_tag: str = "other", seed: Optional[int] = None) -> Dataset:
    """Read a one-game-per-line text file, replaying every game to check legality."""
    games = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            moves = parse_game_line(line, lineno)
            if moves is None:
                continue
            if len(moves) > NUM_TILES:
                raise IllegalGame(f"{len(moves)} moves exceed 60", line=lineno)
            board = Board()
            for ply, tile in enumerate(moves, start=1):
                try:
                    board = apply_move(board, tile)
                except IllegalMove as exc:
                    raise IllegalGame(f"ply {ply}: {exc}", line=lineno, ply=ply) from None
            if len(moves) < 4:
                warnings.warn(f"line {lineno}: game has only {len(moves)} moves", stacklevel=2)
            games.append(GameRecord(moves, board.winner()))
    return Dataset(games, source_tag, seed)


def write_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dataset.to_text())
    return path


def load_games(path_or_lines: Sequence[str]) -> Dataset:
    """Parse in-memory lines with the same rules as :func:`read_dataset`."""
    games = []
    for lineno, line in enumerate(path_or_lines, start=1):
        moves = parse_game_line(line, lineno)
        if moves is None:
            continue
        try:
            board = replay(moves)
        except IllegalMove as exc:
            raise IllegalGame(str(exc), line=lineno) from None
        games.append(GameRecord(moves, board.winner()))
    return Dataset(games, "other")

"""Deliberately plain Othello rules on an 8x8 int grid.

Shares nothing with the bitboard engine except the label convention
(column letter A-H, row digit 1-8), so it can serve as an oracle.  Cells hold
0 (empty), 1 (black) or 2 (white); row 0 is rank 1, column 0 is file A.
The hot loops are compiled with numba so that 10k-game sweeps stay fast.
"""

import numpy as np
from numba import njit

DR = np.array([-1, -1, -1, 0, 0, 1, 1, 1], dtype=np.int64)
DC = np.array([-1, 0, 1, -1, 1, -1, 0, 1], dtype=np.int64)


def start():
    grid = np.zeros((8, 8), dtype=np.int8)
    grid[3, 3] = 2  # D4
    grid[4, 4] = 2  # E5
    grid[4, 3] = 1  # D5
    grid[3, 4] = 1  # E4
    return grid, 1


def label(r, c):
    return "ABCDEFGH"[c] + str(r + 1)


def parse(lab):
    return int(lab[1]) - 1, "ABCDEFGH".index(lab[0].upper())


@njit(cache=True)
def n_captures(grid, color, r, c):
    if grid[r, c] != 0:
        return 0
    opp = 3 - color
    total = 0
    for d in range(8):
        rr, cc = r + DR[d], c + DC[d]
        run = 0
        while 0 <= rr < 8 and 0 <= cc < 8 and grid[rr, cc] == opp:
            run += 1
            rr += DR[d]
            cc += DC[d]
        if run > 0 and 0 <= rr < 8 and 0 <= cc < 8 and grid[rr, cc] == color:
            total += run
    return total


@njit(cache=True)
def legal_grid(grid, color):
    out = np.zeros((8, 8), dtype=np.bool_)
    for r in range(8):
        for c in range(8):
            out[r, c] = n_captures(grid, color, r, c) > 0
    return out


@njit(cache=True)
def has_move(grid, color):
    for r in range(8):
        for c in range(8):
            if n_captures(grid, color, r, c) > 0:
                return True
    return False


@njit(cache=True)
def play_inplace(grid, color, r, c):
    """Place and flip; returns the next color or -1 when the move is illegal."""
    if n_captures(grid, color, r, c) == 0:
        return -1
    opp = 3 - color
    for d in range(8):
        rr, cc = r + DR[d], c + DC[d]
        run = 0
        while 0 <= rr < 8 and 0 <= cc < 8 and grid[rr, cc] == opp:
            run += 1
            rr += DR[d]
            cc += DC[d]
        if run > 0 and 0 <= rr < 8 and 0 <= cc < 8 and grid[rr, cc] == color:
            rr, cc = r + DR[d], c + DC[d]
            for _ in range(run):
                grid[rr, cc] = color
                rr += DR[d]
                cc += DC[d]
    grid[r, c] = color
    if has_move(grid, opp):
        return opp
    return color


@njit(cache=True)
def random_games(n_games, seed):
    """Uniform random games.

    Returns moves (n, 60) as r*8+c (-1 padded), legal masks before every ply
    as (n, 61, 64) booleans, side to move before every ply, and final grids.
    """
    np.random.seed(seed)
    moves = np.full((n_games, 60), -1, dtype=np.int64)
    legal = np.zeros((n_games, 61, 64), dtype=np.bool_)
    movers = np.zeros((n_games, 61), dtype=np.int64)
    finals = np.zeros((n_games, 8, 8), dtype=np.int8)
    cand = np.zeros(64, dtype=np.int64)
    for g in range(n_games):
        grid = np.zeros((8, 8), dtype=np.int8)
        grid[3, 3] = 2
        grid[4, 4] = 2
        grid[4, 3] = 1
        grid[3, 4] = 1
        color = 1
        ply = 0
        while True:
            lg = legal_grid(grid, color)
            k = 0
            for sq in range(64):
                legal[g, ply, sq] = lg[sq // 8, sq % 8]
                if lg[sq // 8, sq % 8]:
                    cand[k] = sq
                    k += 1
            movers[g, ply] = color
            if k == 0:
                break
            sq = cand[np.random.randint(0, k)]
            moves[g, ply] = sq
            color = play_inplace(grid, color, sq // 8, sq % 8)
            ply += 1
        finals[g] = grid
    return moves, legal, movers, finals


def moves(grid, color):
    lg = legal_grid(grid, color)
    return sorted(label(r, c) for r in range(8) for c in range(8) if lg[r, c])


def play(grid, color, move):
    """Return (new grid, next color); raises ValueError on an illegal move."""
    r, c = parse(move)
    new = grid.copy()
    nxt = play_inplace(new, color, r, c)
    if nxt < 0:
        raise ValueError(f"illegal move {move}")
    return new, nxt


@njit(cache=True)
def _walk(grid, color, depth):
    if depth == 0:
        return 1
    total = 0
    for r in range(8):
        for c in range(8):
            if n_captures(grid, color, r, c) > 0:
                child = grid.copy()
                nxt = play_inplace(child, color, r, c)
                total += _walk(child, nxt, depth - 1)
    return total


def count_sequences(depth):
    """Number of distinct move sequences of exactly ``depth`` placements from the start."""
    grid, color = start()
    return int(_walk(grid, color, depth))

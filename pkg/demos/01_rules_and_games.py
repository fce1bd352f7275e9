"""# Rules and random games

Walk through the engine: the opening position, a few moves, an early finish
and the length statistics of uniformly random self-play."""

from othello_world.engine import Board, apply_move, generate_games, legal_moves, parse_tile, tile_label

# %%
# The opening. Black moves first and has exactly four options.
board = Board()
print(board)
print("legal:", sorted(tile_label(t) for t in legal_moves(board)))

# %%
# D3 flips D4. White is to move next.
board = apply_move(board, parse_tile("D3"))
print(board)
print("to move:", "white" if board.to_move == 2 else "black")

# %%
# A hand-built position: D1 takes both white discs and nobody can move after.
black, white = 1 << 0, (1 << 1) | (1 << 2)
after = apply_move(Board(black, white, 1), parse_tile("D1"))
print(after)
print("over:", after.is_terminal(), " winner:", after.winner())

# %%
""" Random self-play. Each game draws uniformly among legal moves with its own
SplitMix64 stream, so any shard of a dataset can be regenerated alone. """
data = generate_games(5000, seed=1)
print(data.stats())
print(" ".join(data.games[0].labels[:12]), "...")

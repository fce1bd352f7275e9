"""# Do two independently trained models share a board representation?

Train two models that differ only in their seed, take their final-layer
hidden states on the same prefixes, and look for an orthogonal map between
them.  Supervised alignment uses the (game, step) pairing; unsupervised
alignment never sees it.  Takes five minutes or so on one CPU core."""

import torch

from othello_world.alignment import align_supervised, align_unsupervised
from othello_world.engine import generate_games
from othello_world.features import extract_features
from othello_world.model import ModelConfig, TrainConfig, train

torch.set_num_threads(1)

# %%
games = generate_games(4000, seed=5)
tc = TrainConfig(total_steps=1500, batch_size=32, learning_rate=2e-3, warmup_steps=100)
models = [train(ModelConfig(layers=2, hidden_dim=64, heads=4, seed=s), tc, games) for s in (0, 1)]

# %%
fit = generate_games(300, seed=5, start=100_000)
held = generate_games(80, seed=5, start=200_000)
ids = range(300, 380)
fa, fb = (extract_features(m, fit, 1) for m in models)
sa, sb = (extract_features(m, held, 1, game_ids=ids) for m in models)
print("feature matrices:", fa.rows.shape, fb.rows.shape)

# %%
_, sup = align_supervised(fa, fb, score=(sa, sb))
print(f"unaligned cosine {sup.baseline_mean_cosine:.3f}  supervised {sup.mean_cosine:.3f}")

# %%
""" The unsupervised search tries several starting maps and keeps the one
whose mapped rows sit closest to their CSLS neighbours.  Openings repeat
across games, so both models hold the same repeated rows with the same
counts; that alone anchors a good start. """
amap, unsup = align_unsupervised(fa, fb, score=(sa, sb), k=500)
print(f"unsupervised {unsup.mean_cosine:.3f}  chosen start: {amap.provenance['start']}")
print(amap.provenance["criterion"])

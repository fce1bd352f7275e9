"""# Latent move projection

Paint the model's next-move distribution on the board, outline its top
candidate, and shade the three tiles whose token embeddings are closest to
that candidate.  Writes SVG files next to this script."""

from pathlib import Path

import numpy as np
import torch

from othello_world.engine import generate_games
from othello_world.model import ModelConfig, TrainConfig, train
from othello_world.viz import board_adjacent, latent_move_projection, pca, render_board_svg, validate_board_svg

torch.set_num_threads(1)
out = Path(__file__).with_suffix("")
out.mkdir(exist_ok=True)

# %%
ckpt = train(
    ModelConfig(layers=2, hidden_dim=64, heads=4),
    TrainConfig(total_steps=600, batch_size=32, learning_rate=2e-3, warmup_steps=50),
    generate_games(4000, seed=9),
)
game = generate_games(1, seed=9, start=500_000).games[0]

# %%
for k in (0, 20, 45):
    bp = latent_move_projection(ckpt, game.moves[:k])
    path = render_board_svg(bp, out / f"board_{k:02d}.svg")
    near = bp.nearest3[0][0]
    print(f"after {k:2d} moves: {bp.describe()}")
    print(f"   legal top candidate: {bp.top_candidate_legal}, nearest tile adjacent: {board_adjacent(bp.top_candidate, near)}")
    print("   schema:", validate_board_svg(path.read_text()))

# %%
# PCA of the 60 tile embeddings: how much the first two components explain.
emb = ckpt.model().tile_embeddings().detach().numpy()
res = pca(emb, 2)
print("explained variance:", np.round(res.explained_variance_ratio, 3))

"""# Train a move model and score legality

A small decoder learns next-move prediction from move sequences only.  We
then count how often its greedy move is illegal on the true board (1-hop),
and how often either of two self-generated moves is illegal (2-hop).
Takes two or three minutes on one CPU core."""

import torch

from othello_world.engine import generate_games, tile_label
from othello_world.evaluation import eval_1hop, eval_2hop
from othello_world.model import ModelConfig, TrainConfig, generate_k, train, BOS

torch.set_num_threads(1)

# %%
train_set = generate_games(4000, seed=3)
test_set = generate_games(200, seed=3, start=1_000_000)

ckpt = train(
    ModelConfig(layers=2, hidden_dim=64, heads=4),
    TrainConfig(total_steps=2000, batch_size=32, learning_rate=2e-3, warmup_steps=100, eval_interval=250),
    train_set,
    callback=lambda step, loss: print(f"step {step:4d}  loss {loss:.3f}"),
)

# %%
one, two = eval_1hop(ckpt, test_set), eval_2hop(ckpt, test_set)
print(one.to_line())
print(two.to_line())

# %%
# Error rate by position in the game.
for step, rate in one.per_position_breakdown[::10]:
    print(f"step {step:2d}: {rate:.3f}")

# %%
print("opening continuation:", [tile_label(t) for t in generate_k(ckpt, [BOS], 2)])

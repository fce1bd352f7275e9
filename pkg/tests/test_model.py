import math

import numpy as np
import pytest
import torch

from othello_world.engine import GameRecord, generate_games, parse_tile
from othello_world.features import FeatureMatrix, extract_features
from othello_world.model import (
    BOS,
    PAD,
    ConfigError,
    DataError,
    LayerError,
    LengthError,
    ModelCheckpoint,
    ModelConfig,
    MoveTransformer,
    Tokenizer,
    TrainConfig,
    encode_game,
    game_batch,
    generate_k,
    greedy_two_step,
    next_move_distribution,
    sequence_loss,
    train,
    _split_enc_dec,
)

TINY = ModelConfig(layers=2, hidden_dim=32, heads=4, seed=3)


@pytest.fixture(scope="module")
def games():
    return generate_games(64, 17)


@pytest.fixture(scope="module")
def tiny_ckpt(games):
    return train(TINY, TrainConfig(total_steps=40, batch_size=16, warmup_steps=5), games)


def test_encode_game():
    assert encode_game(GameRecord(())) == [BOS]
    d3 = parse_tile("D3")
    assert encode_game(GameRecord((d3,))) == [BOS, d3]
    g = generate_games(1, 4).games[0]
    ids = encode_game(g)
    assert ids[0] == BOS and all(0 <= t < 60 for t in ids[1:])
    assert len(ids) == len(g) + 1


def test_tokenizer_bijection():
    tok = Tokenizer()
    ids = list(range(62))
    assert tok.encode(tok.decode(ids)) == ids
    assert tok.symbol(BOS) == "<bos>" and tok.symbol(PAD) == "<pad>"
    assert tok.symbol(parse_tile("H8")) == "H8"


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=30, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(max_seq_len=60).validate()
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_empty_dataset_rejected(games):
    with pytest.raises(DataError):
        train(TINY, TrainConfig(total_steps=1), games[:0])


def _param_groups(model):
    return dict(model.named_parameters())


@pytest.mark.parametrize("arch", ["decoder_only", "encoder_decoder"])
def test_gradients_match_finite_differences(arch):
    torch.manual_seed(0)
    cfg = ModelConfig(architecture=arch, layers=1, encoder_layers=1, hidden_dim=8, heads=2)
    model = MoveTransformer(cfg).double()
    # larger weights than the default init so every group has a visible gradient
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
    seqs = [g.moves[:12] for g in generate_games(3, 8)]
    inp, tgt = game_batch(seqs)
    loss = sequence_loss(model, inp, tgt)
    model.zero_grad()
    loss.backward()
    eps = 1e-6
    worst = {}
    for name, p in _param_groups(model).items():
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = sequence_loss(model, inp, tgt).item()
                flat[i] = old - eps
                down = sequence_loss(model, inp, tgt).item()
                flat[i] = old
            numeric[i] = (up - down) / (2 * eps)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst[name] = (analytic - numeric).norm().item() / denom
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    assert not bad, bad


def test_initial_loss_near_uniform(games):
    torch.manual_seed(0)
    model = MoveTransformer(ModelConfig())
    inp, tgt = game_batch([g.moves for g in games[:16]])
    loss = sequence_loss(model, inp, tgt).item()
    assert abs(loss - math.log(60)) < 0.1


def test_identical_embeddings_give_uniform_distribution():
    ckpt = ModelCheckpoint.from_model(MoveTransformer(TINY))
    ckpt.weights["tok_emb.weight"][:] = ckpt.weights["tok_emb.weight"][0]
    p = next_move_distribution(ckpt, [BOS, parse_tile("D3")])
    np.testing.assert_allclose(p, 1 / 60, atol=1e-6)


def test_distribution_normalised(tiny_ckpt):
    rng = np.random.default_rng(0)
    pool = generate_games(200, 5)
    for _ in range(1000):
        g = pool.games[rng.integers(len(pool))]
        k = int(rng.integers(0, len(g)))
        p = next_move_distribution(tiny_ckpt, [BOS, *g.moves[:k]])
        assert p.shape == (60,)
        assert (p >= 0).all()
        assert abs(p.sum() - 1) <= 1e-6


def test_prefix_checks(tiny_ckpt):
    with pytest.raises(ValueError):
        next_move_distribution(tiny_ckpt, [parse_tile("D3")])
    with pytest.raises(LengthError):
        next_move_distribution(tiny_ckpt, [BOS] + [0] * 63)


def test_causality(tiny_ckpt):
    model = tiny_ckpt.model()
    seq = torch.tensor([[BOS, *generate_games(1, 1).games[0].moves[:30]]])
    with torch.no_grad():
        base = model(seq)
        for j in (3, 10, 25):
            other = seq.clone()
            other[0, j] = (other[0, j] + 7) % 60
            changed = model(other)
            torch.testing.assert_close(changed[:, :j], base[:, :j], rtol=0, atol=0)
            assert not torch.equal(changed[:, j:], base[:, j:])


def test_checkpoint_round_trip(tmp_path, tiny_ckpt):
    path = tiny_ckpt.save(tmp_path / "m.ckpt")
    back = ModelCheckpoint.load(path)
    assert back.config == tiny_ckpt.config
    assert back.id == tiny_ckpt.id
    seq = torch.tensor([[BOS, *generate_games(1, 2).games[0].moves[:40]]])
    with torch.no_grad():
        assert torch.equal(back.model()(seq), tiny_ckpt.model()(seq))
    assert back.training_meta["steps"] == 40


def test_checkpoint_shape_mismatch(tiny_ckpt):
    bad = ModelCheckpoint(tiny_ckpt.config, dict(tiny_ckpt.weights))
    bad.weights["ln_f.weight"] = np.zeros(5, dtype=np.float32)
    with pytest.raises(ConfigError):
        bad.model()


def test_training_is_reproducible(games):
    tc = TrainConfig(total_steps=15, batch_size=8, eval_interval=5)
    a = train(TINY, tc, games)
    b = train(TINY, tc, games)
    assert a.training_meta["loss_history"] == b.training_meta["loss_history"]
    assert a.id == b.id


def test_generate_k(tiny_ckpt):
    prefix = [BOS, parse_tile("D3")]
    p = next_move_distribution(tiny_ckpt, prefix)
    one = generate_k(tiny_ckpt, prefix, 1)
    assert one == [int(np.argmax(p))]
    two = generate_k(tiny_ckpt, prefix, 2)
    assert two[0] == one[0]
    assert two[1] == generate_k(tiny_ckpt, prefix + [one[0]], 1)[0]
    assert all(generate_k(tiny_ckpt, prefix, 2) == two for _ in range(100))


def test_batched_two_step_matches_generate_k(tiny_ckpt):
    games = [g.moves for g in generate_games(3, 21)]
    firsts, seconds = greedy_two_step(tiny_ckpt, games)
    for g, f, s in zip(games, firsts, seconds):
        for j in range(0, len(g), 7):
            assert generate_k(tiny_ckpt, [BOS, *g[:j]], 2) == [int(f[j]), int(s[j])]


def test_overfit_single_game():
    game = generate_games(1, 31)
    ckpt = train(
        ModelConfig(layers=2, hidden_dim=64, heads=4, seed=1),
        TrainConfig(total_steps=150, batch_size=1, learning_rate=3e-3, warmup_steps=10),
        game,
    )
    moves = list(game.games[0].moves)
    seq = [BOS]
    for _ in moves:
        seq += generate_k(ckpt, seq, 1)
    assert seq[1:] == moves
    for k in (0, 17, 42):
        p = next_move_distribution(ckpt, [BOS, *moves[:k]])
        assert int(np.argmax(p)) == moves[k]


def test_encoder_decoder_layout():
    assert _split_enc_dec([BOS]) == ([BOS], [BOS])
    assert _split_enc_dec([BOS, 5]) == ([BOS, 5], [BOS])
    assert _split_enc_dec([BOS, 5, 6, 7]) == ([BOS, 5], [BOS, 6, 7])


def test_encoder_decoder_trains_and_extracts(games):
    cfg = ModelConfig.encoder_decoder(hidden_dim=32, heads=4, seed=2)
    ckpt = train(cfg, TrainConfig(total_steps=10, batch_size=8), games)
    assert ckpt.training_meta["final_loss"] < 4.5
    p = next_move_distribution(ckpt, [BOS])
    assert abs(p.sum() - 1) < 1e-6
    fm = extract_features(ckpt, games[:2], 1)
    assert fm.n == len(games[0]) + len(games[1])


def test_encoder_sees_only_first_move(games):
    cfg = ModelConfig.encoder_decoder(hidden_dim=32, heads=4, seed=2)
    model = MoveTransformer(cfg)
    seen = []
    hook = model.encoder[0].register_forward_hook(lambda m, i, o: seen.append(i[0].shape[1]))
    ckpt = ModelCheckpoint.from_model(model)
    ckpt._model = model.eval()
    next_move_distribution(ckpt, [BOS, *games[0].moves[:10]])
    hook.remove()
    assert seen == [2]


def test_extract_features(tiny_ckpt, games):
    full = next(g for g in games if len(g) == 60)
    fm = extract_features(tiny_ckpt, [full.moves], 1)
    assert (fm.n, fm.h) == (60, 32)
    assert list(fm.steps) == list(range(1, 61))
    again = extract_features(tiny_ckpt, [full.moves], 1)
    assert np.array_equal(fm.rows, again.rows)
    with pytest.raises(LayerError):
        extract_features(tiny_ckpt, [full.moves], 2)


def test_features_differ_across_seeds(games):
    tc = TrainConfig(total_steps=5, batch_size=8)
    a = train(TINY, tc, games)
    b = train(ModelConfig(**{**TINY.to_dict(), "seed": 4}), tc, games)
    fa = extract_features(a, games[:2], 1)
    fb = extract_features(b, games[:2], 1)
    assert fa.rows.shape == fb.rows.shape
    assert not np.allclose(fa.rows, fb.rows)


def test_feature_file_round_trip(tmp_path, tiny_ckpt, games):
    fm = extract_features(tiny_ckpt, games[:3], 0)
    back = FeatureMatrix.load(fm.save(tmp_path / "f.feat"))
    assert np.array_equal(back.rows, fm.rows)
    assert np.array_equal(back.games, fm.games) and np.array_equal(back.steps, fm.steps)
    assert back.meta == fm.meta

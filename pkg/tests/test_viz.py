import numpy as np
import pytest

from othello_world.alignment import AlignmentMap, random_orthogonal
from othello_world.engine import generate_games, parse_tile
from othello_world.model import ModelConfig, TrainConfig, train
from othello_world.viz import (
    DimError,
    IllegalPrefix,
    board_adjacent,
    board_svg,
    latent_move_projection,
    pca,
    project_game,
    render_board_svg,
    validate_board_svg,
    validate_plot_data,
    write_plot_data,
)


@pytest.fixture(scope="module")
def pair():
    games = generate_games(64, 3)
    tc = TrainConfig(total_steps=30, batch_size=16, warmup_steps=5)
    a = train(ModelConfig(layers=2, hidden_dim=32, heads=4, seed=0), tc, games)
    b = train(ModelConfig(layers=2, hidden_dim=32, heads=4, seed=1), tc, games)
    return a, b


def test_pca_collinear():
    X = np.outer([0.0, 1.0, 2.0], np.arange(1, 6))
    res = pca(X, 2)
    np.testing.assert_allclose(res.explained_variance_ratio, [1.0, 0.0], atol=1e-6)


def test_pca_full_rank_sums_to_one():
    X = np.random.default_rng(0).standard_normal((40, 6))
    res = pca(X, 6)
    assert res.explained_variance_ratio.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(np.diff(res.explained_variance_ratio) <= 1e-12)
    np.testing.assert_allclose(res.components @ res.components.T, np.eye(6), atol=1e-6)
    np.testing.assert_allclose(res.reconstruct(), X, atol=1e-10)


def test_pca_reconstruction_monotone():
    X = np.random.default_rng(1).standard_normal((50, 10))
    errs = [np.linalg.norm(pca(X, d).reconstruct() - X) for d in range(1, 11)]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_pca_sign_convention_and_duplicates():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((30, 4))
    X[5] = X[6]
    a, b = pca(X, 3), pca(-X[::-1].copy() * -1, 3)
    for c in a.components:
        assert c[np.argmax(np.abs(c))] > 0
    np.testing.assert_allclose(a.components, b.components, atol=1e-12)
    np.testing.assert_array_equal(a.projected[5], a.projected[6])


def test_pca_dim_errors():
    X = np.zeros((4, 3))
    for d in (0, 4):
        with pytest.raises(DimError):
            pca(X, d)


def test_project_game_same_model_coincides(pair, tmp_path):
    a, _ = pair
    game = generate_games(1, 9).games[0].moves
    pts = project_game(a, a, game)
    assert len(pts) == 2 * len(game)
    n = len(game)
    for p, q in zip(pts[:n], pts[n:]):
        assert (p.model, q.model, p.step) == ("A", "B", q.step)
        assert np.allclose(p.coords, q.coords, atol=1e-5)
    text = write_plot_data(pts, tmp_path / "p.txt").read_text()
    assert validate_plot_data(text) == 2 * n
    assert write_plot_data(pts, tmp_path / "q.txt").read_bytes() == text.encode()


def test_project_game_alignment_beats_random_map(pair):
    a, b = pair
    rng = np.random.default_rng(0)
    wins = 0
    games = generate_games(20, 77)
    for g in games:
        n = len(g)
        def spread(points):
            P = np.array([p.coords for p in points])
            return np.linalg.norm(P[:n] - P[n:], axis=1).mean()
        fitted = spread(project_game(a, b, g.moves, d=3))
        rand = AlignmentMap(random_orthogonal(32, rng), "supervised", 1, 0, {})
        wins += fitted < spread(project_game(a, b, g.moves, d=3, alignment=rand))
    assert wins >= 19


def test_plot_data_validation_rejects_bad_rows():
    with pytest.raises(ValueError):
        validate_plot_data("model step x y\nA 1 0 0\n")
    with pytest.raises(ValueError):
        validate_plot_data("# model step x y\nA 0 0.1 0.2\n")
    with pytest.raises(ValueError):
        validate_plot_data("# model step x y\nA 1 0.1\n")


def test_latent_projection_opening(pair, tmp_path):
    a, _ = pair
    bp = latent_move_projection(a, [])
    assert bp.probabilities.sum() == pytest.approx(1.0, abs=1e-6)
    assert bp.legality_mask.sum() == 4
    assert bp.top_candidate == bp.top5[0][0]
    assert bp.top_candidate not in [t for t, _ in bp.nearest3]
    probs = [p for _, p in bp.top5]
    assert probs == sorted(probs, reverse=True)
    assert min(probs) >= np.sort(bp.probabilities)[-5]
    counts = validate_board_svg(board_svg(bp))
    assert counts["disc"] == 4 and counts["legal"] == 4
    p1 = render_board_svg(bp, tmp_path / "a.svg")
    p2 = render_board_svg(latent_move_projection(a, []), tmp_path / "b.svg")
    assert p1.read_bytes() == p2.read_bytes()


def test_latent_projection_midgame(pair):
    a, _ = pair
    game = generate_games(1, 12).games[0].moves
    bp = latent_move_projection(a, game[:20])
    counts = validate_board_svg(board_svg(bp))
    assert counts["disc"] == 24
    assert counts["legal"] == int(bp.legality_mask.sum()) > 0
    assert "candidate=" in bp.describe()


def test_illegal_prefix(pair):
    with pytest.raises(IllegalPrefix):
        latent_move_projection(pair[0], [parse_tile("A1")])


def test_svg_validator_rejects_tampering(pair):
    svg = board_svg(latent_move_projection(pair[0], []))
    with pytest.raises(ValueError):
        validate_board_svg(svg.replace('id="tile-A1"', 'id="tile-Z9"'))
    with pytest.raises(ValueError):
        validate_board_svg(svg.replace('class="top-candidate"', 'class="other"'))


def test_board_adjacent():
    assert board_adjacent(parse_tile("F2"), parse_tile("E3"))
    assert not board_adjacent(parse_tile("A1"), parse_tile("C1"))
    assert not board_adjacent(parse_tile("A1"), parse_tile("A1"))

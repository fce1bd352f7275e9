"""Linear alignment of representation spaces across independently trained models.

Maps act on the feature dimension: a source row ``x`` is sent to ``x @ W``
with ``W`` orthogonal.  Supervised alignment starts from (game, step) pairs
and refines with CSLS mutual-nearest-neighbour dictionaries; unsupervised
alignment replaces the given pairs with several pairing-free estimates of
``W`` (adversarial among them) and keeps the best one.
"""

from __future__ import annotations

import json
import logging
import os
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence
import warnings

import numpy as np
import torch
import torch.nn as nn

from .features import FeatureMatrix, pair_rows

log = logging.getLogger(__name__)

ALIGNMENT_MAGIC = b"OWALGN\x00\x01"


class DegenerateRow(ValueError):
    pass


class RankError(ValueError):
    pass


class EmptyDictionary(ValueError):
    pass


class CollapseError(RuntimeError):
    pass


class AlignConfigError(ValueError):
    pass


def preprocess(F: FeatureMatrix) -> FeatureMatrix:
    """Mean-center columns, then scale every row to unit length.

    A matrix that is already flagged as centered is only renormalized, so the
    operation is idempotent.
    """
    if F.n < 2:
        raise ValueError("preprocess needs at least two rows")
    flags = list(F.meta.get("preprocessing", []))
    X = np.asarray(F.rows, dtype=np.float64)
    if "center" not in flags:
        X = X - X.mean(axis=0, keepdims=True)
        flags.append("center")
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] < 1e-12)
    if len(bad):
        raise DegenerateRow(f"row {int(bad[0])} is zero after centering")
    X = X / norms
    if "unit_norm" not in flags:
        flags.append("unit_norm")
    return F.with_rows(X, preprocessing=flags)


def _unit(X: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(n == 0, 1.0, n)


def row_cosines(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.sum(_unit(A) * _unit(B), axis=1)


@dataclass
class PairDictionary:
    pairs: np.ndarray
    construction: str = "given"

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(self.pairs[:, 0])) != len(self.pairs):
            raise ValueError("duplicate source index in dictionary")

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def identity(cls, n: int) -> "PairDictionary":
        idx = np.arange(n)
        return cls(np.stack([idx, idx], axis=1), "given")

    def check_bounds(self, n_src: int, n_tgt: int) -> None:
        if len(self.pairs) and (
            self.pairs.min() < 0 or self.pairs[:, 0].max() >= n_src or self.pairs[:, 1].max() >= n_tgt
        ):
            raise IndexError("dictionary index out of range")


@dataclass
class AlignmentMap:
    W: np.ndarray
    mode: str = "supervised"
    refinement_iters: int = 0
    adversarial_iters: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def h(self) -> int:
        return self.W.shape[0]

    def apply(self, X) -> np.ndarray:
        rows = X.rows if isinstance(X, FeatureMatrix) else X
        return np.asarray(rows, dtype=np.float64) @ self.W

    def orthogonality_error(self) -> float:
        return float(np.abs(self.W.T @ self.W - np.eye(self.h)).max())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        prov = json.dumps(self.provenance, sort_keys=True).encode()
        mode = self.mode.encode()
        with open(path, "wb") as fh:
            fh.write(ALIGNMENT_MAGIC)
            fh.write(struct.pack("<I", self.h))
            fh.write(struct.pack("<B", len(mode)))
            fh.write(mode)
            fh.write(struct.pack("<II", self.refinement_iters, self.adversarial_iters))
            fh.write(np.ascontiguousarray(self.W, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", len(prov)))
            fh.write(prov)
        return path

    @classmethod
    def load(cls, path) -> "AlignmentMap":
        data = Path(path).read_bytes()
        if not data.startswith(ALIGNMENT_MAGIC):
            raise ValueError("not an alignment file (bad magic)")
        pos = len(ALIGNMENT_MAGIC)
        (h,) = struct.unpack_from("<I", data, pos)
        pos += 4
        (mlen,) = struct.unpack_from("<B", data, pos)
        pos += 1
        mode = data[pos : pos + mlen].decode()
        pos += mlen
        r, k = struct.unpack_from("<II", data, pos)
        pos += 8
        W = np.frombuffer(data, "<f4", h * h, pos).reshape(h, h).astype(np.float64)
        pos += 4 * h * h
        (plen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        prov = json.loads(data[pos : pos + plen])
        return cls(W, mode, r, k, prov)


@dataclass
class SimilarityReport:
    mean_cosine: float
    per_pair: np.ndarray
    baseline_mean_cosine: float

    @property
    def pair_count(self) -> int:
        return len(self.per_pair)

    def to_record(self) -> dict:
        return {
            "mean_cosine": round(float(self.mean_cosine), 6),
            "baseline_mean_cosine": round(float(self.baseline_mean_cosine), 6),
            "pairs": self.pair_count,
        }

    def to_line(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.to_record().items())


def _rows(F) -> np.ndarray:
    return np.asarray(F.rows if isinstance(F, FeatureMatrix) else F, dtype=np.float64)


def orthogonal_projection(M: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix to ``M`` in Frobenius norm."""
    U, _, Vt = np.linalg.svd(M)
    return U @ Vt


def procrustes_fit(F1, F2, pairs: Optional[PairDictionary] = None) -> AlignmentMap:
    """Orthogonal ``W`` minimising ``sum ||F1[s] @ W - F2[t]||^2`` over the pairs.

    With ``U S V^T`` the SVD of ``F1[src]^T F2[tgt]`` the minimiser is ``U V^T``.
    """
    A, B = _rows(F1), _rows(F2)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature widths differ: {A.shape[1]} vs {B.shape[1]}")
    if pairs is None:
        if len(A) != len(B):
            raise ValueError("unpaired matrices need an explicit dictionary")
        pairs = PairDictionary.identity(len(A))
    pairs.check_bounds(len(A), len(B))
    if len(pairs) == 0:
        raise RankError("no pairs to fit")
    h = A.shape[1]
    if len(pairs) < h:
        warnings.warn(f"only {len(pairs)} pairs for a {h}-dimensional fit", stacklevel=2)
    M = A[pairs.pairs[:, 0]].T @ B[pairs.pairs[:, 1]]
    if not np.any(M) or not np.isfinite(M).all():
        raise RankError("cross-covariance is zero or non-finite")
    W = orthogonal_projection(M)
    return AlignmentMap(W, "supervised", 1, 0, {"pairs": len(pairs)})


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(n, lo + size)


def _knn_mean(Q: np.ndarray, K: np.ndarray, k: int, chunk: int) -> np.ndarray:
    k = min(k, len(K))
    out = np.zeros(len(Q))
    if k == 0:
        return out
    for lo, hi in _chunks(len(Q), chunk):
        S = Q[lo:hi] @ K.T
        top = np.partition(S, -k, axis=1)[:, -k:]
        out[lo:hi] = top.mean(axis=1)
    return out


def csls_neighbours(X: np.ndarray, Y: np.ndarray, k: int = 10, chunk: int = 1024):
    """For every row of ``X`` its best ``Y`` row under CSLS, and vice versa.

    ``csls(x, y) = 2 cos(x, y) - r_Y(x) - r_X(y)`` where ``r_Y(x)`` averages the
    cosines of ``x`` to its ``k`` nearest rows of ``Y``.  Ties go to the lowest
    index.
    """
    X, Y = _unit(np.asarray(X, np.float64)), _unit(np.asarray(Y, np.float64))
    r_x = _knn_mean(X, Y, k, chunk)
    r_y = _knn_mean(Y, X, k, chunk)
    best_y = np.empty(len(X), dtype=np.int64)
    best_x_val = np.full(len(Y), -np.inf)
    best_x = np.zeros(len(Y), dtype=np.int64)
    for lo, hi in _chunks(len(X), chunk):
        S = 2.0 * (X[lo:hi] @ Y.T)
        best_y[lo:hi] = np.argmax(S - r_y[None, :], axis=1)
        T = S - r_x[lo:hi, None]
        col = np.argmax(T, axis=0)
        val = T[col, np.arange(len(Y))]
        better = val > best_x_val  # strict: earlier chunk keeps ties
        best_x_val[better] = val[better]
        best_x[better] = col[better] + lo
    return best_y, best_x


def build_dictionary(F1_mapped, F2, k: int = 10, max_rows: Optional[int] = None) -> PairDictionary:
    """Mutual CSLS nearest neighbours between mapped source rows and target rows.

    ``max_rows`` caps each side to an evenly strided subset before matching;
    returned indices always refer to the full matrices.
    """
    X, Y = _rows(F1_mapped), _rows(F2)
    sx = _stride(len(X), max_rows)
    sy = _stride(len(Y), max_rows)
    best_y, best_x = csls_neighbours(X[sx], Y[sy], k)
    src = np.arange(len(sx))
    mutual = best_x[best_y] == src
    pairs = np.stack([sx[src[mutual]], sy[best_y[mutual]]], axis=1)
    if len(pairs) == 0:
        raise EmptyDictionary("no mutual nearest neighbours; alignment has collapsed")
    return PairDictionary(pairs, "csls_mutual_nn")


def _stride(n: int, cap: Optional[int]) -> np.ndarray:
    if cap is None or n <= cap:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, cap).round().astype(np.int64))


def similarity(W: np.ndarray, S1, S2) -> SimilarityReport:
    """Mean cosine between mapped source rows and their paired target rows."""
    A, B = _rows(S1), _rows(S2)
    per = row_cosines(A @ W, B)
    base = float(row_cosines(A, B).mean()) if A.shape[1] == B.shape[1] else float("nan")
    return SimilarityReport(float(per.mean()), per, base)


def _holdout_split(F1: FeatureMatrix, F2: FeatureMatrix, holdout: float):
    """Row-aligned (fit1, fit2, score1, score2) with the last games held out."""
    i1, i2 = pair_rows(F1, F2)
    A, B = F1.select(i1), F2.select(i2)
    games = np.unique(A.games)
    n_hold = max(1, int(math.ceil(holdout * len(games))))
    if n_hold >= len(games):
        raise AlignConfigError("not enough games to hold out a scoring set")
    held = np.isin(A.games, games[-n_hold:])
    return A.select(~held), B.select(~held), A.select(held), B.select(held)


def _prepare(F1, F2, score, holdout, do_preprocess):
    F1 = F1 if isinstance(F1, FeatureMatrix) else FeatureMatrix.from_array(F1)
    F2 = F2 if isinstance(F2, FeatureMatrix) else FeatureMatrix.from_array(F2)
    if do_preprocess:
        F1, F2 = preprocess(F1), preprocess(F2)
    if score is None:
        return _holdout_split(F1, F2, holdout)
    S1, S2 = (s if isinstance(s, FeatureMatrix) else FeatureMatrix.from_array(s) for s in score)
    if do_preprocess:
        S1, S2 = preprocess(S1), preprocess(S2)
    i1, i2 = pair_rows(F1, F2)
    j1, j2 = pair_rows(S1, S2)
    overlap = set(F1.select(i1).keys()) & set(S1.select(j1).keys())
    if overlap:
        raise AlignConfigError(f"{len(overlap)} scoring rows also appear in the fitting rows")
    return F1.select(i1), F2.select(i2), S1.select(j1), S2.select(j2)


def refine(W: np.ndarray, X: np.ndarray, Y: np.ndarray, iters: int, k: int = 10, max_rows: Optional[int] = 10_000):
    """Alternate CSLS dictionary building and Procrustes refits, starting from ``W``."""
    for it in range(iters):
        try:
            pairs = build_dictionary(X @ W, Y, k=k, max_rows=max_rows)
            W = procrustes_fit(X, Y, pairs).W
        except (RankError, EmptyDictionary) as exc:
            raise type(exc)(f"refinement iteration {it + 1}: {exc}") from exc
        log.debug("refine %d: %d pairs", it + 1, len(pairs))
    return W


def align_supervised(
    F1,
    F2,
    r: int = 1,
    *,
    score: Optional[tuple] = None,
    holdout: float = 0.2,
    csls_k: int = 10,
    max_rows: Optional[int] = 10_000,
    do_preprocess: bool = True,
) -> tuple[AlignmentMap, SimilarityReport]:
    """Procrustes on (game, step) pairs, then ``r - 1`` dictionary refinement rounds.

    Scoring uses ``score=(S1, S2)`` when given, otherwise the last ``holdout``
    fraction of games; those rows never enter fitting.
    """
    if r < 1:
        raise AlignConfigError("r must be >= 1")
    A, B, S1, S2 = _prepare(F1, F2, score, holdout, do_preprocess)
    X, Y = _rows(A), _rows(B)
    try:
        W = procrustes_fit(X, Y).W
    except RankError as exc:
        raise RankError(f"iteration 1: {exc}") from exc
    W = refine(W, X, Y, r - 1, csls_k, max_rows)
    report = similarity(W, S1, S2)
    amap = AlignmentMap(W, "supervised", r, 0, _provenance(F1, F2, len(X), report))
    return amap, report


def _provenance(F1, F2, fit_rows: int, report: SimilarityReport) -> dict:
    m1 = F1.meta if isinstance(F1, FeatureMatrix) else {}
    m2 = F2.meta if isinstance(F2, FeatureMatrix) else {}
    return {
        "source": {"model": m1.get("model_id", ""), "layer": m1.get("layer")},
        "target": {"model": m2.get("model_id", ""), "layer": m2.get("layer")},
        "preprocessing": ["center", "unit_norm"],
        "fit_rows": fit_rows,
        "score_rows": report.pair_count,
    }


class Discriminator(nn.Module):
    """Two hidden leaky-ReLU layers; outputs P(row is a mapped source row)."""

    def __init__(self, dim: int, hidden: int = 128, input_dropout: float = 0.1, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Dropout(input_dropout),
            nn.Linear(dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )
        with torch.no_grad():
            for m in self.net:
                if isinstance(m, nn.Linear):
                    bound = 1.0 / math.sqrt(m.in_features)
                    m.weight.copy_(torch.rand(m.weight.shape, generator=g) * 2 * bound - bound)
                    m.bias.copy_(torch.rand(m.bias.shape, generator=g) * 2 * bound - bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x)).squeeze(-1)


@dataclass
class AdversarialConfig:
    iterations: int = 3000
    batch_size: int = 128
    dis_lr: float = 0.1
    map_lr: float = 0.1
    dis_hidden: int = 128
    smoothing: float = 0.1
    collapse_accuracy: float = 0.999
    collapse_patience: int = 500
    seed: int = 0


def random_orthogonal(h: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((h, h)))
    return Q * np.sign(np.diag(R))


def adversarial_map(X: np.ndarray, Y: np.ndarray, cfg: AdversarialConfig) -> np.ndarray:
    """Learn an orthogonal ``W`` so that ``X @ W`` is indistinguishable from ``Y``.

    Discriminator and mapping steps alternate 1:1; after every mapping step
    ``W`` is projected back onto the orthogonal group.
    """
    h = X.shape[1]
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    W = torch.tensor(random_orthogonal(h, rng), dtype=torch.float32, requires_grad=True)
    disc = Discriminator(h, cfg.dis_hidden, seed=cfg.seed)
    d_opt = torch.optim.SGD(disc.parameters(), lr=cfg.dis_lr)
    m_opt = torch.optim.SGD([W], lr=cfg.map_lr)
    Xt, Yt = torch.tensor(X, dtype=torch.float32), torch.tensor(Y, dtype=torch.float32)
    bs = cfg.batch_size
    labels = torch.cat([torch.full((bs,), 1.0 - cfg.smoothing), torch.full((bs,), cfg.smoothing)])
    bce = nn.BCELoss()
    streak = 0
    for it in range(cfg.iterations):
        xi = torch.from_numpy(rng.integers(0, len(X), bs))
        yi = torch.from_numpy(rng.integers(0, len(Y), bs))
        # discriminator step
        disc.train()
        with torch.no_grad():
            batch = torch.cat([Xt[xi] @ W, Yt[yi]])
        pred = disc(batch)
        loss = bce(pred, labels)
        d_opt.zero_grad()
        loss.backward()
        d_opt.step()
        with torch.no_grad():
            acc = float(((pred > 0.5) == (labels > 0.5)).float().mean())
        streak = streak + 1 if acc >= cfg.collapse_accuracy else 0
        if streak >= cfg.collapse_patience:
            raise CollapseError(f"discriminator accuracy >= {cfg.collapse_accuracy} for {streak} iterations")
        # mapping step with flipped labels
        disc.eval()
        xi = torch.from_numpy(rng.integers(0, len(X), bs))
        yi = torch.from_numpy(rng.integers(0, len(Y), bs))
        pred = disc(torch.cat([Xt[xi] @ W, Yt[yi]]))
        loss = bce(pred, 1.0 - labels)
        m_opt.zero_grad()
        loss.backward()
        m_opt.step()
        with torch.no_grad():
            W.copy_(torch.from_numpy(orthogonal_projection(W.detach().double().numpy())).float())
    return W.detach().double().numpy()


def moment_init(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Orthogonal guess from second and third moments alone.

    Principal axes of each cloud are matched by eigenvalue rank; the sign of
    each axis is fixed by the skewness of the projections.  Exact when ``Y``
    is a rotation of ``X`` with distinct covariance eigenvalues.
    """
    def axes(Z):
        vals, vecs = np.linalg.eigh(Z.T @ Z / len(Z))
        vecs = vecs[:, ::-1]
        skew = np.mean((Z @ vecs) ** 3, axis=0)
        return vecs * np.where(skew < 0, -1.0, 1.0)

    return axes(X) @ axes(Y).T


def similarity_signatures(Z: np.ndarray, reference: int = 3000, levels: int = 64) -> np.ndarray:
    """Rotation-invariant description of every row of ``Z``.

    Row ``i`` becomes the quantiles of its cosines to a strided reference
    subset of ``Z`` itself.  Rows that play the same role in two isometric
    clouds get similar signatures without any cross-space information.
    """
    Z = _unit(Z)
    ref = Z[_stride(len(Z), reference)]
    sig = np.empty((len(Z), levels))
    qs = np.linspace(0.0, 1.0, levels)
    for lo, hi in _chunks(len(Z), 1024):
        sig[lo:hi] = np.quantile(Z[lo:hi] @ ref.T, qs, axis=1).T
    return sig - sig.mean(axis=0)


def signature_init(X: np.ndarray, Y: np.ndarray, k: int = 10, max_rows: int = 6000) -> np.ndarray:
    """Seed dictionary from matching similarity signatures, then one Procrustes fit."""
    sx, sy = _stride(len(X), max_rows), _stride(len(Y), max_rows)
    pairs = build_dictionary(similarity_signatures(X[sx]), similarity_signatures(Y[sy]), k=k)
    return procrustes_fit(X[sx], Y[sy], pairs).W


def spectral_signatures(Z: np.ndarray) -> np.ndarray:
    """Rows of the square root of ``Z Z^T``, each sorted in decreasing order.

    Invariant to rotations of ``Z``; a row permutation only permutes the output
    rows (up to ties), so rows from two isometric clouds can be compared directly.
    """
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    M = np.sort((U * s) @ U.T, axis=1)[:, ::-1]
    return _unit(M - M.mean(axis=0))


def _repeated_rows(Z: np.ndarray, decimals: int) -> tuple[np.ndarray, np.ndarray]:
    _, first, counts = np.unique(np.round(Z, decimals), axis=0, return_index=True, return_counts=True)
    keep = counts >= 2
    return Z[first[keep]], counts[keep]


def multiplicity_init(X: np.ndarray, Y: np.ndarray, decimals: int = 4, iters: int = 10) -> np.ndarray:
    """Orthogonal guess from rows that repeat.

    A model maps identical prefixes to identical rows, so a position reached in
    ``c`` games shows up ``c`` times.  When both matrices come from the same
    games the repeat counts agree across models with no pairing needed.  Rows
    whose count is shared by no other row anchor a first Procrustes fit;
    mutual nearest neighbours inside each count group then refine it.
    """
    A, ca = _repeated_rows(X, decimals)
    B, cb = _repeated_rows(Y, decimals)
    values, sizes = np.unique(ca, return_counts=True)
    singles = [v for v, n in zip(values, sizes) if n == 1 and np.count_nonzero(cb == v) == 1]
    if len(singles) < 2:
        raise EmptyDictionary("too few rows with a distinctive repeat count")
    src = np.array([np.flatnonzero(ca == v)[0] for v in singles])
    tgt = np.array([np.flatnonzero(cb == v)[0] for v in singles])
    W = orthogonal_projection(A[src].T @ B[tgt])
    for _ in range(iters):
        pairs = []
        for v in values:
            ga, gb = np.flatnonzero(ca == v), np.flatnonzero(cb == v)
            if len(gb) == 0:
                continue
            S = (A[ga] @ W) @ B[gb].T
            fwd, bwd = S.argmax(axis=1), S.argmax(axis=0)
            mutual = bwd[fwd] == np.arange(len(ga))
            pairs.append(np.stack([ga[mutual], gb[fwd[mutual]]], axis=1))
        pairs = np.concatenate(pairs)
        W_next = orthogonal_projection(A[pairs[:, 0]].T @ B[pairs[:, 1]])
        if np.allclose(W_next, W):
            break
        W = W_next
    return W


def self_learning(
    X: np.ndarray,
    Y: np.ndarray,
    rows: int = 2000,
    restarts: int = 8,
    keep: float = 0.1,
    patience: int = 15,
    k: int = 10,
    seed: int = 0,
    max_rounds: int = 2000,
) -> np.ndarray:
    """Unsupervised ``W`` from spectral signatures plus stochastic dictionary induction.

    Works on the first ``rows`` rows of each side, so shuffle beforehand.
    Every round builds a two-way CSLS dictionary from the current similarity
    matrix with each entry kept only with probability ``keep``, then refits
    Procrustes.  ``keep`` doubles whenever the objective (mean best CSLS) has
    not improved for ``patience`` rounds.  A run either locks onto the shared
    structure or settles in a clearly worse optimum, so ``restarts`` seeds are
    tried and the run with the highest final objective wins.
    """
    if not 0 < keep <= 1:
        raise AlignConfigError("keep must be in (0, 1]")
    if restarts < 1:
        raise AlignConfigError("restarts must be >= 1")
    n = min(rows, len(X), len(Y))
    if n <= k:
        raise EmptyDictionary(f"self-learning needs more than k={k} rows per side")
    Xs, Ys = X[:n], Y[:n]
    S0 = spectral_signatures(Xs) @ spectral_signatures(Ys).T
    idx = np.arange(n)
    best_W, best_obj = None, -np.inf
    for j in range(restarts):
        rng = np.random.default_rng(seed + j)
        S, W, p = S0, None, keep
        top, stall = -np.inf, 0
        for _ in range(max_rounds):
            if W is not None:
                S = (Xs @ W) @ Ys.T
            r_x = np.partition(S, -k, axis=1)[:, -k:].mean(axis=1)
            r_y = np.partition(S, -k, axis=0)[-k:].mean(axis=0)
            C = 2 * S - r_x[:, None] - r_y[None, :]
            objective = float(C.max(axis=1).mean())
            if p < 1:
                C[rng.random(C.shape) >= p] = -np.inf
            fwd, bwd = np.argmax(C, axis=1), np.argmax(C, axis=0)
            W = orthogonal_projection(Xs[np.concatenate([idx, bwd])].T @ Ys[np.concatenate([fwd, idx])])
            if objective > top + 1e-6:
                top, stall = objective, 0
            else:
                stall += 1
            if stall >= patience:
                if p >= 1:
                    break
                p, top, stall = min(1.0, 2 * p), -np.inf, 0
        log.debug("self-learning seed %d: objective %.4f", seed + j, objective)
        if objective > best_obj:
            best_W, best_obj = W, objective
    return best_W


def gromov_init(X: np.ndarray, Y: np.ndarray, rows: int = 1500, epsilon: float = 5e-3, seed: int = 0) -> np.ndarray:
    """Orthogonal guess from an entropic Gromov-Wasserstein coupling.

    Random subsets of ``rows`` points per side are coupled so that their
    intra-cloud cosine distances agree; Procrustes on the coupling gives ``W``.
    """
    # keep POT from importing every array backend it can find
    for name in ("TENSORFLOW", "JAX", "CUPY", "PYTORCH"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{name}", "1")
    import ot

    rng = np.random.default_rng(seed)
    Xs = _unit(X[rng.choice(len(X), min(rows, len(X)), replace=False)])
    Ys = _unit(Y[rng.choice(len(Y), min(rows, len(Y)), replace=False)])
    p, q = ot.unif(len(Xs)), ot.unif(len(Ys))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        T = ot.gromov.entropic_gromov_wasserstein(1 - Xs @ Xs.T, 1 - Ys @ Ys.T, p, q, "square_loss", epsilon=epsilon)
    M = Xs.T @ T @ Ys
    if not np.isfinite(M).all() or not np.any(M):
        raise RankError("Gromov-Wasserstein coupling is degenerate")
    return orthogonal_projection(M)


def unsupervised_score(W: np.ndarray, X: np.ndarray, Y: np.ndarray, k: int = 10, max_rows: int = 5_000) -> float:
    """Model-selection criterion that needs no pairing.

    Mean cosine between each mapped source row and its CSLS nearest target.
    """
    sx, sy = _stride(len(X), max_rows), _stride(len(Y), max_rows)
    Xm, Yt = _unit(X[sx] @ W), _unit(Y[sy])
    best_y, _ = csls_neighbours(Xm, Yt, k)
    return float(np.einsum("ij,ij->i", Xm, Yt[best_y]).mean())


def align_unsupervised(
    F1,
    F2,
    k: int = 3000,
    r: int = 5,
    *,
    score: Optional[tuple] = None,
    holdout: float = 0.2,
    adversarial: Optional[AdversarialConfig] = None,
    restarts: int = 1,
    use_moments: bool = True,
    use_signatures: bool = True,
    use_multiplicity: bool = True,
    self_learning_restarts: int = 0,
    self_learning_rows: int = 2000,
    gw_restarts: int = 0,
    stop_at: float = 0.99,
    gw_rows: int = 1500,
    gw_epsilon: float = 5e-3,
    csls_k: int = 10,
    max_rows: Optional[int] = 10_000,
    do_preprocess: bool = True,
) -> tuple[AlignmentMap, SimilarityReport]:
    """Adversarial initialisation of ``W`` followed by ``r`` refinement rounds.

    A single adversarial run often stalls in a poor local optimum, so several
    starts are tried, cheapest first: the moment-matching guess, the
    repeated-row anchors of :func:`multiplicity_init`, the similarity-signature
    dictionary and ``restarts`` adversarial seeds.  Two slower searches are
    opt-in: ``self_learning_restarts`` seeds of :func:`self_learning` and
    ``gw_restarts`` Gromov-Wasserstein couplings.  Every start is refined and the winner is chosen by
    :func:`unsupervised_score`; the search ends early once a start scores at
    least ``stop_at``.  The (game, step) pairing is used only to pick and
    score the held-out rows.
    """
    if k < 1:
        raise AlignConfigError("k (adversarial iterations) must be >= 1")
    if r < 0:
        raise AlignConfigError("r must be >= 0")
    if min(restarts, gw_restarts, self_learning_restarts) < 0 or not (
        restarts + gw_restarts + self_learning_restarts or use_moments or use_signatures or use_multiplicity
    ):
        raise AlignConfigError("need at least one starting point")
    cfg = adversarial or AdversarialConfig()
    A, B, S1, S2 = _prepare(F1, F2, score, holdout, do_preprocess)
    X, Y = _rows(A), _rows(B)
    # independent shuffles so the two sides share no row order
    rng = np.random.default_rng(cfg.seed + 1)
    X, Y = X[rng.permutation(len(X))], Y[rng.permutation(len(Y))]

    starts = []
    if use_moments:
        starts.append(("moments", lambda: moment_init(X, Y)))
    if use_multiplicity:
        starts.append(("multiplicity", lambda: multiplicity_init(X, Y)))
    if use_signatures:
        starts.append(("signatures", lambda: signature_init(X, Y, csls_k)))
    for j in range(restarts):
        run = AdversarialConfig(**{**cfg.__dict__, "iterations": k, "seed": cfg.seed + j})
        starts.append((f"adversarial-{run.seed}", lambda run=run: adversarial_map(X, Y, run)))
    if self_learning_restarts:
        starts.append(("self-learning", lambda: self_learning(X, Y, self_learning_rows, self_learning_restarts, k=csls_k, seed=cfg.seed)))
    for j in range(gw_restarts):
        starts.append((f"gromov-{cfg.seed + j}", lambda j=j: gromov_init(X, Y, gw_rows, gw_epsilon, cfg.seed + j)))

    best, candidates, failures = None, {}, {}
    for name, make in starts:
        try:
            W = refine(make(), X, Y, r, csls_k, max_rows)
        except (CollapseError, EmptyDictionary, RankError) as exc:
            failures[name] = str(exc)
            continue
        candidates[name] = unsupervised_score(W, X, Y, csls_k)
        log.debug("start %s: criterion %.4f", name, candidates[name])
        if best is None or candidates[name] > candidates[best[0]]:
            best = (name, W)
        if candidates[name] >= stop_at:
            break  # nothing left to gain
    if best is None:
        raise CollapseError(f"every starting point failed: {failures}")
    report = similarity(best[1], S1, S2)
    prov = _provenance(F1, F2, len(X), report)
    prov.update(start=best[0], criterion=candidates, failed_starts=failures)
    return AlignmentMap(best[1], "unsupervised", r, k, prov), report


def align(F1, F2, mode: str = "supervised", **kw):
    if mode == "supervised":
        return align_supervised(F1, F2, **kw)
    if mode == "unsupervised":
        return align_unsupervised(F1, F2, **kw)
    raise AlignConfigError(f"unknown alignment mode {mode!r}")


@dataclass
class HeatmapGrid:
    values: np.ndarray
    row_labels: list[str]
    col_labels: list[str]
    mode: str = "supervised"
    errors: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def rank_of(self, i: int, j: int) -> int:
        """1-based rank of cell (i, j) among finite cells, highest value first."""
        flat = self.values[np.isfinite(self.values)]
        return int((flat > self.values[i, j]).sum()) + 1

    def to_text(self) -> str:
        lines = [f"# mode={self.mode} rows=source_layer cols=target_layer"]
        lines.append("\t".join(["layer", *self.col_labels]))
        for label, row in zip(self.row_labels, self.values):
            lines.append("\t".join([label, *("nan" if not np.isfinite(v) else f"{v:.6f}" for v in row)]))
        return "\n".join(lines) + "\n"

    def to_svg(self, cell: int = 48) -> str:
        rows, cols = self.values.shape
        left, top = 70, 30
        width, height = left + cols * cell + 10, top + rows * cell + 40
        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<title>layer similarity ({self.mode})</title>',
        ]
        for i in range(rows):
            for j in range(cols):
                v = self.values[i, j]
                if np.isfinite(v):
                    t = min(max(v, 0.0), 1.0)
                    shade = int(round(255 * (1 - t)))
                    fill = f"rgb({shade},{shade},255)"
                    text = f"{v:.2f}"
                else:
                    fill, text = "rgb(200,200,200)", "n/a"
                x, y = left + j * cell, top + i * cell
                out.append(
                    f'<rect id="cell-{i}-{j}" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                    f'fill="{fill}" stroke="black" stroke-width="0.5"/>'
                )
                out.append(
                    f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" font-size="11" '
                    f'text-anchor="middle">{text}</text>'
                )
        for i, label in enumerate(self.row_labels):
            out.append(f'<text x="{left - 6}" y="{top + i * cell + cell // 2 + 4}" font-size="11" text-anchor="end">{label}</text>')
        for j, label in enumerate(self.col_labels):
            out.append(
                f'<text x="{left + j * cell + cell // 2}" y="{top + rows * cell + 16}" font-size="11" '
                f'text-anchor="middle">{label}</text>'
            )
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, text_path, svg_path=None) -> None:
        Path(text_path).parent.mkdir(parents=True, exist_ok=True)
        Path(text_path).write_text(self.to_text())
        if svg_path is not None:
            Path(svg_path).write_text(self.to_svg())


def layer_similarity_matrix(
    features_a: Sequence[FeatureMatrix],
    features_b: Sequence[FeatureMatrix],
    mode: str = "supervised",
    score_a: Optional[Sequence[FeatureMatrix]] = None,
    score_b: Optional[Sequence[FeatureMatrix]] = None,
    **align_kw,
) -> HeatmapGrid:
    """Similarity after aligning every layer of A with every layer of B.

    Failing cells are stored as NaN with the exception text in ``errors``.
    """
    la, lb = len(features_a), len(features_b)
    if la < 2 or lb < 2:
        raise ValueError("both models need at least two decoder layers")
    grid = np.full((la, lb), np.nan)
    errors = {}
    for i in range(la):
        for j in range(lb):
            kw = dict(align_kw)
            if score_a is not None and score_b is not None:
                kw["score"] = (score_a[i], score_b[j])
            try:
                _, rep = align(features_a[i], features_b[j], mode, **kw)
                grid[i, j] = rep.mean_cosine
            except Exception as exc:  # noqa: BLE001 - recorded in-grid
                errors[(i, j)] = repr(exc)
                log.warning("heatmap cell (%d, %d) failed: %s", i, j, exc)
    return HeatmapGrid(grid, [f"A{i}" for i in range(la)], [f"B{j}" for j in range(lb)], mode, errors)


def checkpoint_layer_features(ckpt, games, layers: Optional[Sequence[int]] = None) -> list[FeatureMatrix]:
    from .features import extract_features

    layers = range(ckpt.config.layers) if layers is None else layers
    return [extract_features(ckpt, games, l) for l in layers]


def layer_similarity_from_checkpoints(model_a, model_b, fit_games, score_games, mode="supervised", **kw) -> HeatmapGrid:
    fa = checkpoint_layer_features(model_a, fit_games)
    fb = checkpoint_layer_features(model_b, fit_games)
    sa = checkpoint_layer_features(model_a, score_games)
    sb = checkpoint_layer_features(model_b, score_games)
    _offset_games(sa, fa)
    _offset_games(sb, fb)
    return layer_similarity_matrix(fa, fb, mode, sa, sb, **kw)


def _offset_games(score: Sequence[FeatureMatrix], fit: Sequence[FeatureMatrix]) -> None:
    # score games are a different game list; shift their ids past the fit ids
    shift = int(max(f.games.max() for f in fit)) + 1
    for s in score:
        s.games = s.games + shift

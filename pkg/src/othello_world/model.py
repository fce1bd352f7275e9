"""Small from-scratch transformers over Othello move tokens.

Token ids 0..59 are the playable tiles in engine order, 60 is BOS and 61 is
PAD.  A decoder-only model reads ``[BOS, x1, ..., x_{n-1}]`` and predicts
``x1..xn``.  The encoder-decoder variant feeds ``[BOS, x1]`` to the encoder
and lets the decoder produce ``x2..xn`` from ``[BOS, x2, ...]``; the opening
move is predicted from a ``[BOS]``-only encoder input.

Next-move logits are always restricted to the 60 move tokens.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import NUM_TILES, Dataset, GameRecord

log = logging.getLogger(__name__)

BOS = 60
PAD = 61
VOCAB_SIZE = 62

CHECKPOINT_MAGIC = b"OWCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class LengthError(ValueError):
    pass


class LayerError(IndexError):
    pass


class Tokenizer:
    """The fixed 62-symbol vocabulary: 60 tiles, BOS and PAD."""

    vocab_size = VOCAB_SIZE
    bos = BOS
    pad = PAD

    def encode(self, tokens: Sequence[int]) -> list[int]:
        for t in tokens:
            if not 0 <= t < VOCAB_SIZE:
                raise ValueError(f"token id {t} outside vocabulary")
        return list(tokens)

    def decode(self, ids: Sequence[int]) -> list[int]:
        return self.encode(ids)

    def encode_game(self, record: GameRecord) -> list[int]:
        return encode_game(record)

    @staticmethod
    def symbol(token: int) -> str:
        from .engine import TILE_LABELS

        if token == BOS:
            return "<bos>"
        if token == PAD:
            return "<pad>"
        return TILE_LABELS[token]


def encode_game(record: GameRecord | Sequence[int]) -> list[int]:
    moves = record.moves if isinstance(record, GameRecord) else record
    return [BOS, *moves]


@dataclass
class ModelConfig:
    architecture: str = "decoder_only"
    layers: int = 4
    hidden_dim: int = 128
    heads: int = 4
    max_seq_len: int = 64
    dropout: float = 0.0
    seed: int = 0
    encoder_layers: int = 2
    mlp_ratio: int = 4
    tie_embeddings: bool = True

    @classmethod
    def encoder_decoder(cls, **kw) -> "ModelConfig":
        kw.setdefault("layers", 2)
        kw.setdefault("encoder_layers", 2)
        return cls(architecture="encoder_decoder", **kw)

    def validate(self) -> "ModelConfig":
        if self.architecture not in ("decoder_only", "encoder_decoder"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.layers < 1 or self.hidden_dim < 1 or self.heads < 1:
            raise ConfigError("layers, hidden_dim and heads must be positive")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide hidden_dim={self.hidden_dim}")
        if self.max_seq_len < NUM_TILES + 1:
            raise ConfigError("max_seq_len must be at least 61")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.architecture == "encoder_decoder" and self.encoder_layers < 1:
            raise ConfigError("encoder_decoder needs encoder_layers >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 2000
    weight_decay: float = 0.01
    gradient_clip_norm: float = 1.0
    eval_interval: int = 100
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        return x.view(b, t, self.heads, d // self.heads).transpose(1, 2)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        b, h, t, d = x.shape
        return x.transpose(1, 2).reshape(b, t, h * d)

    def forward(self, x, memory=None, causal=False):
        src = x if memory is None else memory
        q, k, v = self.split(self.q(x)), self.split(self.k(src)), self.split(self.v(src))
        out = F.scaled_dot_product_attention(
            q, k, v, is_causal=causal, dropout_p=self.dropout if self.training else 0.0
        )
        return self.proj(self.merge(out))


class Block(nn.Module):
    """Pre-norm transformer block; ``cross=True`` adds encoder-decoder attention."""

    def __init__(self, cfg: ModelConfig, cross: bool = False):
        super().__init__()
        d = cfg.hidden_dim
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.heads, cfg.dropout)
        self.ln_cross = nn.LayerNorm(d) if cross else None
        self.cross = Attention(d, cfg.heads, cfg.dropout) if cross else None
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_ratio * d),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * d, d),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, causal=True, memory=None):
        x = x + self.drop(self.attn(self.ln1(x), causal=causal))
        if self.cross is not None:
            x = x + self.drop(self.cross(self.ln_cross(x), memory=memory))
        return x + self.drop(self.mlp(self.ln2(x)))


class MoveTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.tok_emb = nn.Embedding(VOCAB_SIZE, d)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, d)
        self.drop = nn.Dropout(cfg.dropout)
        enc_dec = cfg.architecture == "encoder_decoder"
        if enc_dec:
            self.encoder = nn.ModuleList(Block(cfg) for _ in range(cfg.encoder_layers))
            self.ln_enc = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(Block(cfg, cross=enc_dec) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = None if cfg.tie_embeddings else nn.Linear(d, NUM_TILES, bias=False)
        self._init_weights()

    def _init_weights(self):
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                nn.init.normal_(p, mean=0.0, std=0.02)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
        # residual projections scaled down with depth (GPT-2 style)
        scale = 0.02 / math.sqrt(2 * self.cfg.layers)
        for name, p in self.named_parameters():
            if name.endswith("attn.proj.weight") or name.endswith("mlp.2.weight"):
                nn.init.normal_(p, mean=0.0, std=scale)

    @property
    def is_encoder_decoder(self) -> bool:
        return self.cfg.architecture == "encoder_decoder"

    def embed(self, tokens: torch.Tensor, offset: int = 0) -> torch.Tensor:
        pos = torch.arange(offset, offset + tokens.shape[1], device=tokens.device)
        return self.drop(self.tok_emb(tokens) + self.pos_emb(pos))

    def encode(self, enc_tokens: torch.Tensor) -> torch.Tensor:
        x = self.embed(enc_tokens)
        for block in self.encoder:
            x = block(x, causal=False)
        return self.ln_enc(x)

    def hidden_states(self, tokens, enc_tokens=None) -> list[torch.Tensor]:
        """Residual stream after every decoder block, each (B, T, hidden_dim)."""
        memory = None
        if self.is_encoder_decoder:
            if enc_tokens is None:
                raise ValueError("encoder-decoder model needs encoder tokens")
            memory = self.encode(enc_tokens)
        x = self.embed(tokens)
        out = []
        for block in self.blocks:
            x = block(x, causal=True, memory=memory)
            out.append(x)
        return out

    def logits_from_hidden(self, h: torch.Tensor) -> torch.Tensor:
        h = self.ln_f(h)
        if self.head is None:
            return h @ self.tok_emb.weight[:NUM_TILES].T
        return self.head(h)

    def forward(self, tokens, enc_tokens=None) -> torch.Tensor:
        """Move logits (B, T, 60) at every position."""
        return self.logits_from_hidden(self.hidden_states(tokens, enc_tokens)[-1])

    def tile_embeddings(self) -> torch.Tensor:
        return self.tok_emb.weight[:NUM_TILES]


def _split_enc_dec(seq: Sequence[int]) -> tuple[list[int], list[int]]:
    """Map a decoder-only style input ``[BOS, x1, ..., x_m]`` to (encoder, decoder) inputs."""
    if len(seq) <= 1:
        return [BOS], [BOS]
    return [BOS, seq[1]], [BOS, *seq[2:]]


def _flat_position(prefix_len: int) -> int:
    """Decoder position holding the last prefix token in the encoder-decoder layout."""
    return 0 if prefix_len <= 2 else prefix_len - 2


def prefix_hidden(model: MoveTransformer, prefixes: Sequence[Sequence[int]], layer: int = -1) -> torch.Tensor:
    """Hidden state at the final position of each prefix (N, hidden_dim)."""
    if not prefixes:
        return torch.zeros(0, model.cfg.hidden_dim)
    if model.is_encoder_decoder:
        enc, dec = zip(*(_split_enc_dec(p) for p in prefixes))
        out = torch.empty(len(prefixes), model.cfg.hidden_dim)
        for enc_len in (1, 2):
            idx = [i for i, e in enumerate(enc) if len(e) == enc_len]
            if not idx:
                continue
            dec_tok, last = _pad([dec[i] for i in idx])
            enc_tok = torch.tensor([enc[i] for i in idx])
            hs = model.hidden_states(dec_tok, enc_tok)[layer]
            out[idx] = hs[torch.arange(len(idx)), last]
        return out
    tok, last = _pad(prefixes)
    hs = model.hidden_states(tok)[layer]
    return hs[torch.arange(len(prefixes)), last]


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    tok = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        tok[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    last = torch.tensor([len(s) - 1 for s in seqs])
    return tok, last


def game_batch(games: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Inputs ``[BOS, x1..x_{n-1}]`` and targets ``x1..xn`` (PAD-filled) for whole games."""
    width = max(len(g) for g in games)
    inp = torch.full((len(games), width), PAD, dtype=torch.long)
    tgt = torch.full((len(games), width), PAD, dtype=torch.long)
    for i, g in enumerate(games):
        n = len(g)
        inp[i, 0] = BOS
        if n > 1:
            inp[i, 1:n] = torch.as_tensor(g[:-1])
        tgt[i, :n] = torch.as_tensor(g)
    return inp, tgt


def all_position_logits(model: MoveTransformer, games: Sequence[Sequence[int]], layer: int = -1):
    """Per-position (logits, hidden) for teacher-forced whole games.

    Row ``j`` of game ``g`` corresponds to the prefix of its first ``j`` moves.
    """
    inp, _ = game_batch(games)
    if not model.is_encoder_decoder:
        hs = model.hidden_states(inp)
        return model.logits_from_hidden(hs[-1]), hs[layer]
    b, t = inp.shape
    first = torch.tensor([[BOS, g[0]] for g in games])
    dec = torch.full((b, max(t - 1, 1)), PAD, dtype=torch.long)
    dec[:, 0] = BOS
    if t > 2:
        dec[:, 1:] = inp[:, 2:]
    hs = model.hidden_states(dec, first)
    open_hs = model.hidden_states(torch.full((b, 1), BOS), torch.full((b, 1), BOS))
    hidden_last = torch.cat([open_hs[-1], hs[-1]], dim=1)[:, :t]
    hidden_layer = torch.cat([open_hs[layer], hs[layer]], dim=1)[:, :t]
    return model.logits_from_hidden(hidden_last), hidden_layer


def sequence_loss(model: MoveTransformer, inp: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
    """PAD-masked mean cross-entropy of next-move prediction."""
    if model.is_encoder_decoder:
        games = [[int(t) for t in row if t != PAD] for row in tgt]
        logits, _ = all_position_logits(model, games)
    else:
        logits = model(inp)
    return F.cross_entropy(logits.reshape(-1, NUM_TILES), tgt.reshape(-1), ignore_index=PAD)


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    training_meta: dict = field(default_factory=dict)
    _model: Optional[MoveTransformer] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_model(cls, model: MoveTransformer, meta: Optional[dict] = None) -> "ModelCheckpoint":
        weights = {k: v.detach().cpu().numpy().astype("<f4").copy() for k, v in model.state_dict().items()}
        ckpt = cls(model.cfg, weights, dict(meta or {}))
        return ckpt

    def model(self) -> MoveTransformer:
        if self._model is None:
            m = MoveTransformer(self.config)
            expected = m.state_dict()
            for name, t in expected.items():
                if name not in self.weights:
                    raise ConfigError(f"checkpoint lacks tensor {name}")
                if tuple(self.weights[name].shape) != tuple(t.shape):
                    raise ConfigError(f"{name}: shape {self.weights[name].shape} != {tuple(t.shape)}")
            extra = set(self.weights) - set(expected)
            if extra:
                raise ConfigError(f"unexpected tensors {sorted(extra)}")
            m.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.weights.items()})
            m.eval()
            self._model = m
        return self._model

    @property
    def id(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        for block in (self.config.to_dict(), self.training_meta):
            raw = json.dumps(block, sort_keys=True).encode()
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
        buf.write(struct.pack("<I", len(self.weights)))
        for name in sorted(self.weights):
            arr = np.ascontiguousarray(self.weights[name], dtype="<f4")
            raw = name.encode()
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ValueError("not a checkpoint file (bad magic)")
        pos = len(CHECKPOINT_MAGIC)
        (version,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        blocks = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            blocks.append(json.loads(data[pos : pos + n]))
            pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        weights = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            weights[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
        return cls(ModelConfig.from_dict(blocks[0]), weights, blocks[1])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _lr_at(step: int, tc: TrainConfig) -> float:
    if tc.warmup_steps and step < tc.warmup_steps:
        return tc.learning_rate * (step + 1) / tc.warmup_steps
    return tc.learning_rate


def _state_hash(opt: torch.optim.Optimizer) -> str:
    h = hashlib.sha256()
    for group in opt.param_groups:
        for p in group["params"]:
            for key in ("exp_avg", "exp_avg_sq"):
                t = opt.state.get(p, {}).get(key)
                if t is not None:
                    h.update(t.detach().numpy().tobytes())
    return h.hexdigest()[:16]


def train(
    config: ModelConfig,
    tconfig: TrainConfig,
    data: Dataset,
    callback: Optional[Callable[[int, float], None]] = None,
) -> ModelCheckpoint:
    """Teacher-forced next-move training with AdamW, linear warmup and clipping."""
    config.validate()
    tconfig.validate()
    if len(data) == 0:
        raise DataError("training dataset is empty")
    games = [g.moves for g in data]
    if any(len(g) == 0 for g in games):
        raise DataError("training dataset contains an empty game")
    if max(len(g) for g in games) + 1 > config.max_seq_len:
        raise ConfigError("games do not fit max_seq_len")

    torch.manual_seed(config.seed)
    model = MoveTransformer(config)
    decay = [p for n, p in model.named_parameters() if p.dim() >= 2]
    no_decay = [p for n, p in model.named_parameters() if p.dim() < 2]
    opt = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": tconfig.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=tconfig.learning_rate,
        betas=(0.9, 0.98),
    )
    gen = torch.Generator().manual_seed(tconfig.seed)
    order = torch.randperm(len(games), generator=gen)
    cursor = 0
    history = []
    started = time.time()
    model.train()
    loss_val = float("nan")
    for step in range(tconfig.total_steps):
        if cursor + tconfig.batch_size > len(order):
            order = torch.randperm(len(games), generator=gen)
            cursor = 0
        idx = order[cursor : cursor + tconfig.batch_size].tolist()
        cursor += tconfig.batch_size
        inp, tgt = game_batch([games[i] for i in idx])
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, tconfig)
        loss = sequence_loss(model, inp, tgt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if tconfig.gradient_clip_norm:
            nn.utils.clip_grad_norm_(model.parameters(), tconfig.gradient_clip_norm)
        opt.step()
        loss_val = loss.item()
        if step % tconfig.eval_interval == 0 or step == tconfig.total_steps - 1:
            history.append((step, loss_val))
            log.info("step %d loss %.4f (%.0fs)", step, loss_val, time.time() - started)
            if callback is not None:
                callback(step, loss_val)
    model.eval()
    meta = {
        "dataset_hash": data.content_hash(),
        "games": len(data),
        "steps": tconfig.total_steps,
        "final_loss": loss_val,
        "loss_history": history,
        "optimizer_state_hash": _state_hash(opt),
        "train_config": asdict(tconfig),
    }
    ckpt = ModelCheckpoint.from_model(model, meta)
    return ckpt


def _check_prefix(ckpt: ModelCheckpoint, prefix: Sequence[int]) -> list[int]:
    prefix = list(prefix)
    if not prefix or prefix[0] != BOS:
        raise ValueError("prefix must start with BOS")
    if any(not 0 <= t < NUM_TILES for t in prefix[1:]):
        raise ValueError("prefix contains non-move tokens after BOS")
    if len(prefix) >= ckpt.config.max_seq_len:
        raise LengthError(f"prefix length {len(prefix)} >= max_seq_len {ckpt.config.max_seq_len}")
    return prefix


@torch.no_grad()
def prefix_logits(ckpt: ModelCheckpoint, prefixes: Sequence[Sequence[int]]) -> torch.Tensor:
    model = ckpt.model()
    hidden = prefix_hidden(model, [_check_prefix(ckpt, p) for p in prefixes])
    return model.logits_from_hidden(hidden)


def next_move_distribution(ckpt: ModelCheckpoint, prefix: Sequence[int]) -> np.ndarray:
    """Softmax over the 60 move tokens at the end of ``prefix`` (which starts with BOS)."""
    logits = prefix_logits(ckpt, [prefix])[0].double()
    return torch.softmax(logits, dim=-1).numpy()


def argmax_lowest(x) -> int:
    """Index of the maximum, ties broken by the lowest index."""
    x = np.asarray(x)
    return int(np.flatnonzero(x == x.max())[0])


def generate_k(ckpt: ModelCheckpoint, prefix: Sequence[int], k: int = 1) -> list[int]:
    """Greedy decoding of ``k`` moves, each appended before the next is produced."""
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    seq = _check_prefix(ckpt, prefix)
    out = []
    for _ in range(k):
        if len(seq) >= ckpt.config.max_seq_len:
            raise LengthError("generation would exceed max_seq_len")
        logits = prefix_logits(ckpt, [seq])[0]
        tok = argmax_lowest(logits.numpy())
        out.append(tok)
        seq.append(tok)
    return out


def _greedy_rows(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. lowest token id
    return logits.argmax(dim=-1)


@torch.no_grad()
def greedy_two_step(ckpt: ModelCheckpoint, games: Sequence[Sequence[int]]):
    """Greedy first and second moves for every true prefix of every game.

    Returns two lists of int arrays; entry ``j`` of game ``g`` is generated from
    the prefix made of the game's first ``j`` moves.  The second move is
    conditioned on the model's own first move.
    """
    model = ckpt.model()
    firsts, seconds = [], []
    if model.is_encoder_decoder:
        for g in games:
            prefixes = [[BOS, *g[:j]] for j in range(len(g))]
            f = _greedy_rows(prefix_logits(ckpt, prefixes))
            s = _greedy_rows(prefix_logits(ckpt, [p + [int(t)] for p, t in zip(prefixes, f)]))
            firsts.append(f.numpy())
            seconds.append(s.numpy())
        return firsts, seconds
    inp, _ = game_batch(games)
    hs_in, first = _branch_forward(model, inp)
    firsts_t = first
    second = _greedy_rows(model.logits_from_hidden(hs_in))
    for i, g in enumerate(games):
        firsts.append(firsts_t[i, : len(g)].numpy())
        seconds.append(second[i, : len(g)].numpy())
    return firsts, seconds


def _branch_forward(model: MoveTransformer, inp: torch.Tensor):
    """Run the true sequences and, in the same pass, a one-token branch at every position.

    The branch token at position ``j + 1`` is the greedy move predicted from
    ``inp[:, :j+1]``; it attends to the cached true keys ``0..j`` and to itself,
    which equals running the extended prefix from scratch.
    """
    x = model.embed(inp)
    # greedy first moves need the full true pass first
    hs = model.hidden_states(inp)
    first = _greedy_rows(model.logits_from_hidden(hs[-1]))
    b, t = inp.shape
    pos = torch.arange(1, t + 1)
    y = model.drop(model.tok_emb(first) + model.pos_emb(pos))
    keep = torch.ones(t, t, dtype=torch.bool).tril()
    for block in model.blocks:
        att = block.attn
        xn, yn = block.ln1(x), block.ln1(y)
        qx, kx, vx = att.split(att.q(xn)), att.split(att.k(xn)), att.split(att.v(xn))
        qy, ky, vy = att.split(att.q(yn)), att.split(att.k(yn)), att.split(att.v(yn))
        scale = 1.0 / math.sqrt(qx.shape[-1])
        x_att = F.scaled_dot_product_attention(qx, kx, vx, is_causal=True)
        cross = (qy @ kx.transpose(-1, -2)) * scale
        cross = cross.masked_fill(~keep, float("-inf"))
        own = (qy * ky).sum(-1, keepdim=True) * scale
        w = torch.softmax(torch.cat([cross, own], dim=-1), dim=-1)
        y_att = w[..., :t] @ vx + w[..., t:] * vy
        x = x + att.proj(att.merge(x_att))
        y = y + att.proj(att.merge(y_att))
        x = x + block.mlp(block.ln2(x))
        y = y + block.mlp(block.ln2(y))
    return y, first

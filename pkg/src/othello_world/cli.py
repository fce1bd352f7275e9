"""Command line entry point: ``othello-world {gen,train,eval,align,viz,run}``.

Everything except ``gen --out`` is driven by a YAML manifest.  Outputs land in
``<out_dir>/{datasets,checkpoints,features,reports,figures}``; file names
carry a hash of the inputs that produced them, and an existing file is never
rewritten, so re-running a manifest only does the missing work.

Set ``OTHELLO_THREADS`` to choose the torch thread count (default 1).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Optional

import yaml

log = logging.getLogger("othello_world")

STAGES = ("datasets", "checkpoints", "features", "reports", "figures")


class ManifestError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class MissingArtifact(FileNotFoundError):
    def __init__(self, what: str, detail: str = ""):
        super().__init__(f"missing {what}" + (f" ({detail})" if detail else ""))
        self.what = what


def build_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def parse_scale(text: str | int) -> int:
    """``2k`` -> 2000, ``1.5m`` -> 1500000, plain integers pass through."""
    if isinstance(text, int):
        return text
    s = str(text).strip().lower()
    mult = {"k": 1_000, "m": 1_000_000}.get(s[-1:], 1)
    if mult != 1:
        s = s[:-1]
    value = float(s) * mult
    if value != int(value) or value < 1:
        raise ValueError(f"bad scale {text!r}")
    return int(value)


def _hash(obj: Any, n: int = 12) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:n]


# --------------------------------------------------------------------- manifest


@dataclass
class Manifest:
    name: str
    out_dir: Path
    dataset: dict
    models: dict
    train: dict
    eval: dict
    align: dict
    viz: dict
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return _hash(self.raw, 16)

    def path(self, stage: str, name: str) -> Path:
        p = self.out_dir / stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _section(raw: dict, key: str, required: bool = False) -> dict:
    val = raw.get(key)
    if val is None:
        if required:
            raise ManifestError(key, "required section is missing")
        return {}
    if not isinstance(val, dict):
        raise ManifestError(key, "must be a mapping")
    return val


def _int(sec: dict, key: str, where: str, default: Optional[int] = None, minimum: int = 0) -> int:
    val = sec.get(key, default)
    if val is None:
        raise ManifestError(f"{where}.{key}", "required")
    if isinstance(val, bool) or not isinstance(val, int) or val < minimum:
        raise ManifestError(f"{where}.{key}", f"expected an integer >= {minimum}, got {val!r}")
    return val


def load_manifest(path) -> Manifest:
    from .model import ConfigError, ModelConfig, TrainConfig

    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise MissingArtifact("manifest", str(path)) from None
    except yaml.YAMLError as exc:
        raise ManifestError("<root>", f"not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ManifestError("<root>", "manifest must be a mapping")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise ManifestError("name", "required non-empty string")
    out = raw.get("out_dir", f"runs/{name}")
    out_dir = (Path(out) if Path(out).is_absolute() else (path.parent / out)).resolve()

    ds = _section(raw, "dataset", required=True)
    source = ds.get("source", "synthetic")
    if source == "synthetic":
        _int(ds, "count", "dataset", minimum=1)
        _int(ds, "seed", "dataset", default=0)
    elif source == "file":
        if not isinstance(ds.get("path"), str):
            raise ManifestError("dataset.path", "required for source: file")
        if Path(ds["path"]).is_absolute() or ".." in Path(ds["path"]).parts:
            raise ManifestError("dataset.path", "must be relative to out_dir/datasets")
    else:
        raise ManifestError("dataset.source", f"unknown source {source!r}")

    models = _section(raw, "models", required=True)
    if not models:
        raise ManifestError("models", "at least one model is required")
    for mname, cfg in models.items():
        if not isinstance(cfg, dict):
            raise ManifestError(f"models.{mname}", "must be a mapping")
        try:
            ModelConfig.from_dict(cfg)
        except (ConfigError, TypeError) as exc:
            raise ManifestError(f"models.{mname}", str(exc)) from None
    train = _section(raw, "train")
    try:
        TrainConfig.from_dict(train)
    except (ConfigError, TypeError) as exc:
        raise ManifestError("train", str(exc)) from None

    ev = _section(raw, "eval")
    hops = ev.get("hops", [1, 2])
    if not isinstance(hops, list) or not set(hops) <= {1, 2} or not hops:
        raise ManifestError("eval.hops", "must be a non-empty subset of [1, 2]")
    try:
        scales = [parse_scale(s) for s in ev.get("scales", [])]
    except ValueError as exc:
        raise ManifestError("eval.scales", str(exc)) from None
    if scales != sorted(scales):
        raise ManifestError("eval.scales", "must be sorted ascending")

    al = _section(raw, "align")
    modes = al.get("modes", ["supervised"])
    if isinstance(modes, str):
        modes = [modes]
    if not set(modes) <= {"supervised", "unsupervised"}:
        raise ManifestError("align.modes", f"unknown mode in {modes!r}")
    pair = al.get("models", list(models)[:2])
    if not isinstance(pair, list) or len(pair) != 2 or not set(pair) <= set(models):
        raise ManifestError("align.models", "must name two models from the models section")
    for key in ("r", "k", "fit_games", "score_games", "search_restarts"):
        if key in al:
            _int(al, key, "align", minimum=1)
    layers = al.get("layers", "last")
    if layers not in ("last", "all") and not (
        isinstance(layers, list) and all(isinstance(p, list) and len(p) == 2 for p in layers)
    ):
        raise ManifestError("align.layers", "use 'last', 'all' or a list of [layer_a, layer_b] pairs")

    vz = _section(raw, "viz")
    if "model" in vz and vz["model"] not in models:
        raise ManifestError("viz.model", f"unknown model {vz['model']!r}")
    for key in ("boards", "games"):
        if key in vz:
            _int(vz, key, "viz")

    return Manifest(
        name,
        out_dir,
        {"source": source, **ds},
        models,
        train,
        {"hops": hops, "scales": scales},
        {"modes": modes, "models": pair, "layers": layers, **{k: v for k, v in al.items() if k not in ("modes", "models", "layers")}},
        vz,
        raw,
    )


# ------------------------------------------------------------------ pipeline


class Pipeline:
    """Stage runner over one manifest; every artifact is looked up before it is built."""

    def __init__(self, manifest: Manifest):
        self.m = manifest
        self._data = None

    # datasets -------------------------------------------------------------
    def dataset(self):
        from .engine import generate_games, read_dataset, write_dataset

        if self._data is not None:
            return self._data
        ds = self.m.dataset
        if ds["source"] == "file":
            path = self.m.out_dir / "datasets" / ds["path"]
            if not path.exists():
                raise MissingArtifact("dataset", str(path))
            self._data = read_dataset(path, ds.get("tag", "other"))
            return self._data
        path = self.m.path("datasets", f"synthetic-{ds['count']}-s{ds['seed']}.txt")
        if path.exists():
            self._data = read_dataset(path, "synthetic", ds["seed"])
        else:
            self._data = generate_games(ds["count"], ds["seed"])
            _write_once(path, lambda p: write_dataset(self._data, p))
        return self._data

    def splits(self):
        from .evaluation import split_dataset

        return split_dataset(self.dataset())

    def scales(self, override: Optional[int] = None) -> list[int]:
        train = self.splits()[0]
        if override is not None:
            scales = [override]
        else:
            scales = self.m.eval["scales"] or [len(train)]
        for s in scales:
            if s > len(train):
                raise ManifestError("eval.scales", f"scale {s} exceeds the {len(train)} training games")
        return scales

    # checkpoints ----------------------------------------------------------
    def _ckpt_path(self, model: str, scale: int) -> Path:
        key = _hash([self.m.models[model], self.m.train, self.dataset().content_hash(), scale])
        return self.m.out_dir / "checkpoints" / f"{model}-{scale}-{key}.ckpt"

    def checkpoint(self, model: str, scale: int, build: bool = False):
        from .model import ModelCheckpoint, ModelConfig, TrainConfig, train

        path = self._ckpt_path(model, scale)
        if path.exists():
            return ModelCheckpoint.load(path)
        if not build:
            raise MissingArtifact("checkpoint", f"{model} at scale {scale}: run `train` first")
        data = self.splits()[0][:scale]
        log.info("training %s on %d games", model, scale)
        ckpt = train(ModelConfig.from_dict(self.m.models[model]), TrainConfig.from_dict(self.m.train), data)
        ckpt.training_meta["manifest"] = self.m.hash
        _write_once(path, ckpt.save)
        return ckpt

    def provenance(self) -> dict:
        return {"manifest": self.m.hash, "version": build_version()}


def _write_once(path: Path, write) -> Path:
    """Write through a temporary name; an existing file is left untouched."""
    path = Path(path)
    if path.exists():
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    write(tmp)
    os.replace(tmp, path)
    return path


def _write_text_once(path: Path, text: str) -> Path:
    return _write_once(path, lambda p: Path(p).write_text(text))


def _summary(command: str, **fields) -> str:
    parts = [f"command={command}", "status=ok"] + [f"{k}={v}" for k, v in fields.items()]
    return " ".join(parts)


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> str:
    from .engine import generate_games, write_dataset

    if args.manifest:
        pipe = Pipeline(load_manifest(args.manifest))
        data = pipe.dataset()
        target = pipe.m.out_dir / "datasets"
    else:
        if args.out is None or args.count is None:
            raise ManifestError("--out/--count", "gen needs --count and --out when no manifest is given")
        data = generate_games(args.count, args.seed)
        target = write_dataset(data, args.out)
    s = data.stats()
    return _summary(
        "gen",
        games=s["count"],
        mean_length=f"{s['mean_length']:.3f}",
        full_length_fraction=f"{s['full_length_fraction']:.4f}",
        dataset=data.content_hash(),
        out=target,
    )


def cmd_train(args) -> str:
    pipe = Pipeline(load_manifest(args.manifest))
    t = time.time()
    ids = []
    for model in pipe.m.models:
        for scale in pipe.scales(args.scale):
            ids.append(pipe.checkpoint(model, scale, build=True).id)
    return _summary("train", checkpoints=len(ids), ids=",".join(ids), seconds=f"{time.time() - t:.1f}", manifest=pipe.m.hash)


def cmd_eval(args) -> str:
    from .evaluation import SweepRow, evaluate, write_reports, write_sweep

    pipe = Pipeline(load_manifest(args.manifest))
    test = pipe.splits()[2]
    hops = [args.hop] if args.hop else pipe.m.eval["hops"]
    rows, reports = [], []
    for model in pipe.m.models:
        for scale in pipe.scales(args.scale):
            ckpt = pipe.checkpoint(model, scale)
            for hop in hops:
                rep = evaluate(ckpt, test, hop)
                reports.append((rep, {"model": model, "scale": scale}))
                rows.append(SweepRow(model, scale, hop, rep.total_prefixes, rep.errors, rep.error_rate, ckpt.id))
    key = _hash([pipe.m.hash, [r.checkpoint for r in rows], hops])
    prov = pipe.provenance()
    text = "".join(
        rep.to_line() + "".join(f" {k}={v}" for k, v in {**extra, **prov}.items()) + "\n" for rep, extra in reports
    )
    report = _write_text_once(pipe.m.path("reports", f"eval-{key}.txt"), text)
    table = pipe.m.out_dir / "reports" / f"eval-{key}.csv"
    plot = pipe.m.out_dir / "figures" / f"eval-{key}.jsonl"
    if not (table.exists() and plot.exists()):
        write_sweep(rows, table, plot)
    worst = max(r.rate for r in rows)
    rates = ",".join(f"{r.model}/{r.scale}/hop{r.hop}:{r.rate:.4f}" for r in rows)
    return _summary("eval", reports=len(rows), rates=rates, max_rate=f"{worst:.4f}", report=report, manifest=pipe.m.hash)


def _layer_pairs(spec, n_a: int, n_b: int, override: Optional[str]):
    if override:
        try:
            a, b = (int(x) for x in override.split(","))
        except ValueError:
            raise ManifestError("--layers", "expected lA,lB") from None
        return [(a % n_a, b % n_b)]
    if spec == "last":
        return [(n_a - 1, n_b - 1)]
    if spec == "all":
        return "all"
    return [(a % n_a, b % n_b) for a, b in spec]


def cmd_align(args) -> str:
    from .alignment import align, layer_similarity_matrix
    from .features import FeatureMatrix, extract_features

    pipe = Pipeline(load_manifest(args.manifest))
    al = pipe.m.align
    name_a, name_b = al["models"]
    scale = pipe.scales(args.scale)[-1]
    ck_a, ck_b = pipe.checkpoint(name_a, scale), pipe.checkpoint(name_b, scale)
    _, val, test = pipe.splits()
    fit_games = val[: al.get("fit_games", 400)]
    score_games = test[: al.get("score_games", 100)]
    offset = len(fit_games)

    def feats(ckpt, games, layer, shift):
        path = pipe.m.out_dir / "features" / f"{ckpt.id}-L{layer}-{games.content_hash()}.feat"
        if path.exists():
            return FeatureMatrix.load(path)
        fm = extract_features(ckpt, games, layer, game_ids=range(shift, shift + len(games)))
        _write_once(path, fm.save)
        return fm

    modes = [args.mode] if args.mode else al["modes"]
    kw = {"supervised": {"r": al.get("r", 1)}, "unsupervised": {"r": al.get("r", 5), "k": al.get("k", 3000)}}
    if "search_restarts" in al:
        kw["unsupervised"]["self_learning_restarts"] = al["search_restarts"]
    pairs = _layer_pairs(al["layers"], ck_a.config.layers, ck_b.config.layers, args.layers)
    prov = pipe.provenance()
    lines, results = [], []
    for mode in modes:
        if pairs == "all":
            fa = [feats(ck_a, fit_games, l, 0) for l in range(ck_a.config.layers)]
            fb = [feats(ck_b, fit_games, l, 0) for l in range(ck_b.config.layers)]
            sa = [feats(ck_a, score_games, l, offset) for l in range(ck_a.config.layers)]
            sb = [feats(ck_b, score_games, l, offset) for l in range(ck_b.config.layers)]
            grid = layer_similarity_matrix(fa, fb, mode, sa, sb, **kw[mode])
            key = _hash([pipe.m.hash, ck_a.id, ck_b.id, mode, "grid"])
            _write_text_once(pipe.m.path("reports", f"heatmap-{mode}-{key}.tsv"), grid.to_text())
            _write_text_once(pipe.m.path("figures", f"heatmap-{mode}-{key}.svg"), grid.to_svg())
            last = grid.values[-1, -1]
            results.append(f"{mode}:last={last:.4f}:rank={grid.rank_of(-1, -1)}/{grid.values.size}")
            continue
        for la, lb in pairs:
            score = (feats(ck_a, score_games, la, offset), feats(ck_b, score_games, lb, offset))
            amap, rep = align(feats(ck_a, fit_games, la, 0), feats(ck_b, fit_games, lb, 0), mode, score=score, **kw[mode])
            key = _hash([pipe.m.hash, ck_a.id, ck_b.id, mode, la, lb])
            _write_once(pipe.m.path("reports", f"map-{mode}-{la}-{lb}-{key}.align"), amap.save)
            rec = {**rep.to_record(), "mode": mode, "layer_a": la, "layer_b": lb, "model_a": ck_a.id, "model_b": ck_b.id, **prov}
            lines.append(" ".join(f"{k}={v}" for k, v in rec.items()))
            results.append(f"{mode}:{la},{lb}={rep.mean_cosine:.4f}")
    if lines:
        key = _hash([pipe.m.hash, ck_a.id, ck_b.id, modes, pairs])
        _write_text_once(pipe.m.path("reports", f"align-{key}.txt"), "\n".join(lines) + "\n")
    return _summary("align", results=";".join(results), manifest=pipe.m.hash)


def cmd_viz(args) -> str:
    from .viz import latent_move_projection, project_game, render_board_svg, write_plot_data

    pipe = Pipeline(load_manifest(args.manifest))
    vz = pipe.m.viz
    scale = pipe.scales(args.scale)[-1]
    names = list(pipe.m.models)
    model = vz.get("model", names[0])
    ckpt = pipe.checkpoint(model, scale)
    test = pipe.splits()[2]
    written = []
    steps = vz.get("prefix_steps", [20])
    for i in range(min(vz.get("boards", 1), len(test))):
        game = test.games[i].moves
        for step in steps:
            prefix = game[: min(step, len(game) - 1)]
            bp = latent_move_projection(ckpt, prefix)
            path = pipe.m.path("figures", f"board-{ckpt.id}-g{i}-s{len(prefix)}.svg")
            written.append(_write_once(path, lambda p: render_board_svg(bp, p)))
            log.info("%s", bp.describe())
    other = pipe.m.align["models"][1] if len(names) > 1 else model
    ck_b = pipe.checkpoint(other, scale)
    for i in range(min(vz.get("games", 1), len(test))):
        pts = project_game(ckpt, ck_b, test.games[i].moves, d=vz.get("dims", 2), labels=(model, other))
        path = pipe.m.path("figures", f"pca-{ckpt.id}-{ck_b.id}-g{i}.txt")
        written.append(_write_once(path, lambda p: write_plot_data(pts, p)))
    return _summary("viz", files=len(written), out=pipe.m.out_dir / "figures", manifest=pipe.m.hash)


def cmd_run(args) -> str:
    lines = [cmd_gen(args), cmd_train(args), cmd_eval(args), cmd_align(args), cmd_viz(args)]
    for line in lines[:-1]:
        print(line)
    return lines[-1]


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="othello-world", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest_required=True):
        sp.add_argument("--manifest", required=manifest_required, help="YAML experiment manifest")
        sp.add_argument("--scale", type=parse_scale, help="override eval.scales, e.g. 2k")
        return sp

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g, manifest_required=False)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, help="dataset file (without --manifest)")
    common(sub.add_parser("train", help="train every manifest model at every scale"))
    e = common(sub.add_parser("eval", help="1-hop / 2-hop legality error rates"))
    e.add_argument("--hop", type=int, choices=(1, 2))
    a = common(sub.add_parser("align", help="align hidden states of two models"))
    a.add_argument("--mode", choices=("supervised", "unsupervised"))
    a.add_argument("--layers", help="layer pair lA,lB (negative counts from the end)")
    common(sub.add_parser("viz", help="board projections and PCA plot data"))
    r = common(sub.add_parser("run", help="every stage in order"))
    r.add_argument("--hop", type=int, choices=(1, 2))
    r.add_argument("--mode", choices=("supervised", "unsupervised"))
    r.add_argument("--layers")
    r.set_defaults(count=None, seed=0, out=None)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "align": cmd_align, "viz": cmd_viz, "run": cmd_run}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    import torch

    torch.set_num_threads(int(os.environ.get("OTHELLO_THREADS", "1")))
    for attr in ("hop", "mode", "layers"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    try:
        print(COMMANDS[args.command](args))
    except ManifestError as exc:
        print(f"command={args.command} status=error kind=manifest field={exc.path} message={exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"command={args.command} status=error kind=missing artifact={exc.what} message={exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

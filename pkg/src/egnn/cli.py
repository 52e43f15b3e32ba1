"""Command-line interface: ``egnn gen-data | train | eval | inspect``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical failure.

Run configs are flat text files of ``key = value`` lines (``#`` starts a
comment). Training fields use their plain names (``num_layers = 3``); synthetic
data fields carry a ``data.`` prefix (``data.sigma_b = 3``), and ``data.path``
points at an existing dataset file instead of generating one.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import types
import typing
from pathlib import Path

import numpy as np

from .episodes import (DatasetFormatError, SamplerError, SyntheticSpec, generate_synthetic,
                       load_dataset, sample_episode, save_dataset)
from .graph import edge_labels, run_inference, write_edge_snapshot
from .networks import ConfigError
from .numerics import NumericalError
from .training import (CheckpointError, TrainingConfig, TrainingDivergedError, evaluate,
                       load_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_PREFIX = "data."
CONFIG_ECHO = "config.txt"
VARIANT_ALIASES = {"gaussian": "gaussian_vectors", "gaussian_vectors": "gaussian_vectors",
                   "procedural": "procedural_images", "procedural_images": "procedural_images"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run config -------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _coerce(text: str, hint):
    """Convert a config string to the type of a dataclass field."""
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(text, inner[0])
    try:
        if hint is bool:
            return _parse_bool(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple:
            item = args[0]
            parts = text.strip("()[]").replace(",", " ").split()
            return tuple(_coerce(p, item) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"cannot read {text!r} as {hint}: {exc}") from None
    raise ConfigError(f"unsupported field type {hint}")


_TRAIN_HINTS = typing.get_type_hints(TrainingConfig)
_DATA_HINTS = typing.get_type_hints(SyntheticSpec)


def known_keys() -> list[str]:
    return sorted(_TRAIN_HINTS) + sorted(DATA_PREFIX + k for k in _DATA_HINTS) + [DATA_PREFIX + "path"]


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


@dataclasses.dataclass
class RunConfig:
    training: TrainingConfig
    data: SyntheticSpec
    data_path: str | None = None

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        unknown = sorted(set(pairs) - set(known_keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        train_kw, data_kw, data_path = {}, {}, None
        for key, value in pairs.items():
            if key == DATA_PREFIX + "path":
                data_path = value or None
            elif key.startswith(DATA_PREFIX):
                name = key[len(DATA_PREFIX):]
                data_kw[name] = _coerce(value, _DATA_HINTS[name])
            else:
                train_kw[key] = _coerce(value, _TRAIN_HINTS[key])
        if "variant" in data_kw:
            data_kw["variant"] = VARIANT_ALIASES.get(data_kw["variant"], data_kw["variant"])
        try:
            data = SyntheticSpec(**data_kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(TrainingConfig(**train_kw), data, data_path)

    def to_text(self) -> str:
        lines = ["# effective configuration"]
        for key, value in self.training.to_dict().items():
            lines.append(f"{key} = {_format(value)}")
        if self.data_path is not None:
            lines.append(f"{DATA_PREFIX}path = {self.data_path}")
        for key, value in dataclasses.asdict(self.data).items():
            lines.append(f"{DATA_PREFIX}{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def load_data(self):
        if self.data_path is not None:
            return load_dataset(self.data_path)
        return generate_synthetic(self.data)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    pairs: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        pairs.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        pairs[key.strip()] = value.strip()
    return RunConfig.from_pairs(pairs)


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(variant=VARIANT_ALIASES[args.variant], dim=args.dim, image_size=args.image_size,
                         classes=args.classes, per_class=args.per_class, sigma_w=args.sigma_w,
                         sigma_b=args.sigma_b, seed=args.seed)
    ds = generate_synthetic(spec)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {ds.variant}, {ds.num_classes} classes x {ds.per_class} samples, "
          f"input shape {ds.input_shape}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_dir = Path(args.out)
    config_path = args.config
    if config_path is None and args.resume and (run_dir / CONFIG_ECHO).is_file():
        config_path = str(run_dir / CONFIG_ECHO)
    overrides = list(args.set or [])
    if args.intra_only:
        overrides.append("intra_only = true")
    if args.episodes is not None:
        overrides.append(f"episodes = {args.episodes}")
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if args.data is not None:
        overrides.append(f"{DATA_PREFIX}path = {args.data}")
    run = load_run_config(config_path, overrides)
    dataset = run.load_data()

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_ECHO).write_text(run.to_text(), encoding="utf-8")
    resume = None
    if args.resume:
        latest = run_dir / "latest.ckpt"
        if not latest.is_file():
            raise ConfigError(f"--resume given but {latest} does not exist")
        resume = load_checkpoint(latest)

    def log(line):
        if not args.quiet and (line.startswith("VAL") or int(line.split("\t", 1)[0]) % args.log_every == 0):
            print(line, flush=True)

    result = train(run.training, dataset, resume, run_dir=run_dir, log_fn=log)
    best = result.best
    acc = "n/a" if best.best_val_acc is None else f"{100 * best.best_val_acc:.2f}%"
    print(f"finished at iteration {result.latest.iteration}; best validation accuracy {acc}; "
          f"checkpoints in {run_dir}")
    return EXIT_OK


def _dataset_for_checkpoint(ckpt_path: Path, data_arg: str | None, config_arg: str | None):
    """Prefer --data, then --config, then the config echo next to the checkpoint."""
    if data_arg is not None:
        return load_dataset(data_arg)
    source = Path(config_arg) if config_arg is not None else ckpt_path.parent / CONFIG_ECHO
    if not source.is_file():
        raise ConfigError(f"no dataset given and no config found at {source}; pass --data")
    return load_run_config(str(source), []).load_data()


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.config
    dataset = _dataset_for_checkpoint(ckpt_path, args.data, args.config)
    if cfg.split is not None:
        dataset.set_splits(*cfg.split)
    model = ckpt.to_model()
    way = args.ways if args.ways is not None else cfg.way
    shot = args.shots if args.shots is not None else cfg.shot
    query = args.queries if args.queries is not None else cfg.query
    report = evaluate(model, dataset, split=args.split, way=way, shot=shot, query=query,
                      episodes=args.episodes, transductive=args.transductive,
                      labeled_ratio=args.labeled_ratio, labeled_only=args.labeled_only, seed=args.seed,
                      symmetrize_votes=cfg.symmetrize_votes, bn=args.bn)
    mode = "transductive" if args.transductive else "non-transductive"
    print(f"{way}-way {shot}-shot, {query} queries/class, {mode}, {args.episodes} episodes on '{args.split}'")
    print(report.line())
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.config
    dataset = _dataset_for_checkpoint(ckpt_path, args.data, args.config)
    if cfg.split is not None:
        dataset.set_splits(*cfg.split)
    model = ckpt.to_model()
    way = args.ways if args.ways is not None else cfg.way
    shot = args.shots if args.shots is not None else cfg.shot
    query = args.queries if args.queries is not None else cfg.query
    ep = sample_episode(dataset, way, shot, query, args.labeled_ratio,
                        rng=np.random.default_rng(args.episode_seed), split=args.split)
    res = run_inference(ep, model, "transductive", symmetrize_votes=cfg.symmetrize_votes, keep_graphs=True)
    graph = res.graphs[0]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for layer, e in enumerate(graph.edge_feats):
        e1 = e.data[:, :, 0]
        if not (np.all(e1 >= 0) and np.all(e1 <= 1)):
            raise NumericalError(f"layer {layer} edge values leave [0, 1]")
        write_edge_snapshot(out / f"edge_layer_{layer}.txt", e1, way, shot, query, layer)
    for layer, v in enumerate(graph.node_feats):
        rows = [" ".join(repr(float(x)) for x in row) for row in v.data]
        (out / f"node_feats_layer_{layer}.txt").write_text("\n".join(rows) + "\n", encoding="utf-8")
    labels = ep.all_labels()
    write_edge_snapshot(out / "edge_truth.txt", edge_labels(labels), way, shot, query, -1)

    ns = ep.num_support
    nodes = [{"index": i, "role": "support" if i < ns else "query", "label": int(labels[i]),
              "labeled": bool(i < ns and ep.support_labeled[i]), "class_id": int(ep.classes[labels[i]])}
             for i in range(ep.num_nodes)]
    manifest = {"checkpoint": str(ckpt_path), "episode_seed": args.episode_seed, "split": args.split,
                "n_way": way, "n_shot": shot, "n_query": query, "labeled_ratio": args.labeled_ratio,
                "num_layers": len(graph.edge_feats) - 1,
                "predictions": res.predictions.tolist(), "accuracy": res.accuracy(ep.query_y),
                "nodes": nodes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(graph.edge_feats)} edge layers and node features for {ep.num_nodes} nodes to {out}; "
          f"query accuracy {100 * manifest['accuracy']:.1f}%")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

def _bool_arg(text: str) -> bool:
    try:
        return _parse_bool(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egnn", description="Edge-labeling graph networks for few-shot classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--variant", required=True, choices=sorted(VARIANT_ALIASES))
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--dim", type=int, default=16, help="vector length (gaussian)")
    g.add_argument("--image-size", type=int, default=16, help="image side (procedural)")
    g.add_argument("--sigma-w", type=float, default=1.0, help="within-class spread")
    g.add_argument("--sigma-b", type=float, default=10.0, help="spread of class centers")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="episodic training into a run directory")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--data", help="dataset file (same as data.path)")
    t.add_argument("--episodes", type=int, help="total training iterations")
    t.add_argument("--seed", type=int)
    t.add_argument("--intra-only", action="store_true", help="drop the inter-class aggregation path")
    t.add_argument("--resume", action="store_true", help="continue from latest.ckpt in the run directory")
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def add_episode_flags(p):
        p.add_argument("checkpoint")
        p.add_argument("--data", help="dataset file; default: the config echo beside the checkpoint")
        p.add_argument("--config", help="run config used to regenerate the dataset")
        p.add_argument("--ways", type=int)
        p.add_argument("--shots", type=int)
        p.add_argument("--queries", type=int, help="queries per class")
        p.add_argument("--labeled-ratio", type=float, default=1.0)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))

    e = sub.add_parser("eval", help="evaluate a checkpoint on sampled episodes")
    add_episode_flags(e)
    e.add_argument("--episodes", type=int, default=600)
    e.add_argument("--transductive", type=_bool_arg, default=True, metavar="{true,false}")
    e.add_argument("--labeled-only", action="store_true", help="drop unlabeled supports from each task")
    e.add_argument("--seed", type=int, default=0, help="episode sampling seed")
    e.add_argument("--bn", default="running", choices=("running", "batch"))
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="export per-layer edges and node features for one episode")
    add_episode_flags(i)
    i.add_argument("--episode-seed", type=int, required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"egnn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, NumericalError, FloatingPointError) as exc:
        print(f"egnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, DatasetFormatError, SamplerError, ValueError, OSError) as exc:
        print(f"egnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

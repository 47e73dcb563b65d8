"""Command line entry point: ``hinbot generate | train | eval | ablate``.

Run configs are flat ``key = value`` files. Keys follow the hyperparameter
table (``hidden_size``, ``learning_rate``, ...); unknown keys are errors.
Data goes to files or stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import model as bm
from .graph import GraphFormatError, HinGraph, build_index, load_graph_dir, save_graph
from .model import BotModel, ModelConfig, TrainConfig
from .synth import fixtures, generate, load_spec

PROTOCOLS = ("relations", "architecture", "heads", "data_efficiency")
HEAD_COUNTS = (0, 1, 2, 4, 8)
TRAIN_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
ABLATION_SEEDS = 5


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _relations(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    if not names:
        raise ValueError("empty relation list")
    return names


# config key -> (parser, target object, field name)
KEYS = {
    "hidden_size": (int, "model", "hidden"),
    "layer_count": (int, "model", "layers"),
    "transformer_heads": (int, "model", "rgt_heads"),
    "semantic_heads": (int, "model", "semantic_heads"),
    "semantic_hidden": (int, "model", "semantic_hidden"),
    "dropout": (float, "model", "dropout"),
    "relations": (_relations, "model", "relations"),
    "fusion_mode": (str, "model", "fusion_mode"),
    "aggregator_mode": (str, "model", "aggregator_mode"),
    "dtype": (str, "model", "dtype"),
    "learning_rate": (float, "train", "lr"),
    "l2_lambda": (float, "train", "l2_lambda"),
    "batch_size": (int, "train", "batch_size"),
    "max_epochs": (int, "train", "max_epochs"),
    "weight_decay": (float, "train", "weight_decay"),
    "train_fraction": (float, "train", "train_fraction"),
    "seed": (int, "run", "seed"),
    "graph": (str, "run", "graph"),
    "out_dir": (str, "run", "out_dir"),
    "verbose": (_bool, "run", "verbose"),
}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    seed: int = 0
    graph: str | None = None
    out_dir: str | None = None
    verbose: bool = False
    explicit: frozenset = frozenset()

    def fit_graph(self, graph: HinGraph) -> tuple[ModelConfig, HinGraph]:
        """Relations default to the graph's; an explicit list selects from it."""
        if "relations" not in self.explicit:
            return replace(self.model, relations=tuple(graph.relations)), graph
        missing = [r for r in self.model.relations if r not in graph.relations]
        if missing:
            raise bm.RelationMismatchError(
                f"config relations {missing} not in graph relations {graph.relations}")
        return self.model, graph.subgraph_relations(self.model.relations)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    model_kw, train_kw, run_kw = {}, {}, {}
    seen = set()
    targets = {"model": model_kw, "train": train_kw, "run": run_kw}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        conv, target, name = KEYS[key]
        try:
            targets[target][name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return RunConfig(ModelConfig(**model_kw), TrainConfig(**train_kw), explicit=frozenset(seen), **run_kw)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def resolve_graph(ref: str | None, seed: int | None = None) -> HinGraph:
    """A graph directory, or a fixture name generated on the fly."""
    if ref is None:
        raise ConfigError("no graph given (config key 'graph' or --graph)")
    if Path(ref).is_dir():
        return load_graph_dir(ref)
    presets = fixtures()
    if ref in presets:
        spec = presets[ref]
        if seed is not None:
            spec = replace(spec, seed=seed)
        return generate(spec)
    raise ConfigError(f"graph {ref!r} is neither a directory nor a fixture name")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- ablation protocols ----------------------------------------------------------

def ablation_settings(protocol: str, graph: HinGraph, base: ModelConfig):
    """``(label, model config, graph, train_fraction)`` per setting, in fixed order."""
    rels = tuple(graph.relations)
    if protocol == "relations":
        out = [("all:" + "+".join(rels), replace(base, relations=rels), graph, None)]
        if len(rels) > 1:
            for r in rels:
                out.append((f"only:{r}", replace(base, relations=(r,)), graph.subgraph_relations([r]), None))
        return out
    if protocol == "architecture":
        full = replace(base, relations=rels, aggregator_mode="rgt", fusion_mode="semantic_attention")
        out = [("full", full, graph, None)]
        for agg in ("no_transformer", "no_gate", "mean_neighbor"):
            out.append((f"aggregator={agg}", replace(full, aggregator_mode=agg), graph, None))
        for fus in ("sum", "mean", "max", "min"):
            out.append((f"fusion={fus}", replace(full, fusion_mode=fus), graph, None))
        return out
    if protocol == "heads":
        out = []
        for c in HEAD_COUNTS:
            if c and base.hidden % c:
                continue
            out.append((f"C={c},D={base.semantic_heads}", replace(base, relations=rels, rgt_heads=c), graph, None))
        for d in HEAD_COUNTS:
            if d != base.semantic_heads:
                out.append((f"C={base.rgt_heads},D={d}", replace(base, relations=rels, semantic_heads=d), graph, None))
        if base.rgt_heads and base.semantic_heads:
            out.append(("C=0,D=0", replace(base, relations=rels, rgt_heads=0, semantic_heads=0), graph, None))
        return out
    if protocol == "data_efficiency":
        return [(f"train_fraction={f}", replace(base, relations=rels), graph, f) for f in TRAIN_FRACTIONS]
    raise ConfigError(f"unknown ablation protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")


def _quartiles(values) -> tuple[float, float, float, float]:
    v = np.asarray(values, dtype=float)
    q1, q2, q3 = np.percentile(v, [25, 50, 75])
    return float(v.mean()), float(q1), float(q2), float(q3)


def run_ablation(protocol: str, graph: HinGraph, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 seed: int = 0, n_seeds: int = ABLATION_SEEDS, log=None) -> list[dict]:
    """Run every setting of ``protocol`` over ``n_seeds`` consecutive seeds."""
    rows = []
    for label, cfg, g, fraction in ablation_settings(protocol, graph, model_cfg):
        accs, f1s = [], []
        idx = build_index(g)
        for s in range(seed, seed + n_seeds):
            tcfg = replace(train_cfg, seed=s, train_fraction=fraction or train_cfg.train_fraction)
            m = BotModel(cfg, g.feature_dim, seed=s)
            rep = bm.train(m, g, tcfg, index=idx)
            accs.append(rep.test.accuracy)
            f1s.append(rep.test.f1)
            if log:
                log(f"{protocol} {label} seed={s}: acc={rep.test.accuracy:.4f} f1={rep.test.f1:.4f}")
        row = {"protocol": protocol, "setting": label, "seeds": n_seeds}
        for name, vals in (("acc", accs), ("f1", f1s)):
            mean, q1, med, q3 = _quartiles(vals)
            row.update({f"{name}_mean": mean, f"{name}_q1": q1, f"{name}_median": med, f"{name}_q3": q3})
        row["acc_runs"] = " ".join(repr(a) for a in accs)
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# -- commands --------------------------------------------------------------------

def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out_dir
    if out is None:
        raise ConfigError("no output directory (--out or config key 'out_dir')")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    try:
        spec = load_spec(args.spec, args.seed)
    except FileNotFoundError:
        raise ConfigError(f"{args.spec!r} is neither a fixture name nor a spec file") from None
    g = generate(spec)
    save_graph(g, out, {"spec": spec.to_dict(), "seed": spec.seed})
    print(json.dumps({"out": str(out), "nodes": g.num_nodes,
                      "edges": {r: int(len(e)) for r, e in g.edges.items()}}))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    tcfg = replace(cfg.train, seed=seed)
    if args.train_fraction is not None:
        tcfg = replace(tcfg, train_fraction=args.train_fraction)
    mcfg, graph = cfg.fit_graph(resolve_graph(args.graph or cfg.graph))
    out = _out_dir(args, cfg)
    model = BotModel(mcfg, graph.feature_dim, seed=seed)
    report = bm.train(model, graph, tcfg, log=_log if (args.verbose or cfg.verbose) else None)
    report.save(out / "report.csv")
    bm.save_checkpoint(model, out / "checkpoint.json")
    print(f"test_acc={report.test.accuracy!r} test_f1={report.test.f1!r} best_epoch={report.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    model = bm.load_checkpoint(args.checkpoint)
    graph = resolve_graph(args.graph)
    model.check_graph(graph)
    idx = build_index(graph)
    mask = {"test": graph.test_mask, "val": graph.val_mask, "train": graph.train_mask}[args.split]
    m = bm.evaluate(model, graph, mask, idx)
    print(f"{args.split}_acc={m.accuracy!r} {args.split}_f1={m.f1!r} "
          f"tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn}")
    if args.export_embeddings:
        bm.export_embeddings(model, graph, args.export_embeddings, idx)
    if args.export_attention:
        bm.export_attention(model, graph, args.export_attention, idx)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    mcfg, graph = cfg.fit_graph(resolve_graph(args.graph or cfg.graph))
    out = _out_dir(args, cfg)
    rows = run_ablation(args.protocol, graph, mcfg, cfg.train, seed, args.seeds,
                        log=_log if (args.verbose or cfg.verbose) else None)
    text = rows_to_csv(rows)
    (out / f"ablate_{args.protocol}.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hinbot", description="Bot detection on heterogeneous graphs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, out_required=False):
        p.add_argument("--config", help="key = value run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--verbose", action="store_true", help="per-epoch progress on stderr")

    p = sub.add_parser("generate", help="write a synthetic graph")
    p.add_argument("spec", help="fixture name or JSON spec file (a manifest.json works)")
    shared(p, out_required=True)
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and write checkpoint.json + report.csv")
    shared(p)
    p.add_argument("--graph", help="graph directory or fixture name")
    p.add_argument("--train-fraction", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint, optionally export embeddings/attention")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True, help="graph directory or fixture name")
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--export-embeddings", metavar="PATH")
    p.add_argument("--export-attention", metavar="PATH")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation protocol over several seeds")
    shared(p)
    p.add_argument("protocol", choices=PROTOCOLS)
    p.add_argument("--graph", help="graph directory or fixture name")
    p.add_argument("--seeds", type=int, default=ABLATION_SEEDS)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GraphFormatError, bm.RelationMismatchError, bm.TrainingError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``mapn`` command-line entry point.

Every command writes into a fresh run directory ``<out-dir>/<command>-<timestamp>-seed<seed>``.
Parameters resolve as flag > config-file section > built-in default; the
effective values are echoed to ``config.json`` in the run directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import loads
from .graph import (SYNTHETIC_KINDS, GraphFormatError, HeteroGraph, complete_graph,
                    cycle_graph, default_meta_paths, generate_synthetic, load_bundle, load_corpus,
                    load_graph, regular_circulant, save_corpus, save_graph, star_graph)
from .sampler import dump_neighbor_sets, dump_triples, sample_triples
from .train import SCHEDULERS

EXIT_USAGE = 2
EXIT_FAILURE = 1

DATASETS = {
    "synth-sbm": "homophilous SBM, 90 nodes, 3 classes",
    "synth-hetero-sbm": "heterophilous SBM, 90 nodes, 2 classes, sparse",
    "synth-academic": "author/paper/venue graph, 120 nodes, 3 classes",
    "sbm-200": "homophilous SBM, 200 nodes, 3 classes (hop sweep)",
    "hetero-sbm-200": "heterophilous SBM, 200 nodes, 2 classes, mean degree 3 (hop sweep)",
    "cycle8": "8-cycle", "cycle12": "12-cycle", "complete5": "complete graph on 5 nodes",
    "circulant8": "4-regular circulant on 8 nodes", "star6": "star with 6 leaves",
    "cycles-vs-stars": "graph-classification corpus of 40 cycles and 40 stars",
}


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_FAILURE):
        super().__init__(message)
        self.code, self.status = code, status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


# -- parameter tables: name -> (default, type, help) ----------------------------------

def _choice(*options):
    def conv(s):
        if s not in options:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(options)}")
        return s
    conv.__name__ = "choice"
    return conv


def _positive(kind):
    def conv(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {s}")
        return v
    conv.__name__ = kind.__name__
    return conv


def _k_list(s):
    try:
        ks = [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("need at least one K, all >= 1")
    return ks


def _flag(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


_flag.__name__ = "bool"
_k_list.__name__ = "list"
pos_int, pos_float = _positive(int), _positive(float)

GLOBAL = {
    "config": (None, str, "JSON config file with one section per command"),
    "seed": (0, int, "seed for every stochastic component"),
    "workers": (1, pos_int, "concurrency cap; 1 guarantees determinism"),
    "out_dir": ("runs", str, "parent directory for run bundles"),
    "dump_samples": (None, str, "directory for sampled neighbor sets and triples (TSV)"),
}

DATA = {
    "dataset": ("synth-sbm", str, f"built-in name ({', '.join(DATASETS)}) or a bundle directory"),
    "data_seed": (None, int, "seed for built-in synthetic data (defaults to --seed)"),
}

MODEL = {
    "K": (2, pos_int, "hops per asynchronous layer"),
    "L": (2, pos_int, "number of asynchronous layers"),
    "d": (16, pos_int, "embedding width (even)"),
    "state_dim": (16, pos_int, "SSM state dimension"),
    "k_neighbors": (10, pos_int, "RWR neighbors kept per type"),
    "use_lap_pe": (False, _flag, "append Laplacian positional encodings"),
    "lap_pe_k": (4, pos_int, "number of positional-encoding eigenvectors"),
    "ssm_input": ("weighted", _choice("weighted", "raw"), "attention-scaled or raw SSM input"),
    "hop_skip": (True, _flag, "residual from the previous layer"),
    "layer_skip": (True, _flag, "residual from the first layer"),
    "init_scale": (1.0, pos_float, "SSM input/output projection init scale"),
}

WALK = {
    "restart_p": (0.5, float, "random-walk restart probability"),
    "walk_length": (100, pos_int, "steps per random walk"),
    "walks_per_node": (10, pos_int, "walks started per node"),
    "window": (2, pos_int, "skip-gram window"),
    "negatives_per_positive": (1, pos_int, "negatives per positive pair"),
    "resample_every": (0, int, "refresh samples every E epochs (0 = never)"),
}

OPTIM = {
    "learning_rate": (0.1, pos_float, "AdamW learning rate"),
    "weight_decay": (0.0, float, "decoupled weight decay"),
    "adam_eps": (1e-8, pos_float, "AdamW epsilon"),
    "epochs": (500, pos_int, "maximum epochs"),
    "scheduler": ("none", _choice(*SCHEDULERS), "learning-rate schedule"),
    "t0": (50, pos_int, "cosine: first cycle length"),
    "t_mult": (2, pos_int, "cosine: cycle growth factor"),
    "lr_min": (0.0, float, "cosine: floor"),
    "plateau_factor": (0.5, pos_float, "plateau: decay factor"),
    "plateau_patience": (10, pos_int, "plateau: patience in epochs"),
    "supervised": (False, _flag, "train a cross-entropy head instead of the skip-gram loss"),
}

PROBE = {
    "probe_splits": (5, pos_int, "random 60/20/20 splits for the frozen-embedding probe"),
}

COMMANDS = {
    "ingest": {
        "nodes": (None, str, "nodes.tsv (node_id, type)"),
        "edges": (None, str, "edges.tsv (src, dst, relation, directed|undirected)"),
        "features": (None, str, "directory of <type>.csv feature files"),
        "labels": (None, str, "optional labels.tsv (node_id, label)"),
        "corpus": (None, str, "graph-classification manifest instead of a single graph"),
    },
    "generate": {
        "kind": ("homophilous-sbm", _choice(*SYNTHETIC_KINDS), "generator"),
        "n_nodes": (90, pos_int, "number of nodes"),
        "n_classes": (3, pos_int, "number of classes"),
        "p_in": (0.3, float, "intra-class edge probability"),
        "p_out": (0.02, float, "inter-class edge probability"),
        "feature_dim": (8, pos_int, "feature width"),
        "feature_noise": (1.0, float, "feature noise scale"),
    },
    "train": {**DATA, **MODEL, **WALK, **OPTIM},
    "embed": {"run": (None, str, "train run directory to load")},
    "eval": {
        "run": (None, str, "train or embed run directory (node classification)"),
        "corpus": (None, str, "corpus manifest or built-in corpus (graph classification)"),
        "K": (2, pos_int, "graph classification: hops"),
        "L": (2, pos_int, "graph classification: layers"),
        "folds": (10, pos_int, "graph classification: folds"),
        **PROBE,
    },
    "diagnose": {
        "dataset": ("cycle8", str, DATA["dataset"][2]),
        "data_seed": DATA["data_seed"],
        "laziness": (0.0, float, "curvature: idle mass of the neighborhood measure"),
        "K": (3, pos_int, "theorem1: degree of the regular instances"),
        "layers": (4, pos_int, "theorem1: depth of the reference network"),
        "instances": (20, pos_int, "theorem1: number of random instances"),
        "dim": (16, pos_int, "theorem1/smoothing: feature width"),
        "activation": ("tanh", _choice("identity", "tanh", "sigmoid", "leaky_relu"), "theorem1: activation"),
        "max_nodes": (14, pos_int, "theorem2: largest generated instance"),
        "depth": (10, pos_int, "smoothing: number of layers"),
        "hops": (2, pos_int, "smoothing: K of the asynchronous layer"),
    },
    "sweep-k": {**DATA, "Ks": ([1, 2, 3, 4], _k_list, "comma-separated hop counts"),
                "repeats": (3, pos_int, "training seeds per K"),
                **{k: v for k, v in MODEL.items() if k != "K"}, **WALK, **OPTIM, **PROBE},
}

HELP = {
    "ingest": "validate a TSV/CSV dataset and write a normalized bundle with checksums",
    "generate": "write a synthetic dataset bundle",
    "train": "train a model and write metrics, summary and checkpoint",
    "embed": "export embeddings of a trained run",
    "eval": "node classification on a trained run or graph classification on a corpus",
    "diagnose": "curvature, bound checks and over-smoothing diagnostics",
    "sweep-k": "train and evaluate once per hop count K",
}

DIAGNOSE_KINDS = ("curvature", "theorem1", "theorem2", "smoothing")


def _fmt_default(v):
    if isinstance(v, list):
        return ",".join(map(str, v))
    return "none" if v is None else str(v)


def _add_params(parser, table):
    for name, (default, kind, text) in table.items():
        flag = "--" + name.replace("_", "-")
        parser.add_argument(flag, dest=name, type=kind, default=argparse.SUPPRESS,
                            metavar=getattr(kind, "__name__", "VALUE").upper(),
                            help=f"{text} (default: {_fmt_default(default)})")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _add_params(common, GLOBAL)
    parser = _Parser(prog="mapn", description="Meta-path aggregation with selective state-space filtering.",
                     parents=[common])
    parser.add_argument("--version", action="version", version=f"mapn {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, table in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
        if name == "diagnose":
            p.add_argument("kind", type=_choice(*DIAGNOSE_KINDS),
                           help=f"one of {', '.join(DIAGNOSE_KINDS)}")
        _add_params(p, table)
    return parser


# -- config resolution -----------------------------------------------------------

def _coerce(kind, raw):
    if raw is None:
        return None
    if kind is _k_list and isinstance(raw, list):
        raw = ",".join(map(str, raw))
    if kind is _flag and not isinstance(raw, (bool, str)):
        raise TypeError(f"expected a boolean, got {raw!r}")
    return kind(raw)


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the command's config-file section and explicit flags."""
    table = {**GLOBAL, **COMMANDS[args.command]}
    values = {k: v[0] for k, v in table.items()}
    given = vars(args)
    cfg_path = given.get("config")
    if cfg_path:
        path = Path(cfg_path)
        if not path.is_file():
            raise CliError("config", f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CliError("config", f"{path}: invalid JSON ({e})")
        if not isinstance(doc, dict):
            raise CliError("config", f"{path}: top level must be an object of sections")
        unknown_sections = set(doc) - set(COMMANDS) - {"global"}
        if unknown_sections:
            raise CliError("config", f"{path}: unknown section(s) {sorted(unknown_sections)}")
        for section in ("global", args.command):
            body = doc.get(section, {})
            if not isinstance(body, dict):
                raise CliError("config", f"{path}: section {section!r} must be an object")
            allowed = GLOBAL if section == "global" else table
            bad = sorted(set(body) - set(allowed) - {"config"})
            if bad:
                raise CliError("config", f"{path}: unknown key(s) in [{section}]: {', '.join(bad)}")
            for k, raw in body.items():
                try:
                    values[k] = _coerce(allowed[k][1], raw)
                except (argparse.ArgumentTypeError, ValueError, TypeError) as e:
                    raise CliError("config", f"{path}: [{section}] {k}: {e}")
    for k in table:
        if k in given:
            values[k] = given[k]
    if args.command == "diagnose":
        values["kind"] = args.kind
    return values


# -- datasets ----------------------------------------------------------------------

def _structural(graph_fn, n, seed):
    return graph_fn(np.random.default_rng(seed).standard_normal((n, 4)))


def builtin_dataset(name: str, seed: int) -> HeteroGraph:
    if name == "synth-sbm":
        return generate_synthetic("homophilous-sbm", 90, 3, 0.3, 0.02, 8, seed)
    if name == "synth-hetero-sbm":
        return generate_synthetic("heterophilous-sbm", 90, 2, 0.0, 3 / 45, 4, seed, feature_noise=2.0)
    if name == "synth-academic":
        return generate_synthetic("hetero-academic", 120, 3, 0.2, 0.01, 8, seed)
    if name == "sbm-200":
        return generate_synthetic("homophilous-sbm", 200, 3, 0.3, 0.02, 8, seed)
    if name == "hetero-sbm-200":
        return generate_synthetic("heterophilous-sbm", 200, 2, 0.0, 0.03, 4, seed, feature_noise=2.0)
    if name == "cycle8":
        return _structural(lambda f: cycle_graph(8, f), 8, seed)
    if name == "cycle12":
        return _structural(lambda f: cycle_graph(12, f), 12, seed)
    if name == "complete5":
        return _structural(lambda f: complete_graph(5, f), 5, seed)
    if name == "circulant8":
        return _structural(lambda f: regular_circulant(8, 4, f), 8, seed)
    if name == "star6":
        return _structural(lambda f: star_graph(6, f), 7, seed)
    raise KeyError(name)


def builtin_corpus(seed: int) -> list[HeteroGraph]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(80):
        n = int(rng.integers(6, 13))
        feats = 1.0 + 0.1 * rng.standard_normal((n, 2))
        g = cycle_graph(n, feats) if i % 2 == 0 else star_graph(n - 1, feats)
        g.graph_label = i % 2
        out.append(g)
    return out


def load_dataset(name: str, seed: int) -> HeteroGraph:
    if name in DATASETS and name != "cycles-vs-stars":
        return builtin_dataset(name, seed)
    path = Path(name)
    if not path.is_dir():
        raise CliError("dataset", f"unknown dataset {name!r}: not a built-in name and not a directory")
    for required in ("nodes.tsv", "edges.tsv"):
        if not (path / required).is_file():
            raise CliError("dataset", f"missing {path / required}")
    return load_bundle(path)


def load_corpus_arg(name: str, seed: int) -> list[HeteroGraph]:
    if name == "cycles-vs-stars":
        return builtin_corpus(seed)
    path = Path(name)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise CliError("dataset", f"corpus manifest not found: {path}")
    return load_corpus(path)


# -- run bundles ---------------------------------------------------------------------

def run_dir(values: dict, command: str) -> Path:
    base = Path(values["out_dir"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    stem = f"{command}-{stamp}-seed{values['seed']}"
    out = base / stem
    i = 1
    while out.exists():
        out = base / f"{stem}-{i}"
        i += 1
    out.mkdir(parents=True)
    return out


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _bundle_manifest(root: Path, extra: dict) -> dict:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    return {**extra, "files": {str(p.relative_to(root)): _sha256(p) for p in files}}


def _echo_config(out: Path, values: dict) -> None:
    record = {k: v for k, v in values.items() if k not in ("out_dir", "config")}
    write_json(out / "config.json", record)


def _graph_counts(g: HeteroGraph) -> dict:
    return {"nodes": g.num_nodes, "edges": int(len(g.edges)), "types": list(g.type_names),
            "relations": list(g.relation_names), "labeled": len(g.labels or {})}


# -- commands ----------------------------------------------------------------------------

def cmd_ingest(v: dict, out: Path) -> dict:
    if v["corpus"]:
        graphs = load_corpus_arg(v["corpus"], v["seed"])
        save_corpus(graphs, out / "dataset")
        counts = {"graphs": len(graphs), "nodes": sum(g.num_nodes for g in graphs),
                  "edges": sum(int(len(g.edges)) for g in graphs)}
    else:
        for key in ("nodes", "edges"):
            if not v[key]:
                raise CliError("usage", f"ingest needs --{key} (or --corpus)", EXIT_USAGE)
        for key in ("nodes", "edges", "labels"):
            if v[key] and not Path(v[key]).is_file():
                raise CliError("input", f"{key} file not found: {v[key]}")
        if v["features"] and not Path(v["features"]).exists():
            raise CliError("input", f"features file not found: {v['features']}")
        g = load_graph(v["nodes"], v["edges"], v["features"], v["labels"])
        save_graph(g, out / "dataset")
        counts = _graph_counts(g)
    manifest = _bundle_manifest(out / "dataset", {"counts": counts})
    write_json(out / "dataset" / "manifest.json", manifest)
    write_json(out / "manifest.json", manifest)
    return {"counts": counts}


def cmd_generate(v: dict, out: Path) -> dict:
    seed = v["seed"]
    try:
        g = generate_synthetic(v["kind"], v["n_nodes"], v["n_classes"], v["p_in"], v["p_out"],
                               v["feature_dim"], seed, v["feature_noise"])
    except ValueError as e:
        raise CliError("usage", str(e), EXIT_USAGE)
    save_graph(g, out / "dataset")
    manifest = _bundle_manifest(out / "dataset", {"counts": _graph_counts(g)})
    write_json(out / "dataset" / "manifest.json", manifest)
    write_json(out / "manifest.json", manifest)
    return {"counts": manifest["counts"]}


def train_config(v: dict, K: int | None = None, seed: int | None = None):
    from .train import TrainConfig
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v[k] for k in names if k in v}
    kw["max_epochs"] = v["epochs"]
    kw["seed"] = v["seed"] if seed is None else seed
    if K is not None:
        kw["K"] = K
    try:
        return TrainConfig(**kw)
    except ValueError as e:
        raise CliError("usage", str(e), EXIT_USAGE)


def _data_seed(v: dict) -> int:
    return v["seed"] if v.get("data_seed") is None else v["data_seed"]


def _dump_samples(v: dict, result, graph) -> None:
    target = Path(v["dump_samples"])
    target.mkdir(parents=True, exist_ok=True)
    cfg = train_config(v)
    for i, (path, ps) in enumerate(zip(result.model.paths, result.model.samples)):
        dump_neighbor_sets(ps.sets, graph, target / f"neighbors-{i}-{path.name}.tsv")
        ts = sample_triples(graph, path, cfg.window, cfg.negatives_per_positive, cfg.walk_config(),
                            salt=i, workers=v["workers"])
        dump_triples(ts, graph, target / f"triples-{i}-{path.name}.tsv")


def cmd_train(v: dict, out: Path) -> dict:
    from .train import train
    graph = load_dataset(v["dataset"], _data_seed(v))
    cfg = train_config(v)
    metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n")
    timing_fh = open(out / "timing.jsonl", "w", encoding="utf-8", newline="\n")

    def on_epoch(epoch, loss, lr, ms):
        metrics_fh.write(json.dumps({"epoch": epoch, "loss": loss, "lr": lr}) + "\n")
        timing_fh.write(json.dumps({"epoch": epoch, "wall_ms": round(ms, 3)}) + "\n")

    try:
        result = train(graph, default_meta_paths(graph), cfg, workers=v["workers"], on_epoch=on_epoch)
    except ValueError as e:
        raise CliError("train", str(e))
    finally:
        metrics_fh.close()
        timing_fh.close()
    result.store.save(out / "checkpoint.bin")
    if v["dump_samples"]:
        _dump_samples(v, result, graph)
    m = result.metrics
    summary = {"final_loss": m.losses[-1] if m.losses else None, "best_loss": m.best_loss,
               "best_epoch": m.best_epoch, "epochs_run": len(m.losses), "stopped_early": m.stopped_early,
               "parameters": result.store.size(), **m.results}
    write_json(out / "summary.json", summary)
    return summary


def _load_trained(run: str, workers: int):
    """Rebuild a trained model from a train bundle or an embed bundle."""
    from .model import MAPN
    path = Path(run)
    cfg_file = path / "train_config.json"
    if not cfg_file.is_file():
        cfg_file = path / "config.json"
    for f in (cfg_file, path / "checkpoint.bin"):
        if not f.is_file():
            raise CliError("input", f"missing {f}")
    v = json.loads(cfg_file.read_text(encoding="utf-8"))
    if "dataset" not in v or "epochs" not in v:
        raise CliError("input", f"{cfg_file} is not a training configuration")
    graph = load_dataset(v["dataset"], _data_seed(v))
    cfg = train_config(v)
    store = loads((path / "checkpoint.bin").read_bytes())
    model = MAPN(graph, default_meta_paths(graph), cfg.model_config(), seed=cfg.seed, store=store)
    model.sample(cfg.walk_config(), salt=0, workers=workers)
    return model, v


def write_embeddings(path: Path, model) -> None:
    emb = model.embed()
    ids = model.graph.original_ids
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row, node in zip(emb, model.anchor_nodes):
            fh.write(ids[node] + "\t" + ",".join(f"{x:.17g}" for x in row) + "\n")


def cmd_embed(v: dict, out: Path) -> dict:
    if not v["run"]:
        raise CliError("usage", "embed needs --run <train run directory>", EXIT_USAGE)
    model, train_values = _load_trained(v["run"], v["workers"])
    write_embeddings(out / "embeddings.tsv", model)
    write_json(out / "train_config.json", train_values)
    shutil.copyfile(Path(v["run"]) / "checkpoint.bin", out / "checkpoint.bin")
    summary = {"nodes": len(model.anchor_nodes), "dim": model.cfg.d,
               "sha256": _sha256(out / "embeddings.tsv")}
    write_json(out / "summary.json", summary)
    return summary


def cmd_eval(v: dict, out: Path) -> dict:
    from .train import GraphClsConfig, anchor_labels, eval_graph_classification, eval_node_classification
    if bool(v["run"]) == bool(v["corpus"]):
        raise CliError("usage", "eval needs exactly one of --run or --corpus", EXIT_USAGE)
    if v["corpus"]:
        corpus = load_corpus_arg(v["corpus"], v["seed"])
        try:
            res = eval_graph_classification(corpus, GraphClsConfig(v["K"], v["L"], v["folds"], v["seed"]))
        except ValueError as e:
            raise CliError("data", str(e))
        res = {"task": "graph", **res}
    else:
        model, _ = _load_trained(v["run"], v["workers"])
        try:
            rows, y = anchor_labels(model)
        except ValueError as e:
            raise CliError("data", str(e))
        res = {"task": "node", **eval_node_classification(model.embed()[rows], y, seed=v["seed"],
                                                          n_splits=v["probe_splits"])}
    write_json(out / "metrics.json", res)
    return res


def cmd_diagnose(v: dict, out: Path) -> dict:
    from . import diagnostics as dg
    kind = v["kind"]
    if kind == "curvature":
        graph = load_dataset(v["dataset"], _data_seed(v))
        try:
            rep = dg.curvature_report(graph, v["laziness"], v["workers"])
        except ValueError as e:
            raise CliError("data", str(e))
        ids = graph.original_ids
        rows = [{"src": ids[r["src"]], "dst": ids[r["dst"]], "kappa": r["kappa"]} for r in rep.rows()]
        summary = {k: val for k, val in rep.to_dict().items() if k not in ("edges", "kappa")}
        dg.write_report(out, "curvature", summary, rows)
        return summary
    if kind == "theorem1":
        if v["K"] < 2:
            raise CliError("usage", "theorem1 needs --K >= 2", EXIT_USAGE)
        reps = dg.theorem1_suite((v["K"],), v["instances"], v["layers"], v["dim"], v["activation"],
                                 seed=v["seed"])
        rows = [asdict(r) for r in reps]
        summary = {"checks": len(rows), "violations": sum(not r.holds for r in reps),
                   "holds": all(r.holds for r in reps),
                   "max_ratio": max(r.lhs / (r.C * r.rhs) for r in reps if r.C * r.rhs > 0)}
        dg.write_report(out, "theorem1", summary, rows)
        return summary
    if kind == "theorem2":
        reps = dg.theorem2_suite(v["max_nodes"], seed=v["seed"])
        rows = [{"instance": name, **asdict(r)} for name, r in reps]
        checked = [r for _, r in reps if r.precondition]
        summary = {"instances": len(rows), "checked": len(checked),
                   "violations": sum(not r.holds for r in checked), "holds": all(r.holds for r in checked)}
        dg.write_report(out, "theorem2", summary, rows)
        return summary
    graph = load_dataset(v["dataset"], _data_seed(v))
    res = dg.smoothing_contrast(graph, v["depth"], v["hops"], v["dim"], seed=v["seed"])
    rows = [{"layer": i, "mean": res["mean"][i], "async_skip": res["async_skip"][i],
             "async_noskip": res["async_noskip"][i]} for i in range(v["depth"] + 1)]
    summary = {"ratio_at_depth": res["ratio_at_depth"],
               "mean_monotone": bool(all(b <= a + 1e-12 for a, b in zip(res["mean"], res["mean"][1:])))}
    dg.write_report(out, "smoothing", summary, rows)
    return summary


def sweep_point(graph: HeteroGraph, v: dict, K: int, seed: int, workers: int = 1) -> float:
    """Test accuracy of one trained model: the supervised head when
    ``supervised`` is set, otherwise an affine probe on the frozen embeddings."""
    from .train import anchor_labels, eval_node_classification, train
    cfg = train_config(v, K=K, seed=seed)
    result = train(graph, default_meta_paths(graph), cfg, workers=workers)
    if cfg.supervised:
        return result.metrics.results["test_accuracy"]
    rows, y = anchor_labels(result.model)
    return eval_node_classification(result.model.embed()[rows], y, seed=seed,
                                    n_splits=v["probe_splits"])["mean"]


def cmd_sweep_k(v: dict, out: Path) -> dict:
    graph = load_dataset(v["dataset"], _data_seed(v))
    table = []
    for K in v["Ks"]:
        try:
            accs = [sweep_point(graph, v, K, v["seed"] + r, v["workers"]) for r in range(v["repeats"])]
        except ValueError as e:
            raise CliError("train", str(e))
        table.append({"K": K, "accuracy_mean": float(np.mean(accs)), "accuracy_std": float(np.std(accs)),
                      "accuracies": accs})
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("K,accuracy_mean,accuracy_std\n")
        for row in table:
            fh.write(f"{row['K']},{row['accuracy_mean']:.6f},{row['accuracy_std']:.6f}\n")
    summary = {"rows": table}
    write_json(out / "summary.json", summary)
    return summary


HANDLERS = {"ingest": cmd_ingest, "generate": cmd_generate, "train": cmd_train, "embed": cmd_embed,
            "eval": cmd_eval, "diagnose": cmd_diagnose, "sweep-k": cmd_sweep_k}


def _validate_paths(v: dict) -> None:
    for key in ("run",):
        if v.get(key) and not Path(v[key]).is_dir():
            raise CliError("input", f"run directory not found: {v[key]}")
    ds = v.get("dataset")
    if ds and ds not in DATASETS and not Path(ds).is_dir():
        raise CliError("dataset", f"unknown dataset {ds!r}: not a built-in name and not a directory")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise CliError("usage", "missing command; see mapn --help", EXIT_USAGE)
        values = resolve(args)
        _validate_paths(values)
        out = run_dir(values, args.command)
        _echo_config(out, values)
        result = HANDLERS[args.command](values, out)
        print(json.dumps({"run_dir": str(out), **{k: val for k, val in result.items() if k != "rows"}},
                         sort_keys=True, default=_json_default))
        return 0
    except CliError as e:
        print(f"ERROR {e.code}: {' '.join(str(e).split())}", file=sys.stderr)
        return e.status
    except (GraphFormatError, KeyError, FileNotFoundError) as e:
        print(f"ERROR input: {' '.join(str(e).split())}", file=sys.stderr)
        return EXIT_FAILURE
    except (ValueError, FloatingPointError, OSError) as e:
        print(f"ERROR runtime: {' '.join(str(e).split())}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

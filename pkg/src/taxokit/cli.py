"""Command-line entry point: ``taxokit <command> ...``.

Exit codes: 0 success, 1 usage error, 2 unreadable or invalid input,
3 backend failure. Errors are reported as one line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

from . import __version__
from .backends import RecordingBackend
from .config import RunConfig, build_chat, build_embedder, load_config
from .errors import BackendError, DatasetFormatError, PipelineError, TaxoError
from .instructions import (
    DEFAULT_MAX_SUBSETS,
    DEFAULT_SUBSET_SIZE,
    gen_parent_finding_supervision,
    gen_sibling_recovery_supervision,
    write_dataset,
)
from .metrics import (
    EvalReport,
    MembershipOracle,
    accuracy,
    average_precision_at_k,
    parent_precision_at_k,
    sibling_precision_at_k,
    sweep_csv,
    wu_palmer,
)
from .pipelines import (
    ExpansionResult,
    Prediction,
    SweepQuery,
    construct_taxonomy,
    expand_entity_set,
    expand_taxonomy,
    shuffle_sweep,
)
from .taxonomy import Entity, SeedSet, Taxonomy, as_entity, dump_taxonomy, load_taxonomy, read_entity_list

log = logging.getLogger("taxokit")

EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_BACKEND = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _write_json(path: Path, data: object) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path: str | Path) -> object:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON: {exc.msg}", line=exc.lineno) from None


def _sha256(data: object) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def _input_taxonomy(path: str, root_label: str | None = None) -> Taxonomy:
    return load_taxonomy(path, root_label=root_label)


def _chat(cfg: RunConfig):
    chat = build_chat(cfg)
    return RecordingBackend(chat) if cfg.record else chat


def _finish(cfg: RunConfig, chat) -> None:
    if isinstance(chat, RecordingBackend):
        chat.save(cfg.path(cfg.record), merge=True)


def _pipeline(cfg: RunConfig, args: argparse.Namespace):
    pc = cfg.pipeline_config()
    overrides = {}
    for flag in ("k_candidates", "max_shuffles", "target_entities"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[flag] = v
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = args.seed
    return replace(pc, **overrides) if overrides else pc


# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seed = cfg.rng_seed if args.seed is None else args.seed
    t = _input_taxonomy(args.taxonomy, cfg.root_label)
    embed = build_embedder(cfg)
    pf = gen_parent_finding_supervision(t, args.k, args.r, embed, rng_seed=seed)
    sr = gen_sibling_recovery_supervision(t, args.subset_size, args.max_subsets, rng_seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(pf, out / "parent_finding.jsonl")
    write_dataset(sr, out / "sibling_recovery.jsonl")
    settings = {
        "k": args.k,
        "r": args.r,
        "subset_size": args.subset_size,
        "max_subsets": args.max_subsets,
        "rng_seed": seed,
        "embedding": cfg.embedding.model_dump(),
    }
    manifest = {
        "taxonomy": Path(args.taxonomy).name,
        "taxonomy_sha256": hashlib.sha256(Path(args.taxonomy).read_bytes()).hexdigest(),
        "nodes": len(t),
        "files": {"parent_finding.jsonl": len(pf), "sibling_recovery.jsonl": len(sr)},
        "counts": {**pf.counts(), **sr.counts()},
        "config": settings,
        "config_hash": _sha256(settings),
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(pf)} parent-finding and {len(sr)} sibling-recovery tuples to {out}")
    return 0


def cmd_expand_set(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seeds = SeedSet(tuple(read_entity_list(args.seeds)))
    chat = _chat(cfg)
    parent = Entity(args.parent) if args.parent else None
    res = expand_entity_set(seeds, chat, build_embedder(cfg), _pipeline(cfg, args), parent_override=parent)
    _finish(cfg, chat)
    _write_json(Path(args.out), res.to_dict())
    print(f"parent {res.parent_used.surface!r}: {len(res.ranked)} entities from {res.permutations_used} prompt(s)")
    return 0


def cmd_expand_taxo(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    t = _input_taxonomy(args.taxonomy, cfg.root_label)
    new = read_entity_list(args.new_entities)
    chat = _chat(cfg)
    expanded, preds = expand_taxonomy(t, new, chat, build_embedder(cfg), _pipeline(cfg, args))
    _finish(cfg, chat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_taxonomy(expanded, out / "taxonomy.tsv")
    _write_json(out / "predictions.json", {"predictions": [p.to_dict() for p in preds]})
    attached = sum(p.parent is not None for p in preds)
    print(f"attached {attached} of {len(preds)} entities")
    return 0


def cmd_construct(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    label = args.root_label or cfg.root_label
    seed_taxo = _input_taxonomy(args.taxonomy, label)
    chat = _chat(cfg)
    res = construct_taxonomy(seed_taxo, chat, build_embedder(cfg), _pipeline(cfg, args), root_label=label)
    _finish(cfg, chat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_taxonomy(res.taxonomy, out / "taxonomy.tsv")
    _write_json(out / "construct.json", res.to_dict())
    print(f"taxonomy grew from {len(seed_taxo)} to {len(res.taxonomy)} nodes")
    return 0


def _eval_set(pred: object, gold: Taxonomy, ks: list[int]) -> tuple[dict[str, float], int]:
    items = pred if isinstance(pred, list) else [pred]
    results = []
    for d in items:
        res = ExpansionResult.from_dict(d)
        results.append((res.entities, MembershipOracle.for_seeds(gold, res.seeds)))
    if not results:
        raise DatasetFormatError("prediction file holds no expansion results")
    metrics = {
        f"MAP@{k}": sum(average_precision_at_k(r, o, k) for r, o in results) / len(results) for k in ks
    }
    return metrics, len(results)


def _eval_taxo(pred: object, gold: Taxonomy) -> tuple[dict[str, float], int]:
    rows = pred["predictions"] if isinstance(pred, dict) else pred
    preds = [Prediction.from_dict(d) for d in rows]
    if not preds:
        raise DatasetFormatError("prediction file holds no predictions")
    pairs = []
    wup = 0.0
    for p in preds:
        if p.entity not in gold:
            raise DatasetFormatError(f"entity {p.entity.surface!r} is not in the gold taxonomy")
        truth = gold.parent(p.entity)
        pairs.append((p.parent, truth))
        if p.parent is not None and p.parent in gold:
            wup += wu_palmer(gold, gold.get(p.parent), truth)
    return {"Acc": accuracy(pairs), "Wu&P": wup / len(preds)}, len(preds)


def _eval_construct(pred: object, gold: Taxonomy, ks: list[int]) -> tuple[dict[str, float], int]:
    layers = [l for l in pred["layers"] if l.get("expansion")]
    if not layers:
        raise DatasetFormatError("construction result has no expanded layer")
    last = max(layers, key=lambda l: l["layer"])
    expansion = ExpansionResult.from_dict(last["expansion"])
    oracle = MembershipOracle.for_layer(gold, last["layer"])
    attached = {p.entity: p.parent for p in map(Prediction.from_dict, last["predictions"])}
    expanded = expansion.entities
    gold_parent = {n: gold.parent(n) for n in gold.nodes}
    pairs = [(e, attached.get(e)) for e in expanded]
    metrics: dict[str, float] = {}
    for k in ks:
        metrics[f"Sibling P@{k}"] = sibling_precision_at_k(expanded, oracle, k)
        metrics[f"Parent P@{k}"] = parent_precision_at_k(pairs, gold_parent, k)
    return metrics, 1


def cmd_eval(args: argparse.Namespace) -> int:
    gold = _input_taxonomy(args.gold)
    pred = _read_json(args.pred)
    try:
        if args.task == "set":
            metrics, n = _eval_set(pred, gold, args.k)
        elif args.task == "taxo":
            metrics, n = _eval_taxo(pred, gold)
        else:
            metrics, n = _eval_construct(pred, gold, args.k)
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{args.pred}: unexpected prediction layout ({exc})") from None
    fixtures = {"pred": Path(args.pred).name, "gold": Path(args.gold).name}
    report = EvalReport(args.task, metrics, n, fixtures)
    sys.stdout.write(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    sweep = cfg.sweep
    if sweep is None or not sweep.seed_sets:
        raise UsageError('sweep needs a "sweep" section with "seed_sets" in the config')
    gold_path = sweep.gold or cfg.gold
    if not gold_path:
        raise UsageError('sweep needs "sweep.gold" or "gold" in the config')
    gold = _input_taxonomy(str(cfg.path(gold_path)), cfg.root_label)
    queries = []
    for names in sweep.seed_sets:
        seeds = SeedSet(tuple(gold.get(as_entity(n)) for n in names))
        queries.append(SweepQuery(seeds, MembershipOracle.for_seeds(gold, seeds)))
    chat = _chat(cfg)
    k = args.k or sweep.k
    rows = shuffle_sweep(queries, chat, build_embedder(cfg), args.shuffles, _pipeline(cfg, args), k=k)
    _finish(cfg, chat)
    Path(args.out).write_text(sweep_csv(rows), encoding="utf-8")
    for count, value in rows:
        print(f"{count:>4}  MAP@{k} {value:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="taxokit", description="Instruction data and inference for taxonomy enrichment.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="build parent-finding and sibling-recovery datasets")
    g.add_argument("--taxonomy", required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--k", type=int, default=20, help="candidate parents per tuple")
    g.add_argument("--r", type=int, default=10, help="candidate shuffles per node")
    g.add_argument("--subset-size", type=int, default=DEFAULT_SUBSET_SIZE)
    g.add_argument("--max-subsets", type=int, default=DEFAULT_MAX_SUBSETS)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("expand-set", help="expand a seed entity set")
    s.add_argument("--seeds", required=True, help="file with one seed per line")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output JSON file")
    s.add_argument("--parent", help="use this class name instead of generating one")
    s.add_argument("--max-shuffles", dest="max_shuffles", type=int)
    s.add_argument("--target-entities", dest="target_entities", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_expand_set)

    x = sub.add_parser("expand-taxo", help="attach new entities to an existing taxonomy")
    x.add_argument("--taxonomy", required=True)
    x.add_argument("--new-entities", required=True, help="file with one entity per line")
    x.add_argument("--config", required=True)
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--k", dest="k_candidates", type=int)
    x.add_argument("--seed", type=int)
    x.set_defaults(func=cmd_expand_taxo)

    c = sub.add_parser("construct", help="grow a seed taxonomy layer by layer")
    c.add_argument("--taxonomy", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--root-label")
    c.add_argument("--k", dest="k_candidates", type=int)
    c.add_argument("--max-shuffles", dest="max_shuffles", type=int)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_construct)

    e = sub.add_parser("eval", help="score predictions against a gold taxonomy")
    e.add_argument("--task", required=True, choices=("set", "taxo", "construct"))
    e.add_argument("--pred", required=True)
    e.add_argument("--gold", required=True)
    e.add_argument("--k", type=_int_list, default=[10, 20], help="comma-separated cutoffs")
    e.add_argument("--out", help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="MAP@k of set expansion across shuffle budgets")
    w.add_argument("--shuffles", type=_int_list, default=[1, 2, 5, 10, 20])
    w.add_argument("--config", required=True)
    w.add_argument("--out", required=True, help="output CSV file")
    w.add_argument("--k", type=int)
    w.add_argument("--seed", type=int)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"taxokit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"taxokit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, PipelineError) as exc:
        print(f"taxokit: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except FileNotFoundError as exc:
        print(f"taxokit: error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT
    except (TaxoError, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"taxokit: error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

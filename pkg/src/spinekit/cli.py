"""``spine``: build, cost, search, ablate, exec and export from the command line.

Exit codes: 0 success, 1 validation failure or golden miss, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import golden
from .ablation import DAMAGE_ALIASES, TEMPLATES, apply_graph_damage, sample_fixed_candidate
from .cost_model import compare_models, conventions_from, count_model, render_json, render_table
from .errors import ConfigError, GraphValidationError, PlanError, ShapeError, SpecLoadError, SpineError
from .graph_ir import graph_to_json, infer_shapes, to_dot, validate_graph
from .model_zoo import HEAD_KINDS, ModelWithHead, attach_head, head_for, load_entry, parse_override
from .resampling import plan_edge

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("spinekit")


class UsageError(Exception):
    pass


class Invalid(Exception):
    pass


def _emit(obj, fmt: str, table: str | None = None) -> None:
    if fmt == "json":
        print(json.dumps(obj, sort_keys=True, indent=2))
    else:
        print(table if table is not None else json.dumps(obj, sort_keys=True, indent=2))


def _entry(name: str):
    try:
        return load_entry(name)
    except SpecLoadError as exc:
        if isinstance(exc.__cause__, GraphValidationError):
            raise Invalid(str(exc)) from exc
        raise UsageError(str(exc)) from exc
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _default_head(entry) -> str:
    return "classifier" if entry.graph.neck == "none" else "retinanet"


def _model(entry, head: str | None, overrides: list[str]) -> ModelWithHead:
    if head == "none":
        return ModelWithHead(entry.graph)
    kw = dict(parse_override(o) for o in overrides)
    return attach_head(entry.graph, head_for(entry, head or _default_head(entry), **kw))


# --- verbs ------------------------------------------------------------------

def cmd_build(args) -> int:
    entry = _entry(args.model)
    g = entry.graph
    report = validate_graph(g)
    plans = {(e.parent, e.child): plan_edge(g, e).to_dict() for e in g.edges}
    doc = json.loads(graph_to_json(g, plans))
    doc["valid"] = not report
    table = "\n".join(
        [f"{g.name}: {len(g.stem)} stem + {len(g.permuted)} permuted blocks ({g.num_blocks} with repeats), {len(g.edges)} edges"]
        + [f"  {b.id:<10} {b.label():<20} ordering {b.ordering}{' output' if b.is_output else ''}" for b in g.blocks]
    )
    _emit(doc, args.format, table)
    return EXIT_OK if not report else EXIT_INVALID


def cmd_cost(args) -> int:
    conv = conventions_from(args.shortcut, args.se_ratio)
    names = [args.model] + list(args.compare or [])
    row = None
    if args.golden:
        table_rows = golden.load_table(args.golden)
        head = table_rows[0].head
        row = golden.find_row(args.golden, names[0], args.resolution)
        resolution = row.resolution
    else:
        head = args.head
        resolution = args.resolution
    reports = []
    for name in names:
        entry = _entry(name)
        m = _model(entry, head, args.override or [])
        res = resolution or entry.resolution.get(m.head.kind if m.head else "retinanet") or 640
        reports.append(count_model(m, res, conv))
    rows = compare_models(reports)
    out: dict = {"rows": rows, "reports": [r.to_dict() for r in reports]}
    text = render_table(rows)
    code = EXIT_OK
    if row is not None:
        chk = golden.GoldenCheck(row, reports[0].madds, reports[0].params)
        out["golden"] = chk.to_dict()
        text += "\n" + chk.summary()
        code = EXIT_OK if chk.ok else EXIT_INVALID
    _emit(out, args.format, text)
    return code


def cmd_search(args) -> int:
    from .search import SearchSpaceConfig, reward_from_spec, run_search, spinenet49_space

    if args.space in (None, "spinenet49"):
        cfg = spinenet49_space()
    else:
        try:
            cfg = SearchSpaceConfig.from_dict(json.loads(Path(args.space).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read search space {args.space}: {exc}") from exc
    reward = reward_from_spec(args.reward)
    sink = open(args.history, "w") if args.history else None
    try:
        result = run_search(
            cfg,
            args.controller,
            reward,
            args.budget,
            args.seed,
            workers=args.workers,
            on_record=(lambda rec: sink.write(rec.to_json() + "\n")) if sink else None,
        )
    finally:
        if sink:
            sink.close()
    best = result.best
    doc = {
        "best_reward": best.reward,
        "best": best.to_dict(),
        "budget": args.budget,
        "seed": args.seed,
        "controller": args.controller,
        "failed": sum(1 for r in result.history if r.error),
        "best_so_far": result.best_so_far(),
    }
    text = f"{args.controller} search, {args.budget} samples, seed {args.seed}: best reward {best.reward}"
    _emit(doc, args.format, text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.template:
        import numpy as np

        g = sample_fixed_candidate(args.template, np.random.default_rng(args.seed)).graph
    else:
        g = _entry(args.model).graph
    if args.damage:
        g = apply_graph_damage(g, args.damage, distance=args.distance)
    if args.export == "dot":
        sys.stdout.write(to_dot(g))
    else:
        sys.stdout.write(graph_to_json(g))
    return EXIT_OK


def cmd_exec(args) -> int:
    from .executor import forward_all, forward_classifier, init_weights, random_input, write_tensors

    entry = _entry(args.model)
    m = _model(entry, "classifier" if args.classify else "none", args.override or [])
    x = random_input(args.input_res, args.seed)
    w = init_weights(m, args.seed)
    feats = forward_all(m, w, x, activation=args.activation)
    expected = infer_shapes(m.graph, args.input_res, relaxed=True)
    shapes = {k: list(v.shape) for k, v in feats.items()}
    mismatch = sorted(k for k in expected if tuple(shapes.get(k, ())) != expected[k])
    doc: dict = {"model": m.name, "input_res": args.input_res, "seed": args.seed, "shape_mismatch": mismatch}
    if args.dump_shapes:
        doc["shapes"] = shapes
    if args.classify:
        probs = forward_classifier(m, w, x, activation=args.activation)
        doc["top5"] = [int(i) for i in probs.argsort()[::-1][:5]]
        doc["prob_sum"] = float(probs.sum())
    if args.dump_dir:
        doc["dumped"] = [str(p) for p in write_tensors(Path(args.dump_dir), feats)]
    lines = [f"{m.name} @ {args.input_res}: {len(feats)} tensors, shape mismatches: {mismatch or 'none'}"]
    if args.dump_shapes:
        lines += [f"  {k:<12} {tuple(v)}" for k, v in shapes.items()]
    _emit(doc, args.format, "\n".join(lines))
    return EXIT_OK if not mismatch else EXIT_INVALID


def cmd_export(args) -> int:
    g = _entry(args.model).graph
    text = to_dot(g) if args.format == "dot" else graph_to_json(g)
    if args.output:
        try:
            Path(args.output).write_text(text)
        except OSError as exc:
            print(f"error: cannot write {args.output}: {exc}", file=sys.stderr)
            return EXIT_INVALID
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spine", description="Scale-permuted backbone toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_, formats=("json", "table"), default="table"):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--format", choices=formats, default=default)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(fn=fn)
        return sp

    sp = verb("build", cmd_build, "load, validate and describe a model")
    sp.add_argument("--model", required=True)

    sp = verb("cost", cmd_cost, "count multiply-adds and parameters")
    sp.add_argument("--model", required=True)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--head", choices=HEAD_KINDS + ("none",))
    sp.add_argument("--golden", choices=golden.available())
    sp.add_argument("--override", action="append", metavar="head.FIELD=VALUE")
    sp.add_argument("--compare", nargs="+", metavar="MODEL")
    sp.add_argument("--shortcut", choices=("when_needed", "first_copy"))
    sp.add_argument("--se-ratio")

    sp = verb("search", cmd_search, "run a controller over the search space", default="json")
    sp.add_argument("--space", help="search space JSON, or 'spinenet49' (default)")
    sp.add_argument("--controller", choices=("random", "evolution"), default="random")
    sp.add_argument("--budget", type=int, default=100)
    sp.add_argument("--reward", default="builtin:neg-flops")
    sp.add_argument("--history", help="write one JSON line per candidate here")
    sp.add_argument("--workers", type=int, default=1)

    sp = verb("ablate", cmd_ablate, "fixed orderings and graph damage")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--template", choices=sorted(TEMPLATES))
    sp.add_argument("--damage", choices=sorted(DAMAGE_ALIASES))
    sp.add_argument("--distance", choices=("ordering", "level"), default="ordering")
    sp.add_argument("--export", choices=("dot", "json"), default="json")

    sp = verb("exec", cmd_exec, "numeric forward pass on a random input")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input-res", type=int, default=128)
    sp.add_argument("--dump-shapes", action="store_true")
    sp.add_argument("--dump-dir")
    sp.add_argument("--classify", action="store_true")
    sp.add_argument("--activation", choices=("relu", "swish"), default="relu")
    sp.add_argument("--override", action="append", metavar="head.FIELD=VALUE")

    sp = verb("export", cmd_export, "serialize a model graph", formats=("json", "dot"), default="json")
    sp.add_argument("--model", required=True)
    sp.add_argument("--output")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Invalid, GraphValidationError, PlanError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SpineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

"""``vpg`` command line.  Exit status: 0 ok, 1 usage/config error, 2 runtime error."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from .config import EngineConfig
from .errors import ConfigError

log = logging.getLogger("vpg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        extra = getattr(record, "fields", None)
        if extra:
            out.update(extra)
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out, sort_keys=True, default=str)


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time, so redirection keeps working."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def setup_logging(level: str = "info") -> None:
    handler = _StderrHandler()
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _common_flags(prefix: str = "") -> argparse.ArgumentParser:
    """Flags accepted both before and after the subcommand; the later position wins."""
    c = _Parser(add_help=False)
    c.add_argument("--config", dest=prefix + "config", help="TOML engine configuration")
    c.add_argument("--set", dest=prefix + "overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    c.add_argument("--store", dest=prefix + "store", help="feature store directory (overrides store_dir)")
    c.add_argument("--index", dest=prefix + "index", help="index directory (overrides index_dir)")
    c.add_argument("--log-level", dest=prefix + "log_level", choices=["debug", "info", "warning", "error"])
    return c


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vpg", description="Visual product graph: scene <-> product retrieval at desk scale.", parents=[_common_flags()])
    top = p.add_subparsers(dest="group", required=True, parser_class=_Parser)
    common = _common_flags("sub_")

    class _Sub:
        """Subparser factory that attaches the common flags to every leaf command."""

        def __init__(self, action):
            self.action = action

        def add_parser(self, name, **kw):
            return self.action.add_parser(name, parents=[common], **kw)

    sub = _Sub(top)

    synth = _Sub(top.add_parser("synth", help="synthetic world").add_subparsers(dest="cmd", required=True, parser_class=_Parser))
    g = synth.add_parser("generate", help="write scenes, products, truth, logs and detection cases")
    g.add_argument("--out", required=True, help="scenes JSONL path, or a directory to write every artifact into")
    g.add_argument("--products", help="products JSONL path (default: next to the scenes file)")
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--n-products", type=int)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--log-queries", type=int, default=50)

    store = _Sub(top.add_parser("store", help="feature store").add_subparsers(dest="cmd", required=True, parser_class=_Parser))
    b = store.add_parser("backfill", help="bulk-load scene and product features")
    b.add_argument("--input", help="scene entries JSONL")
    b.add_argument("--products", help="product entries JSONL")
    store.add_parser("stats", help="entry counts, segment sizes and hit rate")

    index = _Sub(top.add_parser("index", help="object and product indexes").add_subparsers(dest="cmd", required=True, parser_class=_Parser))
    ib = index.add_parser("build", help="filter the corpus and build the object index")
    ib.add_argument("--products", help="also build the product catalog from this JSONL")
    ib.add_argument("--filters", help="corpus filter thresholds (key = value file)")
    ib.add_argument("--out", dest="out_index", help="index directory (same as --index)")
    ib.add_argument("--report", help="also write the build report JSON here")

    c = sub.add_parser("calibrate", help="fit the global relevance threshold")
    c.add_argument("--queries", type=int, help="number of calibration products (default from config)")

    query = _Sub(top.add_parser("query", help="retrieval").add_subparsers(dest="cmd", required=True, parser_class=_Parser))
    qr = query.add_parser("reverse", help="product -> scenes")
    qr.add_argument("--product", required=True)
    qr.add_argument("--calibration", help="calibration JSON (default: index dir)")
    qf = query.add_parser("forward", help="scene -> products")
    qf.add_argument("--scene", required=True, action="append", help="repeat for a batch")
    qf.add_argument("--ctx", default="", help="e.g. gender=f,country=US")

    trip = _Sub(top.add_parser("triplets", help="training data").add_subparsers(dest="cmd", required=True, parser_class=_Parser))
    tm = trip.add_parser("mine", help="hard triplets from engagement logs")
    tm.add_argument("--logs", required=True)
    tm.add_argument("--truth", help="world truth JSONL (default: regenerate the configured synthetic world)")
    tm.add_argument("--out", required=True)
    tm.add_argument("--hard-fraction", type=float, default=0.5)
    tm.add_argument("--target-size", type=int, help="default: as large as the hard supply allows")
    tm.add_argument("--window-days", type=int, default=30)
    tm.add_argument("--seed", type=int, default=7)
    tm.add_argument("--literal-hardness", action="store_true", help="use the inverted comparator for comparison runs")

    ev = _Sub(top.add_parser("eval", help="metrics").add_subparsers(dest="cmd", required=True, parser_class=_Parser))
    er = ev.add_parser("retrieval", help="precision@k from prediction JSONL against world truth")
    er.add_argument("--pred", required=True)
    er.add_argument("--truth", required=True)
    er.add_argument("--k", default="1,5")
    er.add_argument("--similar-tau", type=float, default=1.0)
    ed = ev.add_parser("detection", help="mAP and R@P90 over detection cases")
    ed.add_argument("--cases", required=True)
    ed.add_argument("--iou", type=float, default=0.5)

    s = sub.add_parser("serve", help="HTTP query service")
    s.add_argument("--host")
    s.add_argument("--port", type=int)

    prod = _Sub(top.add_parser("products", help="product catalog").add_subparsers(dest="cmd", required=True, parser_class=_Parser))
    pa = prod.add_parser("append", help="add a daily increment of products")
    pa.add_argument("--input", required=True)
    return p


def _merge_common(args) -> None:
    for name in ("config", "store", "index", "log_level"):
        later = getattr(args, "sub_" + name, None)
        if later is not None:
            setattr(args, name, later)
    args.overrides = list(args.overrides) + list(getattr(args, "sub_overrides", []))
    if getattr(args, "out_index", None):
        args.index = args.out_index
    args.log_level = args.log_level or "info"


def load_config(args) -> EngineConfig:
    from dataclasses import fields as dc_fields

    from .config import read_toml
    from .vision import WorldConfig

    data = read_toml(args.config) if args.config else {}
    world_keys = {f.name for f in dc_fields(WorldConfig)}
    if data and set(data) <= world_keys:
        data = {"world": data}  # a bare world.cfg of key = value lines
    if getattr(args, "filters", None):
        data.setdefault("filters", {}).update(read_toml(args.filters))
    overrides = list(args.overrides)
    if args.store:
        overrides.append(f"store_dir={json.dumps(args.store)}")
    if args.index:
        overrides.append(f"index_dir={json.dumps(args.index)}")
    for flag, key in (("n_scenes", "world.scenes"), ("n_products", "world.products"), ("noise_sigma", "world.noise_sigma"), ("seed", "world.seed")):
        if args.group == "synth" and getattr(args, flag, None) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    if args.group == "serve":
        if args.host:
            overrides.append(f"service.host={json.dumps(args.host)}")
        if args.port is not None:
            overrides.append(f"service.port={args.port}")
    return EngineConfig.build(data, overrides)


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--k must be a comma-separated list of integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise UsageError("--k values must be positive")
    return ks


def _read_json_lines(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
    return rows


def cmd_synth_generate(cfg: EngineConfig, args) -> dict:
    from .evaluation import detection_cases
    from .feature_store import scene_to_json
    from .triplets import synthetic_logs, write_jsonl
    from .vision import SyntheticWorld

    world = SyntheticWorld(cfg.world_config())
    target = Path(args.out)
    if target.suffix == ".jsonl":
        out, scenes_path = target.parent, target
    else:
        out, scenes_path = target, target / "scenes.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    products_path = Path(args.products) if args.products else out / "products.jsonl"
    products_path.parent.mkdir(parents=True, exist_ok=True)
    counts = {
        "scenes": write_jsonl(scenes_path, (scene_to_json(e) for e in world.scene_entries())),
        "products": write_jsonl(products_path, world.product_entries()),
        "truth": write_jsonl(out / "world.jsonl", world.truth_records()),
        "logs": write_jsonl(out / "logs.jsonl", synthetic_logs(world, min(args.log_queries, len(world.scenes)), seed=world.seed)),
        "cases": write_jsonl(out / "cases.jsonl", detection_cases(world)),
    }
    (out / "world.json").write_text(json.dumps(world.config.to_dict(), indent=2, sort_keys=True))
    return {"out": str(out), "written": counts}


def cmd_triplets_mine(cfg: EngineConfig, args, engine) -> dict:
    from .evaluation import TruthTable
    from .triplets import assemble_dataset, finalize_hard, read_logs_jsonl, write_jsonl

    if not 0.0 <= args.hard_fraction <= 1.0:
        raise UsageError("--hard-fraction must be in [0, 1]")
    if args.truth:
        truth = TruthTable.from_jsonl(args.truth)
    else:
        from .vision import SyntheticWorld

        truth = TruthTable.from_world(SyntheticWorld(cfg.world_config()))
    logs = list(read_logs_jsonl(args.logs))
    embedder = store_embedder(engine.store)
    hard, report = finalize_hard(logs, embedder, truth.is_match, args.window_days, args.literal_hardness)
    sig_of = {pid: sig for sig, pid in truth.product_id.items()}
    matches = sorted(
        (((scene, box), sig_of[pid]) for scene, objs in truth.scene_objects.items() for pid, box, _ in objs if pid in sig_of),
        key=lambda m: (m[0][0], m[0][1].as_list(), m[1]),
    )
    negatives = sorted(truth.product_id)
    if args.target_size is not None:
        target = args.target_size
    elif args.hard_fraction > 0:
        target = int(len(hard) / args.hard_fraction)
    else:
        target = len(hard)
    dataset = assemble_dataset(hard, matches, negatives, target, args.hard_fraction, args.seed, truth.is_match)
    report.written = write_jsonl(args.out, dataset)
    return {"out": args.out, **report.to_dict(), "hard_in_dataset": sum(t.kind == "hard" for t in dataset)}


def store_embedder(store):
    """Embeddings from the feature store: ``(scene, box)`` keys resolve to the best-overlapping object."""
    from .errors import UnknownEntityError

    def embed(key):
        if isinstance(key, tuple):
            sig, box = key
            entry = store.get(sig)
            if entry is None or not entry.objects:
                raise UnknownEntityError(f"no stored objects for {sig}")
            best = max(entry.objects, key=lambda o: o.box.iou(box))
            if best.box.iou(box) < 0.5:
                raise UnknownEntityError(f"no stored object of {sig} overlaps {box.as_list()}")
            return best.embedding
        entry = store.get(key)
        if entry is None:
            raise UnknownEntityError(f"{key} is not in the feature store")
        return entry.full_embedding

    return embed


def run(args, cfg: EngineConfig) -> dict | None:
    from .engine import Engine

    if args.group == "synth":
        return cmd_synth_generate(cfg, args)
    if args.group == "eval":
        from .evaluation import TruthTable, detection_report, read_cases_jsonl, retrieval_report

        if args.cmd == "retrieval":
            ks = _parse_ks(args.k)
            return retrieval_report(_read_json_lines(args.pred), TruthTable.from_jsonl(args.truth, args.similar_tau), ks)
        return detection_report(read_cases_jsonl(args.cases), args.iou)

    with Engine(cfg) as engine:
        if args.group == "store":
            if args.cmd == "stats":
                return engine.store.stats()
            if not args.input and not args.products:
                raise UsageError("store backfill needs --input and/or --products")
            return engine.backfill(args.input, args.products)
        if args.group == "index":
            report = engine.build_index(args.products)
            if args.report:
                Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True))
            return report
        if args.group == "calibrate":
            return engine.calibrate(args.queries)
        if args.group == "products":
            return engine.products_append(args.input)
        if args.group == "triplets":
            return cmd_triplets_mine(cfg, args, engine)
        if args.group == "query":
            if args.cmd == "reverse":
                if args.calibration:
                    from .reverse_stl import RelevanceCalibration

                    engine.calibration = RelevanceCalibration.load(args.calibration)
                return engine.reverse(args.product)
            from .forward_stl import UserContext

            try:
                ctx = UserContext.parse(args.ctx)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            if len(args.scene) == 1:
                return engine.forward(args.scene[0], ctx)
            return engine.forward_batch(args.scene, ctx)
        if args.group == "serve":
            from .service import serve

            serve(engine)
            return None
    raise UsageError(f"unknown command {args.group}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    _merge_common(args)
    setup_logging(args.log_level)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        for v in exc.violations:
            log.error("config violation: %s", v)
        return EXIT_USAGE
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_USAGE
    started = time.perf_counter()
    command = " ".join(x for x in (args.group, getattr(args, "cmd", None)) if x)
    try:
        result = run(args, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures: report and exit 2
        log.error("%s failed: %s", command, exc, extra={"fields": {"error": type(exc).__name__}})
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    log.info("%s done", command, extra={"fields": {"seconds": round(time.perf_counter() - started, 3)}})
    if result is not None:
        emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

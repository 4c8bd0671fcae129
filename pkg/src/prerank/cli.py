"""``prerank`` command line: gen-data, iqp, train, index, serve, score, eval, ablate, flops.

Errors print one line ``error <CODE>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .core import PrerankError, RequestContext, normalize_query, read_events, read_requests
from .iqp import DAY, DEFAULT_SLOTS, DEFAULT_WINDOWS, IQPBuilder, SignalStore, day_of

log = logging.getLogger("prerank")

SYNOPSIS = """usage: prerank [--seed N] [--config FILE] [--verbose] [--threads N] <command> ...

commands:
  gen-data   --out DIR                       write synthetic logs
  iqp build  --logs DIR --out STORE [--as-of TS] [--state FILE]
  iqp update --state FILE --logs DIR --out STORE [--as-of TS]
  iqp lookup --store STORE --item ID --query TEXT [--country CC]
  train      --data DIR --out CKPT [--variant V] [--remove R] [--metrics-log TSV]
  index build --model CKPT --data DIR --iqp STORE --out SNAPSHOT
  serve      --model CKPT --index SNAPSHOT [--port N] [--data DIR]
  score      --model CKPT --index SNAPSHOT --query TEXT [--candidates IDS] [--n-out N] [--explain]
  eval hits     --model CKPT --data DIR [--index SNAPSHOT] --out TSV
  eval sessions --logs DIR
  eval variants --data DIR --out DIR
  ablate     --remove NAME --data DIR --out DIR
  flops      --dim N [--iqp-features N] [--no-interactions]
"""


class UsageError(PrerankError):
    code = "USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config


def load_config(args):
    from .experiments import ExperimentConfig, apply_overrides
    from .training import parse_flat_config

    cfg = ExperimentConfig()
    if args.config:
        apply_overrides(cfg, parse_flat_config(Path(args.config).read_text(encoding="utf-8")))
    for kv in args.set or ():
        k, sep, v = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        apply_overrides(cfg, {k.strip(): v.strip()})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_data(data_dir, cfg):
    from .synthetic import load_synthetic

    data = load_synthetic(data_dir)
    cfg.synthetic = data.config
    return data


def _read_users(logs: Path) -> dict:
    from .synthetic import read_users

    p = logs / "users.tsv"
    return read_users(p) if p.exists() else {}


def _end_as_of(events, requests) -> int:
    last = max([e.timestamp for e in events] + [r.timestamp for r in requests], default=0)
    return (day_of(last) + 1) * DAY


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg) -> int:
    from .synthetic import generate_synthetic_logs, write_synthetic

    data = generate_synthetic_logs(cfg.synthetic)
    write_synthetic(data, args.out)
    print(f"wrote {len(data.events)} events, {len(data.requests)} requests, {len(data.items)} items to {args.out}")
    return 0


def _save_store(store: SignalStore, path) -> None:
    store.save(path, binary=str(path).endswith(".bin"))


def cmd_iqp_build(args, cfg) -> int:
    logs = Path(args.logs)
    events, requests = list(read_events(logs / "events.tsv")), list(read_requests(logs / "requests.tsv"))
    as_of = args.as_of if args.as_of is not None else _end_as_of(events, requests)
    events = [e for e in events if e.timestamp <= as_of]
    requests = [r for r in requests if r.timestamp <= as_of]
    builder = IQPBuilder(DEFAULT_WINDOWS, DEFAULT_SLOTS, _read_users(logs))
    builder.build(events, requests, as_of)
    store = builder.signals(cfg.smoothing, cfg.k)
    _save_store(store, args.out)
    if args.state:
        Path(args.state).write_text(builder.to_json(), encoding="utf-8")
    print(f"as_of={as_of} items={len(store.items())} digest={store.digest()}")
    return 0


def cmd_iqp_update(args, cfg) -> int:
    builder = IQPBuilder.from_json(Path(args.state).read_text(encoding="utf-8"))
    logs = Path(args.logs)
    events, requests = list(read_events(logs / "events.tsv")), list(read_requests(logs / "requests.tsv"))
    target = args.as_of if args.as_of is not None else _end_as_of(events, requests)
    by_day_e: dict = {}
    by_day_r: dict = {}
    for e in events:
        by_day_e.setdefault(day_of(e.timestamp), []).append(e)
    for r in requests:
        by_day_r.setdefault(day_of(r.timestamp), []).append(r)
    steps = 0
    while builder.as_of < target:
        d = builder.as_of // DAY
        builder.advance(by_day_e.get(d, ()), by_day_r.get(d, ()))
        steps += 1
    store = builder.signals(cfg.smoothing, cfg.k)
    _save_store(store, args.out)
    Path(args.state).write_text(builder.to_json(), encoding="utf-8")
    print(f"advanced {steps} days; as_of={builder.as_of} digest={store.digest()}")
    return 0


def cmd_iqp_lookup(args, cfg) -> int:
    store = SignalStore.load(args.store)
    ctx = RequestContext(0, args.country) if args.country else None
    feats = store.lookup(args.item, normalize_query(args.query), ctx)
    print("\t".join(f"{s.name}={float(v)!r}" for s, v in zip(store.slots, feats)))
    return 0


def cmd_train(args, cfg) -> int:
    from .experiments import prepare, train_variant
    from .plotting import plot_training_curve
    from .training import write_metrics_log

    prep = prepare(cfg, _load_data(args.data, cfg))
    if any(prep.audit.values()):
        raise PrerankError(f"temporal hygiene audit failed: {prep.audit}")
    model, history = train_variant(prep, args.variant, args.remove)
    model.save(args.out)
    if args.metrics_log:
        write_metrics_log(args.metrics_log, history)
        plot_training_curve(history, Path(args.metrics_log).with_suffix(".png"))
    print(f"train={len(prep.train)} test={len(prep.test)} steps={len(history)} digest={model.digest()}")
    return 0


def cmd_index_build(args, cfg) -> int:
    from .dataset import ItemTable
    from .model import PreRankModel
    from .serving import batch_inference, build_index, features_from_table
    from .synthetic import read_items

    model = PreRankModel.load(args.model)
    store = SignalStore.load(args.iqp)
    items = ItemTable.from_records(read_items(Path(args.data) / "items.tsv"))
    if model.cfg.use_towers:
        pairs = batch_inference(features_from_table(items, items.ids), model)
    else:
        pairs = ((int(i), np.zeros(0, dtype=np.float32)) for i in items.ids)
    snap = build_index(pairs, store, model.digest())
    snap.save(args.out)
    print(f"items={len(snap)} digest={snap.digest()}")
    return 0


def _load_serving(args):
    from .dataset import ItemTable
    from .model import PreRankModel
    from .serving import IndexSnapshot, ServingState
    from .synthetic import read_items

    model = PreRankModel.load(args.model)
    snap = IndexSnapshot.load(args.index)
    items = None
    if getattr(args, "data", None):
        items = ItemTable.from_records(read_items(Path(args.data) / "items.tsv"))
    return ServingState(snap, model, items)


def cmd_serve(args, cfg) -> int:
    from .serving import PrerankServer, serve_stream

    state = _load_serving(args)
    if args.port is None:
        serve_stream(state, sys.stdin, sys.stdout)
        return 0
    with PrerankServer((args.host, args.port), state) as server:
        print(f"listening {server.server_address[0]}:{server.server_address[1]}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


def cmd_score(args, cfg) -> int:
    from .serving import handle_line

    state = _load_serving(args)
    req = {"request_id": 0, "query": args.query, "n_out": args.n_out,
           "context": {"user_id": args.user}, "explain": args.explain}
    if args.candidates:
        req["candidates"] = [int(c) for c in args.candidates.split(",")]
    resp = json.loads(handle_line(json.dumps(req), state))
    if "error" in resp:
        raise PrerankError(resp["error"]["message"]) from None
    if args.explain:
        print("item\tscore\tdot\tprobability\tiqp")
        for b in resp["breakdown"]:
            feats = ",".join(f"{x:.6g}" for x in b["iqp"])
            print(f"{b['item_id']}\t{b['raw_score']!r}\t{b['dot']!r}\t{b['probability']:.6f}\t{feats}")
        return 0
    for entry in resp["results"]:
        item, _, s = entry.partition(":")
        print(f"{item}\t{s}")
    return 0


def cmd_eval_hits(args, cfg) -> int:
    from .experiments import evaluate_hits, prepare, report_rows, score_examples, score_with_index, write_report
    from .model import PreRankModel
    from .plotting import plot_segment_hits

    prep = prepare(cfg, _load_data(args.data, cfg))
    model = PreRankModel.load(args.model)
    if args.index:
        from .serving import IndexSnapshot

        scores = score_with_index(IndexSnapshot.load(args.index), model, prep.test)
    else:
        scores = score_examples(model, prep.test)
    rep = {"model": evaluate_hits(scores, prep.test, prep.segments, cfg.hits_k)}
    rows = report_rows(rep, "model", cfg.hits_k)
    write_report(args.out, rows)
    plot_segment_hits(rows, Path(args.out).with_suffix(".png"), f"HITS@{cfg.hits_k}")
    print(f"HITS@{cfg.hits_k}={rep['model'].get():.6f}")
    return 0


def cmd_eval_sessions(args, cfg) -> int:
    from .metrics import f1s, sessions_from_events, sifr

    sessions = sessions_from_events(read_events(Path(args.logs) / "events.tsv"))
    print(f"sessions={len(sessions)}\tSIFR={sifr(sessions):.6f}\tF1S={f1s(sessions):.6f}")
    return 0


def cmd_eval_variants(args, cfg) -> int:
    from .experiments import FULL, VARIANTS, crossover_holds, prepare, report_rows, run_variants, write_report
    from .plotting import plot_deltas, plot_segment_hits

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare(cfg, _load_data(args.data, cfg))
    reports = run_variants(prep, args.variants.split(",") if args.variants else VARIANTS)
    rows = report_rows(reports, FULL, cfg.hits_k)
    write_report(out / "variants.tsv", rows)
    plot_segment_hits(rows, out / "variants_segments.png", f"HITS@{cfg.hits_k}")
    plot_deltas(rows, out / "variants_deltas.png")
    for name, rep in reports.items():
        print(f"{name}\tHITS@{cfg.hits_k}={rep.get():.6f}")
    if all(v in reports for v in ("full", "two_tower", "iqp_only")):
        for k, v in crossover_holds(reports).items():
            print(f"{k}\t{v}")
    return 0


def cmd_ablate(args, cfg) -> int:
    from .experiments import ablation_run, prepare, report_rows, write_report
    from .plotting import plot_deltas

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare(cfg, _load_data(args.data, cfg))
    base, ablated = ablation_run(prep, args.remove)
    name = f"-{args.remove}"
    rows = report_rows({"base": base, name: ablated}, "base", cfg.hits_k)
    write_report(out / "ablation.tsv", rows)
    plot_deltas(rows, out / "ablation_deltas.png")
    for r in rows:
        if r.segment == "ALL" and r.variant == name:
            print(f"{r.metric}\t{r.value:.6f}\t{100 * r.delta_vs_base:+.3f}%")
    return 0


def cmd_flops(args, cfg) -> int:
    from .model import flop_count

    print(flop_count(args.dim, args.iqp_features, not args.no_interactions))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prerank", add_help=True, usage=SYNOPSIS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key = value file; flags win")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="single config override")
    p.add_argument("--verbose", "-v", action="count", default=0)
    p.add_argument("--threads", type=int, default=1)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    iqp = sub.add_parser("iqp").add_subparsers(dest="iqp_command", parser_class=_Parser)
    b = iqp.add_parser("build")
    b.add_argument("--logs", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--as-of", type=int, default=None)
    b.add_argument("--state", default=None)
    b.set_defaults(func=cmd_iqp_build)
    u = iqp.add_parser("update")
    u.add_argument("--state", required=True)
    u.add_argument("--logs", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--as-of", type=int, default=None)
    u.set_defaults(func=cmd_iqp_update)
    lk = iqp.add_parser("lookup")
    lk.add_argument("--store", required=True)
    lk.add_argument("--item", type=int, required=True)
    lk.add_argument("--query", required=True)
    lk.add_argument("--country", default=None, help="fills the country-conditioned slot")
    lk.set_defaults(func=cmd_iqp_lookup)

    t = sub.add_parser("train")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", default="full", choices=("full", "two_tower", "iqp_only"))
    t.add_argument("--remove", default="none")
    t.add_argument("--metrics-log", default=None)
    t.set_defaults(func=cmd_train)

    ib = sub.add_parser("index").add_subparsers(dest="index_command", parser_class=_Parser).add_parser("build")
    ib.add_argument("--model", required=True)
    ib.add_argument("--data", required=True)
    ib.add_argument("--iqp", required=True)
    ib.add_argument("--out", required=True)
    ib.set_defaults(func=cmd_index_build)

    s = sub.add_parser("serve")
    s.add_argument("--model", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--data", default=None, help="items directory for sequence entries given by item id")
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(func=cmd_serve)

    sc = sub.add_parser("score")
    sc.add_argument("--model", required=True)
    sc.add_argument("--index", required=True)
    sc.add_argument("--query", required=True)
    sc.add_argument("--candidates", default=None, help="comma-separated item ids; default all")
    sc.add_argument("--n-out", type=int, default=10)
    sc.add_argument("--user", type=int, default=0)
    sc.add_argument("--explain", action="store_true")
    sc.set_defaults(func=cmd_score)

    ev = sub.add_parser("eval").add_subparsers(dest="eval_command", parser_class=_Parser)
    eh = ev.add_parser("hits")
    eh.add_argument("--model", required=True)
    eh.add_argument("--data", "--test", dest="data", required=True)
    eh.add_argument("--index", default=None)
    eh.add_argument("--out", required=True)
    eh.set_defaults(func=cmd_eval_hits)
    es = ev.add_parser("sessions")
    es.add_argument("--logs", required=True)
    es.set_defaults(func=cmd_eval_sessions)
    evv = ev.add_parser("variants")
    evv.add_argument("--data", required=True)
    evv.add_argument("--out", required=True)
    evv.add_argument("--variants", default=None, help="comma-separated subset")
    evv.set_defaults(func=cmd_eval_variants)

    a = sub.add_parser("ablate")
    a.add_argument("--remove", required=True,
                   choices=("none", "UserEngagementSequence", "CrossInteractionFeatures", "ParallelMaskNet"))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("flops")
    f.add_argument("--dim", type=int, default=64)
    f.add_argument("--iqp-features", type=int, default=7)
    f.add_argument("--no-interactions", action="store_true")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("missing or unknown command")
    except UsageError as exc:
        sys.stderr.write(SYNOPSIS)
        sys.stderr.write(f"error USAGE: {exc}\n")
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        try:
            cfg = load_config(args)
        except UsageError as exc:
            sys.stderr.write(SYNOPSIS)
            sys.stderr.write(f"error USAGE: {exc}\n")
            return 2
        return args.func(args, cfg)
    except PrerankError as exc:
        sys.stderr.write(f"error {exc.code}: {exc}\n")
        return 1
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"error {type(exc).__name__.upper()}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())

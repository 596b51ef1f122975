"""Command-line front end.

Five subcommands:

* ``gen``     write an instance (and schedule or snapshot) for a generator
* ``run``     simulate a schedule and write the full artifact set
* ``verify``  re-check a snapshot: equilibrium sweep + cost certificate
* ``sweep``   run a parameter grid in parallel, one summary row per run
* ``replay``  re-run a previous output directory and byte-compare artifacts

Every artifact except ``meta.json`` is byte-deterministic for a fixed
configuration (``meta.json`` records wall time, so replay skips it).  Exit
codes: 0 success, 2 bad input (ConfigError), 3 internal invariant breach
(EngineInvariantError, including closure violations), 4 verification
failure (VerificationError, non-equilibrium snapshot, uncertified ratio,
or replay divergence).
"""

from __future__ import annotations

import argparse
import csv
import filecmp
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace as dc_replace
from pathlib import Path

from . import __version__
from .duals import DualFamily, classify, logn_accounting
from .dynamics import (
    MOVE_CEILING_FACTOR,
    run_eqp,
    run_noneqp,
    schedule_from_jsonable,
    schedule_to_jsonable,
)
from .errors import ConfigError, EngineInvariantError, VerificationError
from .instances import (
    EUCLIDEAN_PROFILES,
    build_gm,
    build_poa_fixture,
    build_random_euclidean,
    build_sigma,
    build_steiner_gap_fixture,
)
from .metric import instance_from_dict, instance_to_dict
from .rationals import format_rational
from .routing import (
    add_terminal,
    initial_state,
    solution_cost,
    verify_equilibrium,
    with_revealed,
)

DATA_FILES = ("events.jsonl", "snapshot.json", "accounting.json",
              "accounting.csv", "summary.csv")

SUMMARY_COLUMNS = (
    "label", "mode", "n", "events", "moves", "agents", "final_cost",
    "opt_cost", "ratio", "certified", "final_class", "levels_charged",
    "level_budget", "verified",
)


# ---------------------------------------------------------------------------
# json helpers


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_json(path: Path, obj) -> None:
    path.write_text(_dumps(obj) + "\n")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# snapshot (state + dual family) serialization


def snapshot_to_jsonable(state, family) -> dict:
    return {
        "instance": instance_to_dict(state.instance),
        "revealed": list(state.revealed),
        "terminals": [[v, state.counts[v], list(state.paths[v])]
                      for v in sorted(state.counts)],
        "last_mover": state.last_mover,
        "insertion_order": list(family.inserted),
    }


def snapshot_from_jsonable(data):
    """Rebuild (state, family) from a snapshot dict."""
    if not isinstance(data, dict):
        raise ConfigError("snapshot must be a JSON object")
    for key in ("instance", "revealed", "terminals", "insertion_order"):
        if key not in data:
            raise ConfigError(f"snapshot is missing the {key!r} field")
    instance = instance_from_dict(data["instance"])
    revealed = data["revealed"]
    if not revealed or revealed[0] != 0:
        raise ConfigError("snapshot revealed list must start with the root 0")
    state = initial_state(instance)
    state = with_revealed(state, revealed[1:])
    for row in data["terminals"]:
        try:
            v, count, path = row
        except (TypeError, ValueError):
            raise ConfigError(f"malformed terminal row {row!r}") from None
        state = add_terminal(state, v, count, tuple(path))
    if data.get("last_mover") is not None:
        state = dc_replace(state, last_mover=data["last_mover"])
    family = DualFamily(instance)
    for v in data["insertion_order"]:
        family.insert(v)
    return state, family


# ---------------------------------------------------------------------------
# artifact writers


def _epoch_lines(result) -> list:
    """JSON-line dicts for an eq-p run's epochs (moves inline)."""
    from .duals import CLASS_NAMES

    lines = []
    for ep in result.epochs:
        lines.append({
            "epoch": ep.index,
            "kind": ep.kind,
            "post_event_class": CLASS_NAMES[ep.post_event_rank],
            "moves": [
                {"mover": mv.mover, "target": mv.target, "tag": mv.tag,
                 "cost": format_rational(mv.move_cost),
                 "post_class": CLASS_NAMES[mv.post_rank],
                 "phi": format_rational(mv.phi_post)}
                for mv in ep.moves
            ],
            "phi": format_rational(ep.phi_end),
            "cost": format_rational(ep.cost_end),
            "agents": ep.agents_end,
        })
    return lines


def _event_lines(result) -> list:
    """JSON-line dicts for a one-shot run's events."""
    return [
        {"event": ev.index, "kind": ev.kind, "class": ev.marker,
         "phi": format_rational(ev.phi), "cost": format_rational(ev.cost),
         "agents": ev.agents}
        for ev in result.epochs
    ]


def _accounting_jsonable(report) -> dict:
    return {
        "n": report.n,
        "total_cost": format_rational(report.total_cost),
        "opt_cost": format_rational(report.opt_cost),
        "ratio": float(report.ratio),
        "gate": report.gate,
        "certified": report.certified,
        "max_edge": format_rational(report.max_edge),
        "ignored_cost": format_rational(report.ignored_cost),
        "ignored_count": report.ignored_count,
        "levels_charged": report.levels_charged,
        "level_budget": report.level_budget,
        "levels": [
            {"level": r.level, "charges": r.charges,
             "charged_cost": format_rational(r.charged_cost),
             "components": r.components,
             "dual_bound": format_rational(r.dual_bound)}
            for r in report.rows
        ],
    }


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _accounting_csv_rows(report):
    return [
        (r.level, r.charges, format_rational(r.charged_cost),
         r.components, format_rational(r.dual_bound))
        for r in report.rows
    ]


def _summary_row(label, mode, result, report, final_class) -> dict:
    moves = sum(len(ep.moves) for ep in result.epochs) if mode == "eqp" else 0
    return {
        "label": label,
        "mode": mode,
        "n": len(result.state.revealed),
        "events": len(result.epochs),
        "moves": moves,
        "agents": sum(result.state.counts.values()),
        "final_cost": format_rational(solution_cost(result.state)),
        "opt_cost": format_rational(report.opt_cost),
        "ratio": float(report.ratio),
        "certified": report.certified,
        "final_class": final_class,
        "levels_charged": report.levels_charged,
        "level_budget": report.level_budget,
        "verified": result.verdict.ok if result.verdict is not None else "",
    }


# ---------------------------------------------------------------------------
# configs: a plain dict describes one run; shared by run, sweep, and replay


def _config_label(cfg) -> str:
    gen = cfg.get("gen")
    if gen == "gm":
        return f"gm-m{cfg['m']}"
    if gen == "euclidean":
        return f"euclidean-n{cfg['n']}-s{cfg['seed']}-{cfg['profile']}"
    if gen == "steiner-gap":
        return f"steiner-gap-n{cfg['n']}"
    return Path(cfg["instance"]).stem


def _materialize(cfg):
    """Config dict -> (instance, events) ready to run."""
    gen = cfg.get("gen")
    if gen == "gm":
        gm = build_gm(cfg["m"])
        return gm.instance, build_sigma(gm)
    if gen == "euclidean":
        run = build_random_euclidean(cfg["n"], cfg["seed"], cfg["profile"])
        return run.instance, run.events
    if gen == "steiner-gap":
        fx = build_steiner_gap_fixture(cfg["n"])
        return fx.instance, fx.events
    if gen == "poa":
        raise ConfigError(
            "the poa generator is a static fixture with no schedule; "
            "use `costshare gen --gen poa` and `costshare verify` instead")
    if gen is not None:
        raise ConfigError(f"unknown generator {gen!r}")
    instance = instance_from_dict(_load_json(cfg["instance"]))
    if not cfg.get("schedule"):
        raise ConfigError("running from an instance file needs --schedule")
    events = schedule_from_jsonable(_load_json(cfg["schedule"]))
    return instance, events


def _execute(cfg):
    """Run a config to completion; returns (result, report, final_class)."""
    instance, events = _materialize(cfg)
    mode = cfg["mode"]
    if mode == "eqp":
        result = run_eqp(instance, events,
                         batch_order=cfg.get("batch_order", "sequential"),
                         ceiling_factor=cfg.get("move_ceiling",
                                                MOVE_CEILING_FACTOR))
        report = result.accounting
    elif mode == "noneqp":
        result = run_noneqp(instance, events,
                            batch_order=cfg.get("batch_order", "sequential"))
        report = logn_accounting(result.state, result.family)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    final_class = classify(result.state, result.family).name
    return result, report, final_class


def _sweep_worker(cfg):
    result, report, final_class = _execute(cfg)
    return _summary_row(_config_label(cfg), cfg["mode"], result, report,
                        final_class)


def _max_workers(njobs: int) -> int:
    raw = os.environ.get("COSTSHARE_THREADS", "")
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"COSTSHARE_THREADS={raw!r} is not an integer") from None
        if cap < 1:
            raise ConfigError("COSTSHARE_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(njobs, cap))


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.gen == "gm":
        gm = build_gm(args.m)
        _write_json(out / "instance.json", instance_to_dict(gm.instance))
        _write_json(out / "schedule.json", schedule_to_jsonable(build_sigma(gm)))
        _write_json(out / "paths.json",
                    {f"{j},{k}": list(p) for (j, k), p in
                     sorted(gm.canonical_paths.items())})
        print(f"gm m={args.m}: n={gm.n}, wrote instance.json schedule.json paths.json")
    elif args.gen == "euclidean":
        run = build_random_euclidean(args.n, args.seed, args.profile)
        _write_json(out / "instance.json", instance_to_dict(run.instance))
        _write_json(out / "schedule.json", schedule_to_jsonable(run.events))
        print(f"euclidean n={args.n} seed={args.seed} profile={args.profile}: "
              f"{len(run.events)} events, wrote instance.json schedule.json")
    elif args.gen == "poa":
        fx = build_poa_fixture(args.n)
        family = DualFamily(fx.instance)
        for v in fx.bad_state.revealed:
            family.insert(v)
        _write_json(out / "instance.json", instance_to_dict(fx.instance))
        _write_json(out / "snapshot.json",
                    snapshot_to_jsonable(fx.bad_state, family))
        print(f"poa n={args.n}: bad equilibrium of cost {fx.bad_cost} vs "
              f"optimum {fx.opt_cost}, wrote instance.json snapshot.json")
    elif args.gen == "steiner-gap":
        fx = build_steiner_gap_fixture(args.n)
        _write_json(out / "instance.json", instance_to_dict(fx.instance))
        _write_json(out / "schedule.json", schedule_to_jsonable(fx.events))
        print(f"steiner-gap n={args.n}: {len(fx.events)} events, "
              f"wrote instance.json schedule.json")
    else:  # pragma: no cover - argparse limits choices
        raise ConfigError(f"unknown generator {args.gen!r}")
    return 0


def _config_from_args(args) -> dict:
    cfg = {"mode": args.mode, "batch_order": args.batch_order,
           "move_ceiling": args.move_ceiling}
    if args.gen:
        if args.instance or args.schedule:
            raise ConfigError("give either --gen or --instance/--schedule, not both")
        cfg["gen"] = args.gen
        if args.gen == "gm":
            if args.m is None:
                raise ConfigError("--gen gm needs --m")
            cfg["m"] = args.m
        elif args.gen in ("euclidean", "poa", "steiner-gap"):
            if args.n is None:
                raise ConfigError(f"--gen {args.gen} needs --n")
            cfg["n"] = args.n
            if args.gen == "euclidean":
                cfg["seed"] = args.seed
                cfg["profile"] = args.profile
    elif args.instance:
        cfg["instance"] = str(Path(args.instance).resolve())
        if args.schedule:
            cfg["schedule"] = str(Path(args.schedule).resolve())
    else:
        raise ConfigError("nothing to run: give --gen or --instance")
    return cfg


def _run_into(cfg, out: Path) -> dict:
    """Execute a config and write the artifact set into `out`."""
    t0 = time.monotonic()
    result, report, final_class = _execute(cfg)
    wall = time.monotonic() - t0

    out.mkdir(parents=True, exist_ok=True)
    lines = _epoch_lines(result) if cfg["mode"] == "eqp" else _event_lines(result)
    with open(out / "events.jsonl", "w") as fh:
        for row in lines:
            fh.write(_dumps(row) + "\n")
    _write_json(out / "snapshot.json",
                snapshot_to_jsonable(result.state, result.family))
    _write_json(out / "accounting.json", _accounting_jsonable(report))
    _write_csv(out / "accounting.csv",
               ("level", "charges", "charged_cost", "components", "dual_bound"),
               _accounting_csv_rows(report))
    row = _summary_row(_config_label(cfg), cfg["mode"], result, report,
                       final_class)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS,
               [tuple(row[c] for c in SUMMARY_COLUMNS)])
    _write_json(out / "meta.json",
                {"config": cfg, "version": __version__,
                 "wall_time_s": round(wall, 3)})
    return row


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    row = _run_into(cfg, Path(args.out))
    print(f"{row['label']} ({row['mode']}): {row['events']} events, "
          f"{row['moves']} moves, final cost {row['final_cost']}, "
          f"ratio {row['ratio']:.3f} "
          f"({'certified' if row['certified'] else 'NOT CERTIFIED'}), "
          f"{row['final_class']}")
    print(f"wrote {args.out}/{{{','.join(DATA_FILES)},meta.json}}")
    return 0


def cmd_verify(args) -> int:
    data = _load_json(args.snapshot)
    state, family = snapshot_from_jsonable(data)
    verdict = verify_equilibrium(state)
    if not verdict.ok:
        w = verdict.witness
        print(f"equilibrium: NO — {w.kind} witness at vertex {w.vertex} "
              f"(current {w.current}, better {w.candidate})")
        return 4
    cls = classify(state, family)
    report = logn_accounting(state, family)
    print("equilibrium: yes")
    print(f"class: {cls.name}")
    print(f"cost {report.total_cost} vs optimum {report.opt_cost}: "
          f"ratio {float(report.ratio):.3f}, gate {report.gate:.1f}, "
          f"certified {'yes' if report.certified else 'NO'}")
    return 0 if report.certified else 4


def _parse_int_list(raw, what) -> list:
    try:
        vals = [int(tok) for tok in str(raw).split(",") if tok != ""]
    except ValueError:
        raise ConfigError(f"{what} wants a comma-separated integer list, got {raw!r}") from None
    if not vals:
        raise ConfigError(f"{what} is empty")
    return vals


def cmd_sweep(args) -> int:
    base = {"mode": args.mode, "batch_order": args.batch_order,
            "move_ceiling": args.move_ceiling}
    jobs = []
    if args.gen == "gm":
        if args.m is None:
            raise ConfigError("--gen gm needs --m (e.g. --m 2,3,4)")
        for m in _parse_int_list(args.m, "--m"):
            jobs.append({**base, "gen": "gm", "m": m})
    elif args.gen == "euclidean":
        if args.n is None:
            raise ConfigError("--gen euclidean needs --n (e.g. --n 25,50)")
        seeds = _parse_int_list(args.seeds, "--seeds")
        for n in _parse_int_list(args.n, "--n"):
            for seed in seeds:
                jobs.append({**base, "gen": "euclidean", "n": n,
                             "seed": seed, "profile": args.profile})
    else:
        raise ConfigError(f"sweep supports gm and euclidean, not {args.gen!r}")

    workers = _max_workers(len(jobs))
    t0 = time.monotonic()
    if workers == 1:
        rows = [_sweep_worker(cfg) for cfg in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    rows.sort(key=lambda r: r["label"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS,
               [tuple(r[c] for c in SUMMARY_COLUMNS) for r in rows])
    _write_json(out / "meta.json",
                {"config": {"cmd": "sweep", "jobs": jobs},
                 "version": __version__, "workers": workers,
                 "wall_time_s": round(time.monotonic() - t0, 3)})
    for r in rows:
        print(f"{r['label']}: cost {r['final_cost']}, ratio {r['ratio']:.3f}, "
              f"{'certified' if r['certified'] else 'NOT CERTIFIED'}, "
              f"{r['final_class']}")
    print(f"wrote {out}/summary.csv ({len(rows)} rows, {workers} workers)")
    return 0


def cmd_replay(args) -> int:
    old = Path(args.dir)
    meta = _load_json(old / "meta.json")
    cfg = meta.get("config")
    if not isinstance(cfg, dict) or cfg.get("cmd") == "sweep":
        raise ConfigError(f"{old}/meta.json does not describe a single run")
    with tempfile.TemporaryDirectory(prefix="costshare-replay-") as tmp:
        _run_into(cfg, Path(tmp))
        produced = {f for f in DATA_FILES if (Path(tmp) / f).exists()}
        expected = {f for f in DATA_FILES if (old / f).exists()}
        if produced != expected:
            print(f"replay diverged: artifact sets differ "
                  f"({sorted(expected ^ produced)})")
            return 4
        bad = [f for f in sorted(produced)
               if not filecmp.cmp(old / f, Path(tmp) / f, shallow=False)]
    if bad:
        print(f"replay diverged in: {', '.join(bad)}")
        return 4
    print(f"replay of {old} is byte-identical ({len(produced)} artifacts)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_gen_params(p, *, lists=False) -> None:
    if lists:
        p.add_argument("--m", help="comma-separated list for the gm generator")
        p.add_argument("--n", help="comma-separated vertex counts")
        p.add_argument("--seeds", default="0", help="comma-separated seeds")
    else:
        p.add_argument("--m", type=int, help="size parameter of the gm generator")
        p.add_argument("--n", type=int, help="vertex/ratio parameter")
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", default="churn", choices=EUCLIDEAN_PROFILES,
                   help="euclidean schedule shape")


def _add_run_knobs(p) -> None:
    p.add_argument("--mode", default="eqp", choices=("eqp", "noneqp"))
    p.add_argument("--batch-order", default="sequential",
                   choices=("sequential", "snapshot"),
                   help="how a multi-item arrival event is routed")
    p.add_argument("--move-ceiling", type=int, default=MOVE_CEILING_FACTOR,
                   metavar="F", help="per-epoch move budget is F * n^3")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="costshare",
        description="Shapley cost-shared broadcast routing: simulate, verify, certify.")
    ap.add_argument("--version", action="version", version=f"costshare {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write instance/schedule files for a generator")
    p.add_argument("--gen", required=True,
                   choices=("gm", "euclidean", "poa", "steiner-gap"))
    _add_gen_params(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="simulate one schedule and write artifacts")
    p.add_argument("--gen", choices=("gm", "euclidean", "poa", "steiner-gap"))
    _add_gen_params(p)
    p.add_argument("--instance", help="instance JSON file (alternative to --gen)")
    p.add_argument("--schedule", help="schedule JSON file")
    _add_run_knobs(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check a snapshot: equilibrium + certificate")
    p.add_argument("snapshot", help="path to a snapshot.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="run a parameter grid in parallel")
    p.add_argument("--gen", required=True, choices=("gm", "euclidean"))
    _add_gen_params(p, lists=True)
    _add_run_knobs(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run an output dir and byte-compare")
    p.add_argument("dir", help="output directory of a previous `costshare run`")
    p.set_defaults(func=cmd_replay)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 4
    except EngineInvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

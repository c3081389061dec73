"""Command-line front door: compile models, emit reliability timelines,
decision and value-of-information tables, run Monte Carlo verification, and
serve the HTTP API.

Exit codes: 0 success, 2 validation problem (models, files, arguments),
3 inconsistent evidence, 4 verification failure.  Tables are UTF-8 CSV with
a fixed header per command; summaries and progress go to stderr so stdout
stays machine-readable.  Commands that write a file also drop a
``<out>.manifest.json`` sidecar recording the inputs (hashes, seed, tool
version) that determine the output bytes.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import time
from pathlib import Path

import click

from . import __version__
from .bn import ImpossibleEvidenceError, evidence_fingerprint
from .compile import (CompileError, compile_model, continuous_problem, load_rbn,
                      save_rbn)
from .decide import DecisionError, measurement_plan, optimal_decision
from .infra import TimelineError, TopologyError, system_timeline
from .scenarios import (ModelError, builtin_evidence, builtin_model,
                        list_builtin_evidence, list_builtin_models, load_evidence,
                        load_model, resolve_findings)
from .srm import conditional_mcs, mcs

EXIT_VALIDATION = 2
EXIT_EVIDENCE = 3
EXIT_VERIFY = 4


def _die(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    raise SystemExit(code)


def _cleanly(fn):
    """Map the library's error taxonomy onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ImpossibleEvidenceError as exc:
            _die(EXIT_EVIDENCE, f"inconsistent evidence: {exc}")
        except KeyError as exc:
            _die(EXIT_VALIDATION, exc.args[0] if exc.args else str(exc))
        except (ModelError, CompileError, DecisionError, TimelineError,
                TopologyError, ValueError, OSError) as exc:
            _die(EXIT_VALIDATION, str(exc))
    return wrapper


def _fmt(x) -> str:
    return format(float(x), ".10g")


def _sha(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _load_spec(model: str):
    if model in list_builtin_models():
        return builtin_model(model)
    if not Path(model).exists():
        raise ModelError(f"unknown model {model!r}; built-ins: "
                         f"{', '.join(list_builtin_models())}")
    return load_model(model)


def _evidence_for(bn, arg: str | None):
    """Evidence mapping from a script reference: none, a builtin name, or a
    file path, optionally suffixed ``:label`` to stop after that step."""
    if not arg:
        return {}
    name, sep, label = arg.partition(":")
    if name in list_builtin_evidence():
        script = builtin_evidence(name)
    elif Path(name).exists():
        script = load_evidence(name)
    else:
        raise ModelError(f"unknown evidence script {name!r}; built-ins: "
                         f"{', '.join(list_builtin_evidence())}")
    if sep:
        labels = [s.label for s in script.steps]
        if label not in labels:
            raise ModelError(
                f"{name}: no step labelled {label!r} (steps: {', '.join(labels)})")
        findings = script.cumulative(labels.index(label))
    else:
        findings = script.cumulative()
    return resolve_findings(bn, findings)


def _write_csv(out: str | None, header, rows):
    def dump(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)

    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            dump(fh)
    else:
        dump(click.get_text_stream("stdout"))


def _manifest(out: str | None, command: str, started: float, **fields):
    if not out:
        return
    payload = {
        "command": command,
        "tool": {"name": "relnet", "version": __version__},
        "elapsed_s": round(time.time() - started, 3),
        **fields,
    }
    path = Path(f"{out}.manifest.json")
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


@click.group()
@click.version_option(__version__, prog_name="relnet")
def main():
    """Reliability workbench: compiled-network queries, decisions and VOI."""


@main.command("compile")
@click.option("--model", required=True, metavar="NAME|PATH",
              help="Builtin model name or a model JSON file.")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Compiled network file to write (.rbn).")
@click.option("--workers", default=1, show_default=True, envvar="RELNET_WORKERS",
              help="Parallel solve workers (env RELNET_WORKERS).")
@click.option("--seed", default=0, show_default=True)
@click.option("--quiet", is_flag=True, help="Suppress per-node progress.")
@_cleanly
def cmd_compile(model, out, workers, seed, quiet):
    """Compile a model into a discrete network file."""
    started = time.time()
    spec = _load_spec(model)
    progress = None if quiet else (lambda line: click.echo(line, err=True))
    cm = compile_model(spec, workers=workers, seed=seed, progress=progress)
    save_rbn(cm, out)
    totals = cm.report["totals"]
    click.echo(f"{spec.name}: {totals['nodes']} nodes, "
               f"{totals['series_solves']} series solves, "
               f"{totals['mcs_fallbacks']} MCS fallbacks -> {out}", err=True)
    _manifest(out, "compile", started, model=spec.name, seed=seed,
              model_sha256=_sha(spec.raw),
              scheme_sha256={k: _sha(v) for k, v in spec.raw.get("schemes", {}).items()},
              totals=totals)


@main.command("timeline")
@click.option("--rbn", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--evidence", metavar="SCRIPT[:LABEL]", help="Evidence script (builtin name or file).")
@click.option("--horizon", type=int, help="Stop after this year (default: model horizon).")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV file (default: stdout).")
@_cleanly
def cmd_timeline(rbn, evidence, horizon, out):
    """Failure probability and reliability index per year."""
    started = time.time()
    cm = load_rbn(rbn)
    ev = _evidence_for(cm.bn, evidence)
    rows = system_timeline(cm, ev, upto=horizon)
    _write_csv(out, ("t", "beta", "pf"),
               [(r.t, _fmt(r.beta), _fmt(r.pf)) for r in rows])
    mode = (cm.timeline or {}).get("mode", "cumulative")
    click.echo(f"{cm.name}: {len(rows)} years ({mode}), evidence {evidence or 'none'}", err=True)
    _manifest(out, "timeline", started, model=cm.name, seed=cm.doc.get("seed"),
              model_sha256=cm.doc.get("model_sha256"), rbn_sha256=_sha(cm.doc),
              evidence=evidence, evidence_fingerprint=evidence_fingerprint(ev),
              years=len(rows))


@main.command("decide")
@click.option("--rbn", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--evidence", metavar="SCRIPT[:LABEL]")
@click.option("--out", type=click.Path(dir_okay=False))
@_cleanly
def cmd_decide(rbn, evidence, out):
    """Expected utility per alternative; the optimal one is flagged."""
    started = time.time()
    cm = load_rbn(rbn)
    ev = _evidence_for(cm.bn, evidence)
    res = optimal_decision(cm, ev)
    _write_csv(out, ("alternative", "expected_utility", "optimal"),
               [(alt, _fmt(res.utilities[alt]), int(alt == res.best))
                for alt in res.alternatives])
    click.echo(f"{cm.name}: optimal {res.best} "
               f"(E[U] = {res.utilities[res.best]:,.1f})", err=True)
    _manifest(out, "decide", started, model=cm.name, seed=cm.doc.get("seed"),
              model_sha256=cm.doc.get("model_sha256"), evidence=evidence,
              evidence_fingerprint=evidence_fingerprint(ev),
              utilities=res.utilities, optimal=res.best)


@main.command("voi")
@click.option("--rbn", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--sets", metavar="A,B;C", help="Measurement sets: comma within a set, "
              "semicolon between sets (default: each declared measurement, then all).")
@click.option("--evidence", metavar="SCRIPT[:LABEL]")
@click.option("--cost", type=float, default=0.0, show_default=True,
              help="Cost per individual measurement.")
@click.option("--out", type=click.Path(dir_okay=False))
@_cleanly
def cmd_voi(rbn, sets, evidence, cost, out):
    """Value of observing measurement sets before the declared decision."""
    started = time.time()
    cm = load_rbn(rbn)
    ev = _evidence_for(cm.bn, evidence)
    groups = None
    if sets:
        groups = [[m.strip() for m in chunk.split(",") if m.strip()]
                  for chunk in sets.split(";") if chunk.strip()]
    plan = measurement_plan(cm, groups, ev, unit_cost=cost)
    _write_csv(out, ("measurements", "voi", "cost", "net_gain", "recommended"),
               [(",".join(r.measurements), _fmt(r.value), _fmt(r.cost),
                 _fmt(r.net), int(r.recommended)) for r in plan])
    singles = {r.measurements[0]: r.value for r in plan if len(r.measurements) == 1}
    for r in plan:
        if len(r.measurements) > 1 and singles:
            top, tv = max(singles.items(), key=lambda kv: kv[1])
            click.echo(f"{','.join(r.measurements)} adds {r.value - tv:,.0f} over "
                       f"{top} alone ({r.value:,.0f} vs {tv:,.0f})", err=True)
    picked = next((r for r in plan if r.recommended), None)
    if picked is None:
        click.echo(f"no measurement set is worth its cost at {cost:g} per reading", err=True)
    else:
        click.echo(f"recommended: measure {','.join(picked.measurements)} "
                   f"(VOI {picked.value:,.0f}, net {picked.net:,.0f} "
                   f"at {cost:g} per reading)", err=True)
    _manifest(out, "voi", started, model=cm.name, seed=cm.doc.get("seed"),
              model_sha256=cm.doc.get("model_sha256"), evidence=evidence,
              evidence_fingerprint=evidence_fingerprint(ev), cost=cost,
              sets={",".join(r.measurements): r.value for r in plan},
              recommended=None if picked is None else ",".join(picked.measurements))


@main.command("verify")
@click.option("--model", required=True, metavar="NAME|PATH")
@click.option("-n", "samples", default=1_000_000, show_default=True,
              help="Monte Carlo samples per check.")
@click.option("--seed", default=0, show_default=True)
@click.option("--workers", default=1, show_default=True, envvar="RELNET_WORKERS")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV of checks.")
@_cleanly
def cmd_verify(model, samples, seed, workers, out):
    """Compile, then test the network against Monte Carlo on the source model.

    Each check passes when the compiled failure probability sits inside the
    95% sampling band (widened to 3/n when no failures are drawn).
    """
    started = time.time()
    spec = _load_spec(model)
    failure = spec.failure
    if not failure:
        raise ModelError(f"{spec.name}: no failure declaration to verify against")
    node_ns = spec.node_spec(failure["node"])
    if node_ns["kind"] != "system_failure":
        raise ModelError(
            f"{spec.name}: verification needs a direct limit-state failure node; "
            f"{failure['node']!r} is {node_ns['kind']!r}")
    modes = list(node_ns["modes"])
    cm = compile_model(spec, workers=workers, seed=seed)
    problem = continuous_problem(spec, modes)

    checks = [("unconditional", {}, None)]
    for name in list_builtin_evidence():
        script = builtin_evidence(name)
        if script.model != spec.name:
            continue
        findings = script.cumulative()
        readings = []
        for f in findings:
            ns = spec.node_spec(f.node)
            if ns["kind"] != "measurement" or f.value is None or f.op:
                readings = None
                break
            readings.append((ns["parent"], float(f.value), spec.distribution(ns["noise"])))
        if readings is None:
            click.echo(f"{name}: skipped (findings are not plain measurement readings)",
                       err=True)
            continue
        checks.append((name, resolve_findings(cm.bn, findings), readings))

    rows, failed = [], 0
    for name, ev, readings in checks:
        if readings:
            res = conditional_mcs(problem, modes, measurements=readings,
                                  n=samples, seed=seed)
        else:
            res = mcs(problem, modes, n=samples, seed=seed)
        pf = cm.bn.posterior(failure["node"], ev)[failure["state"]]
        lo, hi = res.band
        hi = max(hi, 3.0 / res.n)  # zero-failure runs: rule-of-three upper bound
        ok = lo <= pf <= hi
        failed += 0 if ok else 1
        rows.append((name, _fmt(pf), _fmt(lo), _fmt(hi), "PASS" if ok else "FAIL"))
        click.echo(f"{name:<24} pf {pf:.4e}  band [{lo:.4e}, {hi:.4e}]  "
                   f"{'PASS' if ok else 'FAIL'}", err=True)
        for warning in res.warnings:
            click.echo(f"{name:<24} note: {warning}", err=True)
    _write_csv(out, ("check", "pf", "band_lo", "band_hi", "status"), rows)
    _manifest(out, "verify", started, model=spec.name, seed=seed, n=samples,
              model_sha256=_sha(spec.raw),
              scheme_sha256={k: _sha(v) for k, v in spec.raw.get("schemes", {}).items()},
              checks={r[0]: r[4] for r in rows})
    if failed:
        _die(EXIT_VERIFY, f"{failed} of {len(rows)} checks outside the sampling band")


@main.command("serve")
@click.option("--rbn", "rbn_paths", multiple=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Compiled network file to register (repeatable).")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.option("--workers", default=1, show_default=True, envvar="RELNET_WORKERS",
              help="Compile workers for models loaded by name.")
@click.option("--state-dir", type=click.Path(file_okay=False),
              help="Persist sessions as append-only files; replayed on restart.")
@_cleanly
def cmd_serve(rbn_paths, host, port, workers, state_dir):
    """Serve the session API over HTTP."""
    import uvicorn

    from .service import build_app

    app = build_app(rbn_paths=rbn_paths, workers=workers, state_dir=state_dir)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()

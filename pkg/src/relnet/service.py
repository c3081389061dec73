"""HTTP session API over compiled networks.

A session pins one compiled model and accumulates evidence batches; every
read (timeline, posterior, decision, information value) is conditioned on
the session's evidence so far.  Writes carry ``expected_revision`` and are
rejected on mismatch, so concurrent operators cannot silently clobber each
other; reads stamp the revision they answered under, which is what clients
poll against.  The audit log is append-only; apart from its wall-clock
timestamps, replaying the same batches in the same order yields an
identical log.  With a state directory configured, each session is an
append-only JSONL file that a restarted server replays deterministically.

Errors are JSON with a machine-readable ``code``: ``validation`` and
``inconsistent_evidence`` mirror the command-line exit codes 2 and 3;
``not_found`` and ``revision_conflict`` cover the session mechanics.
"""

from __future__ import annotations

import datetime
import json
import math
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .bn import ImpossibleEvidenceError, evidence_fingerprint
from .compile import CompileError, CompiledModel, compile_model, load_rbn
from .decide import DecisionError, measurement_plan, optimal_decision
from .infra import TimelineError, TopologyError, system_timeline
from .scenarios import (Finding, ModelError, builtin_evidence, builtin_model,
                        list_builtin_evidence, list_builtin_models,
                        resolve_findings)

__all__ = ["ApiError", "build_app"]


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, **extra):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.extra = extra

    def response(self) -> JSONResponse:
        return JSONResponse({"code": self.code, "message": self.message,
                             **self.extra}, status_code=self.status)


def _validation(message: str) -> ApiError:
    return ApiError(400, "validation", message)


def _finding_from_doc(doc, where: str) -> Finding:
    if not isinstance(doc, dict) or "node" not in doc:
        raise _validation(f"{where}: a finding is an object with 'node'")
    has = [k for k in ("state", "value") if k in doc]
    if not has:
        raise _validation(f"{where}: needs 'state' or 'value'")
    if "op" in doc and "value" not in doc:
        raise _validation(f"{where}: 'op' requires 'value'")
    if "state" in doc and "op" in doc:
        raise _validation(f"{where}: 'state' cannot carry 'op'")
    return Finding(node=doc["node"], state=doc.get("state"),
                   value=doc.get("value"), op=doc.get("op"))


def _finding_doc(f: Finding) -> dict:
    doc = {"node": f.node}
    if f.state is not None:
        doc["state"] = f.state
    if f.value is not None:
        doc["value"] = f.value
    if f.op is not None:
        doc["op"] = f.op
    return doc


@dataclass
class _Session:
    id: str
    model: str
    cm: CompiledModel
    lock: threading.Lock = field(default_factory=threading.Lock)
    revision: int = 0
    findings: tuple[Finding, ...] = ()
    evidence: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class _Store:
    """Compiled models by name plus the live sessions.

    With ``state_dir`` set, every session is mirrored to an append-only
    ``<id>.jsonl`` (header line, then one line per accepted batch); on
    startup those files are replayed so a restart loses nothing.
    """

    def __init__(self, rbn_paths=(), workers: int = 1, state_dir=None):
        self.workers = workers
        self.models: dict[str, CompiledModel] = {}
        self.sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()
        for path in rbn_paths:
            cm = load_rbn(path)
            self.models[cm.name] = cm
        self.state_dir = Path(state_dir) if state_dir else None
        if self.state_dir:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self._restore()

    def _restore(self):
        for path in sorted(self.state_dir.glob("*.jsonl")):
            lines = [json.loads(x) for x in path.read_text().splitlines() if x.strip()]
            if not lines:
                continue
            head = lines[0]
            try:
                cm = self.model(head["model"])
            except ApiError:
                continue    # model not loadable here; leave the file alone
            sess = _Session(id=head["session"], model=head["model"], cm=cm)
            for entry in lines[1:]:
                sess.findings += tuple(_finding_from_doc(d, path.name)
                                       for d in entry["findings"])
                sess.log.append(entry)
            sess.evidence = resolve_findings(cm.bn, sess.findings)
            sess.revision = len(sess.log)
            self.sessions[sess.id] = sess

    def _append_state(self, sess: _Session, record: dict):
        if self.state_dir:
            with open(self.state_dir / f"{sess.id}.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def model(self, name: str) -> CompiledModel:
        with self._lock:
            cm = self.models.get(name)
        if cm is not None:
            return cm
        if name not in list_builtin_models():
            raise ApiError(404, "not_found",
                           f"unknown model {name!r}; loaded: "
                           f"{', '.join(sorted(self.models)) or 'none'}; "
                           f"built-ins: {', '.join(list_builtin_models())}")
        cm = compile_model(builtin_model(name), workers=self.workers)
        with self._lock:
            return self.models.setdefault(name, cm)

    def session(self, sid: str) -> _Session:
        with self._lock:
            sess = self.sessions.get(sid)
        if sess is None:
            raise ApiError(404, "not_found", f"no session {sid!r}")
        return sess

    def create(self, model_name: str) -> _Session:
        cm = self.model(model_name)
        sess = _Session(id=uuid.uuid4().hex[:12], model=cm.name, cm=cm)
        with self._lock:
            self.sessions[sess.id] = sess
        self._append_state(sess, {"session": sess.id, "model": sess.model,
                                  "at": _now()})
        return sess


def _session_view(sess: _Session) -> dict:
    cm = sess.cm
    return {
        "session": sess.id,
        "model": sess.model,
        "revision": sess.revision,
        "steps": len(sess.log),
        "fingerprint": evidence_fingerprint(sess.evidence),
        "horizon": cm.horizon,
        "timeline": cm.timeline,
        "decision": cm.decision,
        "failure": cm.failure,
        "nodes": list(cm.bn.names),
    }


def build_app(rbn_paths=(), workers: int = 1, state_dir=None) -> FastAPI:
    store = _Store(rbn_paths, workers, state_dir)
    app = FastAPI(title="relnet", docs_url=None, redoc_url=None)

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return exc.response()

    @app.exception_handler(ImpossibleEvidenceError)
    async def _impossible(request: Request, exc: ImpossibleEvidenceError):
        return JSONResponse({"code": "inconsistent_evidence", "message": str(exc)},
                            status_code=409)

    @app.exception_handler(ModelError)
    @app.exception_handler(CompileError)
    @app.exception_handler(DecisionError)
    @app.exception_handler(TimelineError)
    @app.exception_handler(TopologyError)
    @app.exception_handler(ValueError)
    async def _invalid(request: Request, exc: Exception):
        return JSONResponse({"code": "validation", "message": str(exc)},
                            status_code=400)

    @app.exception_handler(KeyError)
    async def _missing(request: Request, exc: KeyError):
        msg = exc.args[0] if exc.args else str(exc)
        return JSONResponse({"code": "validation", "message": str(msg)},
                            status_code=400)

    @app.get("/scenarios")
    def scenarios():
        scripts = []
        for name in list_builtin_evidence():
            sc = builtin_evidence(name)
            scripts.append({
                "name": name,
                "model": sc.model,
                "steps": [{"label": st.label, "notes": st.notes,
                           "findings": [_finding_doc(f) for f in st.findings]}
                          for st in sc.steps],
            })
        return {"models": list_builtin_models(),
                "loaded": sorted(store.models),
                "evidence": scripts}

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        name = body.get("model")
        if not isinstance(name, str) or not name:
            raise _validation("body needs a 'model' name")
        sess = store.create(name)
        with sess.lock:
            return _session_view(sess)

    @app.get("/sessions/{sid}")
    def session_info(sid: str):
        sess = store.session(sid)
        with sess.lock:
            return _session_view(sess)

    @app.post("/sessions/{sid}/evidence")
    def post_evidence(sid: str, body: dict):
        sess = store.session(sid)
        docs = body.get("findings")
        if not isinstance(docs, list) or not docs:
            raise _validation("body needs a non-empty 'findings' list")
        expected = body.get("expected_revision")
        if not isinstance(expected, int):
            raise _validation("body needs an integer 'expected_revision'")
        label = body.get("label") or f"batch-{len(docs)}"
        findings = tuple(_finding_from_doc(d, f"findings[{i}]")
                         for i, d in enumerate(docs))
        with sess.lock:
            if expected != sess.revision:
                raise ApiError(409, "revision_conflict",
                               f"expected revision {expected}, "
                               f"session is at {sess.revision}",
                               revision=sess.revision)
            merged = sess.findings + findings
            evidence = resolve_findings(sess.cm.bn, merged)  # atomic: only now commit
            pr_e = float(sess.cm.bn.evidence_probability(evidence))
            sess.findings = merged
            sess.evidence = evidence
            sess.revision += 1
            entry = {
                "revision": sess.revision,
                "label": label,
                "findings": [_finding_doc(f) for f in findings],
                "fingerprint": evidence_fingerprint(evidence),
                "evidence_probability": pr_e,
                "at": _now(),
            }
            sess.log.append(entry)
            store._append_state(sess, entry)
            return {"revision": sess.revision,
                    "fingerprint": entry["fingerprint"],
                    "evidence_probability": pr_e,
                    "findings": len(merged)}

    @app.get("/sessions/{sid}/log")
    def session_log(sid: str):
        sess = store.session(sid)
        with sess.lock:
            return {"revision": sess.revision, "entries": list(sess.log)}

    @app.get("/sessions/{sid}/timeline")
    def session_timeline(sid: str, horizon: int | None = None):
        sess = store.session(sid)
        with sess.lock:
            rows = system_timeline(sess.cm, sess.evidence, upto=horizon)
            return {"revision": sess.revision,
                    "mode": (sess.cm.timeline or {}).get("mode", "cumulative"),
                    "rows": [{"t": r.t, "beta": r.beta, "pf": r.pf} for r in rows]}

    @app.get("/sessions/{sid}/posterior")
    def session_posterior(sid: str, node: str):
        sess = store.session(sid)
        with sess.lock:
            post = sess.cm.bn.posterior(node, sess.evidence)
            try:
                mean = post.mean()
            except (ValueError, TypeError):
                mean = None
            try:
                cells = post.density()   # step-plot view for interval nodes
            except (ValueError, TypeError):
                cells = None
            for cell in cells or ():     # open tails: JSON has no infinity
                for side in ("lower", "upper"):
                    if not math.isfinite(cell[side]):
                        cell[side] = None
            return {"revision": sess.revision, "node": node,
                    "states": [str(s) for s in post.states],
                    "probs": [float(p) for p in post.probs],
                    "mean": mean, "cells": cells}

    @app.get("/sessions/{sid}/decision")
    def session_decision(sid: str):
        sess = store.session(sid)
        with sess.lock:
            res = optimal_decision(sess.cm, sess.evidence)
            return {"revision": sess.revision,
                    "alternatives": list(res.alternatives),
                    "utilities": {a: res.utilities[a] for a in res.alternatives},
                    "best": res.best}

    @app.get("/sessions/{sid}/voi")
    def session_voi(sid: str, sets: str | None = None, cost: float = 0.0):
        sess = store.session(sid)
        groups = None
        if sets:
            groups = [[m.strip() for m in chunk.split(",") if m.strip()]
                      for chunk in sets.split(";") if chunk.strip()]
        with sess.lock:
            plan = measurement_plan(sess.cm, groups, sess.evidence, unit_cost=cost)
            picked = next((r for r in plan if r.recommended), None)
            return {"revision": sess.revision, "cost": cost,
                    "rows": [{"measurements": list(r.measurements),
                              "voi": r.value, "cost": r.cost, "net_gain": r.net,
                              "recommended": r.recommended} for r in plan],
                    "recommended": None if picked is None
                                   else list(picked.measurements)}

    return app

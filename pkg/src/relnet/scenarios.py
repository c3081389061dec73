"""Model and evidence file handling, plus the built-in scenarios.

A model file is a JSON document declaring continuous variables, correlated
capacity groups, limit-state expressions, discretization schemes, and the
discrete-node wiring the compiler should produce.  Node entries may carry a
``repeat`` block (loop variables expanded into the name and every string
field, ``{t}`` / ``{t-1}`` style), which keeps year-indexed chains readable.

Evidence files are ordered scripts of labeled steps; steps accumulate, the
way observations arrive over a structure's life.  A finding is one of

* ``{"node": "M4", "value": 150}``     — a measured value, mapped to the
  interval state containing it (values on a border land in the upper cell),
* ``{"node": "H3", "op": ">", "value": 70}`` — an inequality, mapped to the
  set of states compatible with it,
* ``{"node": "E5", "state": "survive"}`` — a direct state observation.

Both formats are validated against the JSON Schemas shipped under
``relnet/data/`` before any semantic checks run.
"""

from __future__ import annotations

import importlib.resources
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np

from . import dists
from .bn import DiscreteBN, ImpossibleEvidenceError
from .discretize import IntervalScheme

__all__ = [
    "ModelError",
    "ModelSpec",
    "EvidenceScript",
    "EvidenceStep",
    "Finding",
    "load_model",
    "load_evidence",
    "builtin_model",
    "builtin_evidence",
    "list_builtin_models",
    "list_builtin_evidence",
    "resolve_findings",
    "merge_findings",
]


class ModelError(ValueError):
    """A model or evidence file failed validation; message names the spot."""


def _schema(name: str) -> dict:
    text = importlib.resources.files("relnet.data").joinpath(name).read_text()
    return json.loads(text)


def _validate(doc, schema_name: str, source: str):
    try:
        jsonschema.validate(doc, _schema(schema_name))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ModelError(f"{source}: at {where}: {e.message}") from None


_PLACEHOLDER = re.compile(r"\{([A-Za-z_]\w*)([+-]\d+)?\}")


def _substitute(value, bindings: Mapping[str, int]):
    if isinstance(value, str):
        def repl(m):
            var, off = m.group(1), m.group(2)
            if var not in bindings:
                raise ModelError(f"unknown loop variable {var!r} in template {value!r}")
            return str(bindings[var] + (int(off) if off else 0))
        return _PLACEHOLDER.sub(repl, value)
    if isinstance(value, list):
        return [_substitute(v, bindings) for v in value]
    if isinstance(value, dict):
        return {k: _substitute(v, bindings) for k, v in value.items()}
    return value


def _expand_nodes(raw_nodes: list[dict]) -> list[dict]:
    out = []
    for entry in raw_nodes:
        loops = entry.get("repeat")
        if not loops:
            out.append(dict(entry))
            continue
        body = {k: v for k, v in entry.items() if k != "repeat"}
        stack = [{}]
        for loop in loops:
            lo, hi = int(loop["from"]), int(loop["to"])
            stack = [dict(b, **{loop["var"]: i}) for b in stack for i in range(lo, hi + 1)]
        for bindings in stack:
            out.append(_substitute(body, bindings))
    return out


@dataclass(frozen=True)
class Finding:
    node: str
    state: str | int | None = None
    value: float | None = None
    op: str | None = None  # ">", ">=", "<", "<=" (with value)

    def describe(self) -> str:
        if self.state is not None:
            return f"{self.node}={self.state}"
        if self.op:
            return f"{self.node}{self.op}{self.value:g}"
        return f"{self.node}={self.value:g}"


@dataclass(frozen=True)
class EvidenceStep:
    label: str
    findings: tuple[Finding, ...]
    notes: str = ""


@dataclass(frozen=True)
class EvidenceScript:
    name: str
    model: str
    steps: tuple[EvidenceStep, ...]

    def cumulative(self, upto: int | None = None) -> tuple[Finding, ...]:
        """All findings through step index ``upto`` (inclusive; default all)."""
        stop = len(self.steps) if upto is None else upto + 1
        out: list[Finding] = []
        for step in self.steps[:stop]:
            out.extend(step.findings)
        return tuple(out)


@dataclass
class ModelSpec:
    name: str
    title: str
    variables: dict[str, dict]
    factor_groups: dict[str, dict]
    limit_states: dict[str, str]
    schemes: dict[str, IntervalScheme]
    nodes: list[dict]
    pinning_mode: str = "condition"
    horizon: int | None = None
    decision: dict | None = None
    timeline: dict | None = None
    failure: dict | None = None
    topology: dict | None = None
    notes: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    def distribution(self, variable: str):
        spec = self.variables.get(variable)
        if spec is None:
            raise ModelError(f"model {self.name!r}: unknown variable {variable!r}")
        return dists.from_spec(spec)

    def scheme(self, name: str) -> IntervalScheme:
        try:
            return self.schemes[name]
        except KeyError:
            raise ModelError(f"model {self.name!r}: unknown scheme {name!r}") from None

    def factor_group_of(self, variable: str) -> tuple[str, dict] | None:
        for gname, g in self.factor_groups.items():
            if variable in g["members"]:
                return gname, g
        return None

    def node_spec(self, name: str) -> dict:
        for n in self.nodes:
            if n["name"] == name:
                return n
        raise ModelError(f"model {self.name!r}: no node named {name!r}")


_NODE_FIELDS = {
    "marginal": {"require": ["variable", "scheme"], "nodes": [], "optional": []},
    "factor_sibling": {"require": ["variable", "scheme", "given"], "nodes": ["given"], "optional": []},
    "measurement": {"require": ["parent", "scheme", "noise"], "nodes": ["parent"], "optional": []},
    "system_failure": {"require": ["parents", "modes"], "nodes": ["parents"], "optional": []},
    "capacity_cdf": {"require": ["parents", "modes", "pin", "scheme"], "nodes": ["parents"], "optional": []},
    "conditional_density": {"require": ["parent", "family", "params", "bind", "scheme"],
                            "nodes": ["parent"], "optional": []},
    "exceedance": {"require": ["capacity", "load"], "nodes": ["capacity", "load", "previous"],
                   "optional": ["previous", "scale"]},
    "fragility": {"require": ["load", "log_median", "log_std"], "nodes": ["load"], "optional": ["scale"]},
    "deterioration": {"require": ["previous", "ratio_mean", "ratio_std", "scheme"],
                      "nodes": ["previous"], "optional": []},
    "and_gate": {"require": ["parents"], "nodes": ["parents"], "optional": []},
    "or_gate": {"require": ["parents"], "nodes": ["parents"], "optional": []},
}


def _check_references(spec: ModelSpec):
    from .expr import parse

    for ls_name, source in spec.limit_states.items():
        try:
            free = parse(source).free_vars
        except Exception as e:
            raise ModelError(f"limit state {ls_name!r}: {e}") from None
        pins = {n.get("pin") for n in spec.nodes if n.get("kind") == "capacity_cdf"}
        for v in free:
            if v not in spec.variables and v not in pins:
                raise ModelError(f"limit state {ls_name!r} uses undeclared variable {v!r}")
    for gname, g in spec.factor_groups.items():
        for m in g["members"]:
            if m not in spec.variables:
                raise ModelError(f"factor group {gname!r} lists undeclared variable {m!r}")
            if spec.variables[m]["family"] != "lognormal":
                raise ModelError(f"factor group {gname!r}: member {m!r} must be lognormal")
    seen: set[str] = set()
    for i, node in enumerate(spec.nodes):
        name, kind = node.get("name"), node.get("kind")
        where = f"nodes[{i}] ({name!r})"
        if name in seen:
            raise ModelError(f"{where}: duplicate node name")
        rules = _NODE_FIELDS.get(kind)
        if rules is None:
            raise ModelError(f"{where}: unknown kind {kind!r}")
        for f in rules["require"]:
            if f not in node:
                raise ModelError(f"{where}: kind {kind!r} requires field {f!r}")
        for f in rules["nodes"]:
            targets = node.get(f)
            if targets is None:
                continue
            for t in ([targets] if isinstance(targets, str) else targets):
                if t not in seen:
                    raise ModelError(f"{where}: references node {t!r} not declared earlier")
        for f in ("variable", "noise", "scale"):
            if f in node and node[f] not in spec.variables:
                raise ModelError(f"{where}: undeclared variable {node[f]!r}")
        if "scheme" in node and node["scheme"] not in spec.schemes:
            raise ModelError(f"{where}: undeclared scheme {node['scheme']!r}")
        for m in node.get("modes", ()):
            if m not in spec.limit_states:
                raise ModelError(f"{where}: undeclared limit state {m!r}")
        seen.add(name)
    if spec.decision:
        for alt, patches in (spec.decision.get("overrides") or {}).items():
            if alt not in spec.decision["alternatives"]:
                raise ModelError(f"decision override for unknown alternative {alt!r}")
            for patch in patches:
                if patch.get("node") not in seen:
                    raise ModelError(f"decision override targets unknown node {patch.get('node')!r}")
        for u in spec.decision["utilities"]:
            if u["node"] not in seen:
                raise ModelError(f"utility attached to unknown node {u['node']!r}")
            for alt in u.get("alternatives", ()):
                if alt not in spec.decision["alternatives"]:
                    raise ModelError(
                        f"utility on {u['node']!r} names unknown alternative {alt!r}")
        for m in spec.decision.get("measurements", ()):
            if m not in seen:
                raise ModelError(f"decision lists unknown measurement node {m!r}")
    if spec.failure and spec.failure["node"] not in seen:
        raise ModelError(f"failure query names unknown node {spec.failure['node']!r}")


def _spec_from_doc(doc: dict, source: str) -> ModelSpec:
    _validate(doc, "model.schema.json", source)
    nodes = _expand_nodes(doc["nodes"])
    schemes = {}
    for name, s in doc.get("schemes", {}).items():
        schemes[name] = IntervalScheme(float(s["first"]), float(s["step"]), float(s["last"]),
                                       tail=bool(s.get("tail", True)))
    spec = ModelSpec(
        name=doc["name"],
        title=doc.get("title", doc["name"]),
        variables=doc["variables"],
        factor_groups=doc.get("factor_groups", {}),
        limit_states=doc.get("limit_states", {}),
        schemes=schemes,
        nodes=nodes,
        pinning_mode=doc.get("pinning_mode", "condition"),
        horizon=doc.get("horizon"),
        decision=doc.get("decision"),
        timeline=doc.get("timeline"),
        failure=doc.get("failure"),
        topology=doc.get("topology"),
        notes=doc.get("notes", ""),
        raw=doc,
    )
    for vname, vs in spec.variables.items():
        try:
            dists.from_spec(vs)
        except Exception as e:
            raise ModelError(f"{source}: variable {vname!r}: {e}") from None
    _check_references(spec)
    return spec


def load_model(path: str | Path) -> ModelSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return _spec_from_doc(doc, str(path))


def builtin_model(name: str) -> ModelSpec:
    res = importlib.resources.files("relnet.data").joinpath(f"{name}.json")
    if not res.is_file():
        raise ModelError(f"no built-in model {name!r}; available: {', '.join(list_builtin_models())}")
    return _spec_from_doc(json.loads(res.read_text()), f"builtin:{name}")


def list_builtin_models() -> list[str]:
    root = importlib.resources.files("relnet.data")
    return sorted(p.name[:-5] for p in root.iterdir()
                  if p.name.endswith(".json") and not p.name.endswith(".schema.json"))


def _script_from_doc(doc: dict, source: str) -> EvidenceScript:
    _validate(doc, "evidence.schema.json", source)
    steps = []
    for i, raw in enumerate(doc["steps"]):
        findings = []
        for j, f in enumerate(raw["findings"]):
            where = f"{source}: steps[{i}].findings[{j}]"
            has = [k for k in ("state", "value") if k in f]
            if not has:
                raise ModelError(f"{where}: needs 'state' or 'value'")
            if "op" in f and "value" not in f:
                raise ModelError(f"{where}: 'op' requires 'value'")
            if "state" in f and "op" in f:
                raise ModelError(f"{where}: 'state' cannot carry 'op'")
            findings.append(Finding(node=f["node"], state=f.get("state"),
                                    value=f.get("value"), op=f.get("op")))
        steps.append(EvidenceStep(label=raw["label"], findings=tuple(findings),
                                  notes=raw.get("notes", "")))
    return EvidenceScript(name=doc.get("name", source), model=doc.get("model", ""),
                          steps=tuple(steps))


def load_evidence(path: str | Path) -> EvidenceScript:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return _script_from_doc(doc, str(path))


def builtin_evidence(name: str) -> EvidenceScript:
    res = importlib.resources.files("relnet.data.evidence").joinpath(f"{name}.json")
    if not res.is_file():
        raise ModelError(
            f"no built-in evidence script {name!r}; available: {', '.join(list_builtin_evidence())}")
    return _script_from_doc(json.loads(res.read_text()), f"builtin:{name}")


def list_builtin_evidence() -> list[str]:
    root = importlib.resources.files("relnet.data.evidence")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _finding_mask(node, finding: Finding) -> np.ndarray:
    """States of ``node`` compatible with the finding, as a boolean mask."""
    card = node.card
    if finding.state is not None:
        mask = np.zeros(card, dtype=bool)
        mask[node.state_index(finding.state)] = True
        return mask
    if node.borders is None:
        raise ModelError(f"{finding.describe()}: node {node.name!r} has no interval states")
    b = node.borders
    v = float(finding.value)
    cells = node.cells()
    if finding.op is None:
        if v < b[0]:
            idx = 0  # below-range readings fold into the first cell
        else:
            idx = int(np.searchsorted(b, v, side="right")) - 1
            if idx >= card:
                raise ModelError(
                    f"{finding.describe()}: value outside all cells of {node.name!r} "
                    f"(borders end at {b[-1]:g})")
            idx = min(idx, card - 1)
        mask = np.zeros(card, dtype=bool)
        mask[idx] = True
        return mask
    lowers = np.array([c[0] for c in cells])
    uppers = np.array([c[1] for c in cells])
    if finding.op in (">", ">="):
        return uppers > v
    return lowers < v


def merge_findings(bn: DiscreteBN, findings) -> dict[str, np.ndarray]:
    """Intersect per-node masks; a contradiction names the node."""
    masks: dict[str, np.ndarray] = {}
    for f in findings:
        node = bn[f.node]
        mask = _finding_mask(node, f)
        if f.node in masks:
            mask = masks[f.node] & mask
        if not mask.any():
            raise ImpossibleEvidenceError(
                f"finding {f.describe()} contradicts earlier evidence on {f.node!r}")
        masks[f.node] = mask
    return masks


def resolve_findings(bn: DiscreteBN, findings) -> dict:
    """Findings → bn-infer evidence (hard index or boolean mask per node)."""
    out = {}
    for name, mask in merge_findings(bn, findings).items():
        hits = np.flatnonzero(mask)
        out[name] = int(hits[0]) if len(hits) == 1 else mask
    return out

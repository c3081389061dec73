/** Typed client for the relnet session API.
 *
 * Every call goes through `request`, which normalises transport failures and
 * error bodies into `ApiFailure` so callers can branch on the machine code
 * (`validation`, `inconsistent_evidence`, `revision_conflict`, `not_found`)
 * instead of parsing prose.  No numbers are post-processed here: the console
 * renders exactly what the server computed.
 */

export interface FindingDoc {
  node: string;
  state?: string | null;
  value?: number | null;
  op?: string | null;
}

export interface ScriptStep {
  label: string;
  notes: string;
  findings: FindingDoc[];
}

export interface EvidenceScriptDoc {
  name: string;
  model: string;
  steps: ScriptStep[];
}

export interface Catalogue {
  models: string[];
  loaded: string[];
  evidence: EvidenceScriptDoc[];
}

export interface SessionView {
  session: string;
  model: string;
  revision: number;
  steps: number;
  fingerprint: string;
  horizon: number;
  timeline: Record<string, unknown> | null;
  decision: { alternatives?: string[]; measurements?: string[] } | null;
  failure: { node?: string; kind?: string } | null;
  nodes: string[];
}

export interface EvidenceAccepted {
  revision: number;
  fingerprint: string;
  evidence_probability: number;
  findings: number;
}

export interface LogEntry {
  revision: number;
  label: string;
  findings: FindingDoc[];
  fingerprint: string;
  evidence_probability: number;
  at: string;
}

export interface AuditLog {
  revision: number;
  entries: LogEntry[];
}

export interface TimelineRow {
  t: number;
  beta: number;
  pf: number;
}

export interface Timeline {
  revision: number;
  mode: string;
  rows: TimelineRow[];
}

export interface PosteriorCell {
  state: string;
  lower: number | null;
  upper: number | null;
  mass: number;
  density: number;
}

export interface Posterior {
  revision: number;
  node: string;
  states: string[];
  probs: number[];
  mean: number | null;
  cells: PosteriorCell[] | null;
}

export interface Decision {
  revision: number;
  alternatives: string[];
  utilities: Record<string, number>;
  best: string;
}

export interface VoiRow {
  measurements: string[];
  voi: number;
  cost: number;
  net_gain: number;
  recommended: boolean;
}

export interface VoiTable {
  revision: number;
  cost: number;
  rows: VoiRow[];
  recommended: string[] | null;
}

/** Error body the service attaches to non-2xx responses. */
export interface ErrorBody {
  code: string;
  message: string;
  revision?: number;
}

export class ApiFailure extends Error {
  readonly status: number;
  readonly code: string;
  readonly revision?: number;

  constructor(status: number, body: ErrorBody) {
    super(body.message);
    this.name = "ApiFailure";
    this.status = status;
    this.code = body.code;
    this.revision = body.revision;
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  let resp: Response;
  try {
    resp = await fetch(base + path, init);
  } catch (err) {
    throw new ApiFailure(0, { code: "unreachable", message: String(err) });
  }
  if (!resp.ok) {
    let body: ErrorBody;
    try {
      body = (await resp.json()) as ErrorBody;
    } catch {
      body = { code: "http_" + resp.status, message: resp.statusText };
    }
    throw new ApiFailure(resp.status, body);
  }
  return (await resp.json()) as T;
}

export class RelnetApi {
  constructor(readonly base: string = "") {}

  scenarios(): Promise<Catalogue> {
    return request(this.base, "/scenarios");
  }

  createSession(model: string): Promise<SessionView> {
    return request(this.base, "/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ model }),
    });
  }

  session(sid: string): Promise<SessionView> {
    return request(this.base, `/sessions/${sid}`);
  }

  submitEvidence(
    sid: string,
    findings: FindingDoc[],
    expectedRevision: number,
    label?: string,
  ): Promise<EvidenceAccepted> {
    return request(this.base, `/sessions/${sid}/evidence`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        findings,
        expected_revision: expectedRevision,
        ...(label ? { label } : {}),
      }),
    });
  }

  log(sid: string): Promise<AuditLog> {
    return request(this.base, `/sessions/${sid}/log`);
  }

  timeline(sid: string, horizon?: number): Promise<Timeline> {
    const q = horizon != null ? `?horizon=${horizon}` : "";
    return request(this.base, `/sessions/${sid}/timeline${q}`);
  }

  posterior(sid: string, node: string): Promise<Posterior> {
    return request(this.base, `/sessions/${sid}/posterior?node=${encodeURIComponent(node)}`);
  }

  decision(sid: string): Promise<Decision> {
    return request(this.base, `/sessions/${sid}/decision`);
  }

  voi(sid: string, opts: { sets?: string; cost?: number } = {}): Promise<VoiTable> {
    const params = new URLSearchParams();
    if (opts.sets) params.set("sets", opts.sets);
    if (opts.cost != null) params.set("cost", String(opts.cost));
    const q = params.toString();
    return request(this.base, `/sessions/${sid}/voi${q ? "?" + q : ""}`);
  }
}

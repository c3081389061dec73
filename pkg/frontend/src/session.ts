/** Client-side session state.
 *
 * The store owns the revision number the server last confirmed and keys every
 * cached query result by it, so a panel can never show numbers from one
 * revision beside numbers from another.  Mutations are serialised: one
 * submission may be in flight at a time, and each carries the store's current
 * revision as `expected_revision` so a concurrent writer turns into an
 * explicit conflict instead of a silent overwrite.
 */

import {
  ApiFailure,
  AuditLog,
  Decision,
  FindingDoc,
  LogEntry,
  Posterior,
  RelnetApi,
  SessionView,
  Timeline,
  VoiTable,
} from "./api";

export type SubmitOutcome =
  | { kind: "accepted"; revision: number; evidenceProbability: number; fingerprint: string }
  | { kind: "conflict"; serverRevision: number; message: string }
  | { kind: "inconsistent"; message: string; findings: FindingDoc[] }
  | { kind: "invalid"; message: string };

export interface TimelineSnapshot {
  label: string;
  revision: number;
  rows: Timeline["rows"];
}

type Listener = () => void;

export class SessionStore {
  revision = 0;
  entries: LogEntry[] = [];
  snapshots: TimelineSnapshot[] = [];
  /** set when the poller saw a newer revision than the one we hold */
  behind = false;
  private view: SessionView | null = null;
  private cache = new Map<string, unknown>();
  private inflight = false;
  private listeners: Listener[] = [];

  constructor(
    private readonly api: RelnetApi,
    readonly sid: string,
  ) {}

  static async open(api: RelnetApi, model: string): Promise<SessionStore> {
    const view = await api.createSession(model);
    const store = new SessionStore(api, view.session);
    store.adopt(view);
    return store;
  }

  static async resume(api: RelnetApi, sid: string): Promise<SessionStore> {
    const view = await api.session(sid);
    const store = new SessionStore(api, view.session);
    store.adopt(view);
    await store.pullLog();
    return store;
  }

  get info(): SessionView {
    if (!this.view) throw new Error("session not opened");
    return this.view;
  }

  get busy(): boolean {
    return this.inflight;
  }

  onChange(fn: Listener): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  private adopt(view: SessionView): void {
    this.view = view;
    this.revision = view.revision;
    this.behind = false;
  }

  /** Submit a batch of findings against the revision we believe is current. */
  async submit(findings: FindingDoc[], label?: string): Promise<SubmitOutcome> {
    if (this.inflight) {
      return { kind: "invalid", message: "a submission is already in flight" };
    }
    this.inflight = true;
    try {
      const ack = await this.api.submitEvidence(this.sid, findings, this.revision, label);
      this.revision = ack.revision;
      this.behind = false;
      await this.pullLog();
      this.emit();
      return {
        kind: "accepted",
        revision: ack.revision,
        evidenceProbability: ack.evidence_probability,
        fingerprint: ack.fingerprint,
      };
    } catch (err) {
      if (err instanceof ApiFailure && err.code === "revision_conflict") {
        this.behind = true;
        this.emit();
        return {
          kind: "conflict",
          serverRevision: err.revision ?? this.revision,
          message: err.message,
        };
      }
      if (err instanceof ApiFailure && err.code === "inconsistent_evidence") {
        return { kind: "inconsistent", message: err.message, findings };
      }
      if (err instanceof ApiFailure) {
        return { kind: "invalid", message: err.message };
      }
      throw err;
    } finally {
      this.inflight = false;
    }
  }

  /** Re-read the server's view; clears the conflict flag and caches. */
  async refresh(): Promise<void> {
    const view = await this.api.session(this.sid);
    this.adopt(view);
    await this.pullLog();
    this.emit();
  }

  /** One poll tick: compare revisions without fetching panel data. */
  async poll(): Promise<boolean> {
    const view = await this.api.session(this.sid);
    if (view.revision !== this.revision) {
      this.behind = true;
      this.emit();
      return true;
    }
    return false;
  }

  private async pullLog(): Promise<void> {
    const log: AuditLog = await this.api.log(this.sid);
    this.entries = log.entries;
  }

  /** Fetch through the revision-keyed cache. */
  private async cached<T extends { revision: number }>(
    key: string,
    fetcher: () => Promise<T>,
  ): Promise<T> {
    const full = `${this.revision}:${key}`;
    const hit = this.cache.get(full);
    if (hit !== undefined) return hit as T;
    const result = await fetcher();
    if (result.revision !== this.revision) {
      // raced a writer between poll and fetch; flag and hand back fresh data
      this.revision = result.revision;
      this.behind = true;
    }
    this.cache.set(`${result.revision}:${key}`, result);
    return result;
  }

  timeline(horizon?: number): Promise<Timeline> {
    return this.cached(`timeline:${horizon ?? ""}`, () => this.api.timeline(this.sid, horizon));
  }

  posterior(node: string): Promise<Posterior> {
    return this.cached(`posterior:${node}`, () => this.api.posterior(this.sid, node));
  }

  decision(): Promise<Decision> {
    return this.cached("decision", () => this.api.decision(this.sid));
  }

  voi(opts: { sets?: string; cost?: number } = {}): Promise<VoiTable> {
    return this.cached(`voi:${opts.sets ?? ""}:${opts.cost ?? 0}`, () => this.api.voi(this.sid, opts));
  }

  /** Keep a labelled copy of the current timeline for the overlay chart. */
  async snapshot(label: string): Promise<TimelineSnapshot> {
    const tl = await this.timeline();
    const snap = { label, revision: tl.revision, rows: tl.rows };
    this.snapshots.push(snap);
    this.emit();
    return snap;
  }
}

/** Replay a catalogued evidence script through a live session.
 *
 * `replayScript` drives the same submission pipeline the console uses (the
 * store, with its revision gating), labelling each batch with the step label
 * and snapshotting the timeline after every step so the overlay chart shows
 * the whole (a)…(g) progression.  Steps without findings (the prior) only
 * snapshot.
 *
 * `referenceReplay` is the minimal straight-line equivalent: raw posts with
 * hand-threaded revisions and no client state.  The two must leave identical
 * audit logs behind — that is what the replay test pins.
 */

import { EvidenceScriptDoc, LogEntry, RelnetApi } from "./api";
import { SessionStore, SubmitOutcome } from "./session";

export interface ReplayResult {
  outcomes: { label: string; outcome: SubmitOutcome | null }[];
  entries: LogEntry[];
}

export async function replayScript(
  store: SessionStore,
  script: EvidenceScriptDoc,
): Promise<ReplayResult> {
  const outcomes: ReplayResult["outcomes"] = [];
  for (const step of script.steps) {
    if (step.findings.length === 0) {
      await store.snapshot(step.label);
      outcomes.push({ label: step.label, outcome: null });
      continue;
    }
    const outcome = await store.submit(step.findings, step.label);
    if (outcome.kind !== "accepted") {
      throw new Error(`step ${step.label} rejected: ${outcome.message}`);
    }
    await store.snapshot(step.label);
    outcomes.push({ label: step.label, outcome });
  }
  return { outcomes, entries: store.entries };
}

export async function referenceReplay(
  api: RelnetApi,
  model: string,
  script: EvidenceScriptDoc,
): Promise<LogEntry[]> {
  const view = await api.createSession(model);
  let revision = view.revision;
  for (const step of script.steps) {
    if (step.findings.length === 0) continue;
    const ack = await api.submitEvidence(view.session, step.findings, revision, step.label);
    revision = ack.revision;
  }
  const log = await api.log(view.session);
  return log.entries;
}

/** Audit-log identity modulo wall-clock timestamps. */
export function stripTimestamps(entries: LogEntry[]): Omit<LogEntry, "at">[] {
  return entries.map(({ at: _at, ...rest }) => rest);
}

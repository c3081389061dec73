/** Shorthand findings grammar for the evidence console.
 *
 *   M4 = 150        measurement reading (value finding)
 *   H3 > 70         one-sided bound (>, >=, <, <=)
 *   E1 = survive    named state (non-numeric right side)
 *
 * Entries are separated by semicolons or newlines.  The parser only shapes
 * the request; node names and states are validated by the server.
 */

import { FindingDoc } from "./api";

const ENTRY = /^\s*([A-Za-z_][\w-]*)\s*(>=|<=|=|>|<)\s*(.+?)\s*$/;

export class ParseError extends Error {}

export function parseFinding(text: string): FindingDoc {
  const m = ENTRY.exec(text);
  if (!m) {
    throw new ParseError(
      `cannot read ${JSON.stringify(text.trim())}; expected e.g. "M4 = 150", "H3 > 70" or "E1 = survive"`,
    );
  }
  const [, node, op, rhs] = m as unknown as [string, string, string, string];
  const num = Number(rhs);
  if (op === "=") {
    if (Number.isFinite(num)) return { node, value: num };
    return { node, state: rhs };
  }
  if (!Number.isFinite(num)) {
    throw new ParseError(`bound for ${node} needs a number, got ${JSON.stringify(rhs)}`);
  }
  return { node, value: num, op };
}

export function parseBatch(text: string): FindingDoc[] {
  const parts = text
    .split(/[;\n]/)
    .map((s) => s.trim())
    .filter((s) => s.length > 0);
  if (parts.length === 0) throw new ParseError("no findings entered");
  return parts.map(parseFinding);
}

export function describeFinding(f: FindingDoc): string {
  if (f.state != null) return `${f.node} = ${f.state}`;
  if (f.op != null) return `${f.node} ${f.op} ${f.value}`;
  return `${f.node} = ${f.value}`;
}

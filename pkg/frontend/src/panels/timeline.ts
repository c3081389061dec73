/** Reliability-index timeline: one β(t) polyline per saved snapshot, latest
 * snapshot emphasised.  Pure SVG string; the caller owns the container.
 */

import { esc, fmtBeta } from "../format";
import { TimelineSnapshot } from "../session";

const W = 640;
const H = 320;
const PAD = { left: 54, right: 130, top: 16, bottom: 36 };

const PALETTE = [
  "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4",
  "#8c613c", "#dc7ec0", "#797979", "#d5bb67", "#82c6e2",
];

function ticks(lo: number, hi: number, n: number): number[] {
  if (!(hi > lo)) return [lo];
  const step = (hi - lo) / n;
  return Array.from({ length: n + 1 }, (_, i) => lo + i * step);
}

export function renderTimeline(snapshots: TimelineSnapshot[], mode: string): string {
  if (snapshots.length === 0) {
    return `<p class="empty">No timeline yet.</p>`;
  }
  const all = snapshots.flatMap((s) => s.rows);
  const tMin = Math.min(...all.map((r) => r.t));
  const tMax = Math.max(...all.map((r) => r.t));
  const bVals = all.map((r) => r.beta).filter((b) => Number.isFinite(b));
  let bMin = Math.min(...bVals);
  let bMax = Math.max(...bVals);
  const margin = Math.max(0.1, (bMax - bMin) * 0.08);
  bMin -= margin;
  bMax += margin;

  const x = (t: number) => PAD.left + ((t - tMin) / Math.max(tMax - tMin, 1e-9)) * (W - PAD.left - PAD.right);
  const y = (b: number) => H - PAD.bottom - ((b - bMin) / (bMax - bMin)) * (H - PAD.top - PAD.bottom);

  const parts: string[] = [];
  parts.push(`<svg viewBox="0 0 ${W} ${H}" role="img" aria-label="reliability index over time">`);

  for (const b of ticks(bMin + margin, bMax - margin, 4)) {
    const yy = y(b);
    parts.push(`<line x1="${PAD.left}" y1="${yy.toFixed(1)}" x2="${W - PAD.right}" y2="${yy.toFixed(1)}" class="grid"/>`);
    parts.push(`<text x="${PAD.left - 6}" y="${(yy + 4).toFixed(1)}" class="tick" text-anchor="end">${fmtBeta(b)}</text>`);
  }
  for (const t of ticks(tMin, tMax, Math.min(8, Math.max(1, Math.round(tMax - tMin))))) {
    const xx = x(t);
    parts.push(`<text x="${xx.toFixed(1)}" y="${H - PAD.bottom + 18}" class="tick" text-anchor="middle">${Math.round(t)}</text>`);
  }
  parts.push(`<text x="${(PAD.left + W - PAD.right) / 2}" y="${H - 4}" class="axis" text-anchor="middle">year</text>`);
  parts.push(`<text x="14" y="${(PAD.top + H - PAD.bottom) / 2}" class="axis" text-anchor="middle" transform="rotate(-90 14 ${(PAD.top + H - PAD.bottom) / 2})">β (${esc(mode)})</text>`);

  snapshots.forEach((snap, i) => {
    const colour = PALETTE[i % PALETTE.length];
    const last = i === snapshots.length - 1;
    const pts = snap.rows
      .filter((r) => Number.isFinite(r.beta))
      .map((r) => `${x(r.t).toFixed(1)},${y(r.beta).toFixed(1)}`)
      .join(" ");
    parts.push(
      `<polyline points="${pts}" fill="none" stroke="${colour}" stroke-width="${last ? 2.5 : 1.3}"` +
        `${last ? "" : ` stroke-opacity="0.55"`} data-snapshot="${esc(snap.label)}"/>`,
    );
    const ly = PAD.top + 14 * (i + 1);
    parts.push(`<line x1="${W - PAD.right + 10}" y1="${ly - 4}" x2="${W - PAD.right + 30}" y2="${ly - 4}" stroke="${colour}" stroke-width="2"/>`);
    parts.push(`<text x="${W - PAD.right + 36}" y="${ly}" class="legend">${esc(snap.label)}</text>`);
  });

  parts.push("</svg>");
  return parts.join("");
}

/** Posterior panel: interval nodes get a density step plot over the interval
 * borders (open tails drawn to the plot edge, dashed); label nodes fall back
 * to a bar list of state probabilities.
 */

import { Posterior, PosteriorCell } from "../api";
import { esc, fmtMean, fmtProb } from "../format";

const W = 640;
const H = 260;
const PAD = { left: 54, right: 20, top: 14, bottom: 34 };

function finiteSpan(cells: PosteriorCell[]): [number, number] {
  const lows = cells.map((c) => c.lower).filter((v): v is number => v != null);
  const highs = cells.map((c) => c.upper).filter((v): v is number => v != null);
  const lo = Math.min(...lows);
  const hi = Math.max(...highs);
  const pad = (hi - lo) * 0.06 || 1;
  // tail cells have no far border; give them a sliver of axis to be visible
  return [lo - (cells[0]?.lower == null ? pad : 0), hi + (cells[cells.length - 1]?.upper == null ? pad : 0)];
}

export function renderPosterior(post: Posterior): string {
  const head =
    `<div class="post-head">` +
    `<span class="post-node">${esc(post.node)}</span>` +
    `<span class="post-mean">mean ${fmtMean(post.mean)}</span>` +
    `</div>`;

  if (!post.cells || post.cells.length === 0) {
    const rows = post.states
      .map((s, i) => {
        const p = post.probs[i] ?? 0;
        return (
          `<div class="state-row"><span class="state-name">${esc(s)}</span>` +
          `<div class="state-bar"><div style="width:${(p * 100).toFixed(2)}%"></div></div>` +
          `<span class="state-p">${fmtProb(p)}</span></div>`
        );
      })
      .join("");
    return `${head}<div class="state-list">${rows}</div>`;
  }

  const cells = post.cells;
  const [lo, hi] = finiteSpan(cells);
  const dMax = Math.max(...cells.map((c) => c.density)) || 1;
  const x = (v: number) => PAD.left + ((v - lo) / (hi - lo)) * (W - PAD.left - PAD.right);
  const y = (d: number) => H - PAD.bottom - (d / (dMax * 1.08)) * (H - PAD.top - PAD.bottom);

  const parts: string[] = [];
  parts.push(`<svg viewBox="0 0 ${W} ${H}" role="img" aria-label="posterior density of ${esc(post.node)}">`);
  parts.push(`<line x1="${PAD.left}" y1="${H - PAD.bottom}" x2="${W - PAD.right}" y2="${H - PAD.bottom}" class="grid"/>`);

  for (const cell of cells) {
    const open = cell.lower == null || cell.upper == null;
    const x0 = x(cell.lower ?? lo);
    const x1 = x(cell.upper ?? hi);
    const yy = y(cell.density);
    parts.push(
      `<rect x="${x0.toFixed(1)}" y="${yy.toFixed(1)}" width="${(x1 - x0).toFixed(1)}"` +
        ` height="${(H - PAD.bottom - yy).toFixed(1)}" class="cell${open ? " open" : ""}"` +
        ` data-state="${esc(cell.state)}"><title>${esc(cell.state)}: mass ${fmtProb(cell.mass)}</title></rect>`,
    );
    parts.push(`<line x1="${x0.toFixed(1)}" y1="${yy.toFixed(1)}" x2="${x1.toFixed(1)}" y2="${yy.toFixed(1)}" class="step${open ? " open" : ""}"/>`);
  }

  const nTicks = 5;
  for (let i = 0; i <= nTicks; i++) {
    const v = lo + ((hi - lo) * i) / nTicks;
    parts.push(`<text x="${x(v).toFixed(1)}" y="${H - PAD.bottom + 16}" class="tick" text-anchor="middle">${v.toPrecision(3)}</text>`);
  }
  parts.push(`<text x="14" y="${(PAD.top + H - PAD.bottom) / 2}" class="axis" text-anchor="middle" transform="rotate(-90 14 ${(PAD.top + H - PAD.bottom) / 2})">density</text>`);
  parts.push("</svg>");
  return head + parts.join("");
}

/** Display formatting. Rendering only — never feeds back into a request. */

export function esc(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function fmtBeta(x: number): string {
  return x.toFixed(3);
}

export function fmtProb(x: number): string {
  if (x === 0) return "0";
  if (x >= 0.01) return x.toFixed(4);
  return x.toExponential(3);
}

export function fmtMoney(x: number): string {
  const sign = x < 0 ? "−" : "";
  return sign + Math.abs(x).toLocaleString("en-US", { maximumFractionDigits: 0 });
}

export function fmtMean(x: number | null): string {
  return x == null ? "—" : x.toPrecision(4);
}

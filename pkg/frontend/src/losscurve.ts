export interface LossRow {
  iteration: number;
  lIn: number;
  lOut: number;
  lOii: number;
  lSai: number;
  lBg: number;
  lTotal: number;
  alpha: number;
}

const HEADER = "iteration,l_in,l_out,l_oii,l_sai,l_bg,l_total,alpha_i";

export function parseLossLog(csv: string): LossRow[] {
  const lines = csv.trim().split(/\r?\n/);
  if (lines.length === 0 || lines[0].trim() !== HEADER) {
    throw new Error(`unexpected loss log header: ${lines[0] ?? "<empty>"}`);
  }
  return lines.slice(1).filter((l) => l.trim()).map((line, i) => {
    const parts = line.split(",").map(Number);
    if (parts.length !== 8 || parts.some((v) => Number.isNaN(v))) {
      throw new Error(`bad loss log row ${i + 2}: ${line}`);
    }
    const [iteration, lIn, lOut, lOii, lSai, lBg, lTotal, alpha] = parts;
    return { iteration, lIn, lOut, lOii, lSai, lBg, lTotal, alpha };
  });
}

/** SVG path string for a sparkline of `values` in a width×height viewport. */
export function sparklinePath(values: number[], width: number, height: number): string {
  if (values.length === 0) return "";
  if (values.length === 1) return `M0,${height / 2}L${width},${height / 2}`;
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const span = hi - lo || 1;
  const pad = 1;
  return values
    .map((v, i) => {
      const x = (i / (values.length - 1)) * width;
      const y = pad + (1 - (v - lo) / span) * (height - 2 * pad);
      return `${i === 0 ? "M" : "L"}${x.toFixed(2)},${y.toFixed(2)}`;
    })
    .join("");
}

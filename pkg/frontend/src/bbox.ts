import type { DisplaySize, NormalizedBox, PixelBox } from "./types.js";

/** Minimum drawn box edge in display pixels; anything smaller is a misclick. */
export const MIN_BOX_PX = 2;
/** Corner handle hit radius in display pixels. */
export const HANDLE_RADIUS_PX = 8;

export type Corner = "nw" | "ne" | "sw" | "se";

export type DragMode =
  | { kind: "draw" }
  | { kind: "resize"; corner: Corner }
  | { kind: "move" };

export interface DragState {
  mode: DragMode;
  startX: number;
  startY: number;
  original: NormalizedBox | null;
}

export interface RejectedBox {
  error: string;
}

export function clamp01(v: number): number {
  return Math.min(1, Math.max(0, v));
}

/** Normalized box from two drag corners, order-independent. */
export function boxFromCorners(
  ax: number,
  ay: number,
  bx: number,
  by: number,
  display: DisplaySize,
): NormalizedBox {
  return {
    x0: clamp01(Math.min(ax, bx) / display.width),
    y0: clamp01(Math.min(ay, by) / display.height),
    x1: clamp01(Math.max(ax, bx) / display.width),
    y1: clamp01(Math.max(ay, by) / display.height),
  };
}

export function toPixels(box: NormalizedBox, display: DisplaySize): PixelBox {
  const left = Math.round(box.x0 * display.width);
  const top = Math.round(box.y0 * display.height);
  return {
    left,
    top,
    width: Math.round(box.x1 * display.width) - left,
    height: Math.round(box.y1 * display.height) - top,
  };
}

export function fromPixels(px: PixelBox, display: DisplaySize): NormalizedBox {
  return {
    x0: clamp01(px.left / display.width),
    y0: clamp01(px.top / display.height),
    x1: clamp01((px.left + px.width) / display.width),
    y1: clamp01((px.top + px.height) / display.height),
  };
}

/** Max per-coordinate deviation after a pixel round trip, in pixels. */
export function roundTripErrorPx(box: NormalizedBox, display: DisplaySize): number {
  const back = fromPixels(toPixels(box, display), display);
  return Math.max(
    Math.abs(back.x0 - box.x0) * display.width,
    Math.abs(back.x1 - box.x1) * display.width,
    Math.abs(back.y0 - box.y0) * display.height,
    Math.abs(back.y1 - box.y1) * display.height,
  );
}

function cornerPoints(box: NormalizedBox, display: DisplaySize): Array<[Corner, number, number]> {
  return [
    ["nw", box.x0 * display.width, box.y0 * display.height],
    ["ne", box.x1 * display.width, box.y0 * display.height],
    ["sw", box.x0 * display.width, box.y1 * display.height],
    ["se", box.x1 * display.width, box.y1 * display.height],
  ];
}

export function hitCorner(
  x: number,
  y: number,
  box: NormalizedBox | null,
  display: DisplaySize,
): Corner | null {
  if (!box) return null;
  for (const [corner, cx, cy] of cornerPoints(box, display)) {
    if (Math.hypot(x - cx, y - cy) <= HANDLE_RADIUS_PX) return corner;
  }
  return null;
}

function insideBox(x: number, y: number, box: NormalizedBox, display: DisplaySize): boolean {
  const nx = x / display.width;
  const ny = y / display.height;
  return nx >= box.x0 && nx <= box.x1 && ny >= box.y0 && ny <= box.y1;
}

export function beginDrag(
  x: number,
  y: number,
  existing: NormalizedBox | null,
  display: DisplaySize,
): DragState {
  const corner = hitCorner(x, y, existing, display);
  if (corner && existing) {
    return { mode: { kind: "resize", corner }, startX: x, startY: y, original: existing };
  }
  if (existing && insideBox(x, y, existing, display)) {
    return { mode: { kind: "move" }, startX: x, startY: y, original: existing };
  }
  return { mode: { kind: "draw" }, startX: x, startY: y, original: null };
}

/** The anchor (opposite corner) a resize drag pivots around, in pixels. */
function resizeAnchor(corner: Corner, box: NormalizedBox, display: DisplaySize): [number, number] {
  switch (corner) {
    case "nw": return [box.x1 * display.width, box.y1 * display.height];
    case "ne": return [box.x0 * display.width, box.y1 * display.height];
    case "sw": return [box.x1 * display.width, box.y0 * display.height];
    case "se": return [box.x0 * display.width, box.y0 * display.height];
  }
}

export function updateDrag(
  state: DragState,
  x: number,
  y: number,
  display: DisplaySize,
): NormalizedBox {
  if (state.mode.kind === "draw") {
    return boxFromCorners(state.startX, state.startY, x, y, display);
  }
  if (state.mode.kind === "resize" && state.original) {
    const [ax, ay] = resizeAnchor(state.mode.corner, state.original, display);
    return boxFromCorners(ax, ay, x, y, display);
  }
  // move: translate, clamped so the box stays inside the canvas
  const box = state.original!;
  const w = box.x1 - box.x0;
  const h = box.y1 - box.y0;
  let dx = (x - state.startX) / display.width;
  let dy = (y - state.startY) / display.height;
  dx = Math.min(1 - box.x1, Math.max(-box.x0, dx));
  dy = Math.min(1 - box.y1, Math.max(-box.y0, dy));
  return { x0: box.x0 + dx, y0: box.y0 + dy, x1: box.x0 + dx + w, y1: box.y0 + dy + h };
}

export function endDrag(
  state: DragState,
  x: number,
  y: number,
  display: DisplaySize,
): NormalizedBox | RejectedBox {
  const box = updateDrag(state, x, y, display);
  const wPx = (box.x1 - box.x0) * display.width;
  const hPx = (box.y1 - box.y0) * display.height;
  if (wPx < MIN_BOX_PX || hPx < MIN_BOX_PX) {
    return { error: `box must be at least ${MIN_BOX_PX}×${MIN_BOX_PX} px — drag a larger region` };
  }
  return box;
}

export function isRejected(result: NormalizedBox | RejectedBox): result is RejectedBox {
  return (result as RejectedBox).error !== undefined;
}

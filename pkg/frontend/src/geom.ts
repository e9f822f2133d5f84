/** Coordinate transforms and polyline helpers for the canvas workbench. */

export interface Pt {
  x: number;
  y: number;
}

/**
 * Invert canvas display coordinates to image pixel coordinates.
 *
 * The canvas is the image scaled by an integer zoom factor, so the
 * inverse is a pure scale division: a click at display (2x, 2y) under
 * 2x zoom lands on image pixel (x, y).
 */
export function displayToImage(p: Pt, zoom: number): Pt {
  if (!(zoom > 0)) throw new Error(`zoom must be positive, got ${zoom}`);
  return { x: p.x / zoom, y: p.y / zoom };
}

export function imageToDisplay(p: Pt, zoom: number): Pt {
  if (!(zoom > 0)) throw new Error(`zoom must be positive, got ${zoom}`);
  return { x: p.x * zoom, y: p.y * zoom };
}

/** Two clicks make a straight-line chain of K=2 knots. */
export function straightChain(a: Pt, b: Pt): number[][] {
  return [
    [a.x, a.y],
    [b.x, b.y],
  ];
}

export function knotsToPts(knots: number[][]): Pt[] {
  return knots.map((k) => ({ x: k[0] ?? 0, y: k[1] ?? 0 }));
}

export function ptsToKnots(pts: Pt[]): number[][] {
  return pts.map((p) => [p.x, p.y]);
}

export function polylineLength(pts: Pt[]): number {
  let total = 0;
  for (let i = 1; i < pts.length; i++) {
    const a = pts[i - 1]!;
    const b = pts[i]!;
    total += Math.hypot(b.x - a.x, b.y - a.y);
  }
  return total;
}

export function clampToImage(p: Pt, width: number, height: number): Pt {
  return {
    x: Math.min(Math.max(p.x, 0), width - 1),
    y: Math.min(Math.max(p.y, 0), height - 1),
  };
}

/** Display <-> frame pixel mapping. The canvas shows the frame scaled by
 *  `scale` and shifted by an offset in display pixels, so the inverse map
 *  recovers frame coordinates from click positions exactly. */

export interface ViewTransform {
  scale: number;
  offsetX: number;
  offsetY: number;
}

export interface Pt {
  x: number;
  y: number;
}

export function frameToDisplay(p: Pt, t: ViewTransform): Pt {
  return { x: p.x * t.scale + t.offsetX, y: p.y * t.scale + t.offsetY };
}

export function displayToFrame(p: Pt, t: ViewTransform): Pt {
  if (t.scale <= 0) {
    throw new Error(`scale must be positive, got ${t.scale}`);
  }
  return { x: (p.x - t.offsetX) / t.scale, y: (p.y - t.offsetY) / t.scale };
}

export interface Box {
  xMin: number;
  yMin: number;
  xMax: number;
  yMax: number;
}

/** Normalize a drag (any corner order) into a frame-space box. */
export function dragToFrameBox(a: Pt, b: Pt, t: ViewTransform): Box {
  const p = displayToFrame(a, t);
  const q = displayToFrame(b, t);
  return {
    xMin: Math.min(p.x, q.x),
    yMin: Math.min(p.y, q.y),
    xMax: Math.max(p.x, q.x),
    yMax: Math.max(p.y, q.y),
  };
}

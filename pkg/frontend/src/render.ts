/** Overlay construction: decoded masks become one colored alpha layer, and
 *  tracked points become marker descriptors for the canvas to draw. The DOM
 *  never appears here so everything is unit-testable. */

import { decodeMask } from "./rle";
import type { FrameEvent } from "./schema";

export type Rgb = [number, number, number];

export const PALETTE: Rgb[] = [
  [31, 119, 180],
  [255, 127, 14],
  [44, 160, 44],
  [214, 39, 40],
  [148, 103, 189],
  [140, 86, 75],
  [227, 119, 194],
  [188, 189, 34],
  [23, 190, 207],
];

/** One stable color per instance id, the same on every frame. */
export function instanceColor(instanceId: number): Rgb {
  const color = PALETTE[((instanceId % PALETTE.length) + PALETTE.length) % PALETTE.length];
  return color as Rgb;
}

export function instanceColorCss(instanceId: number): string {
  const [r, g, b] = instanceColor(instanceId);
  return `rgb(${r}, ${g}, ${b})`;
}

export interface OverlayLayer {
  width: number;
  height: number;
  /** RGBA, ready for ImageData. Transparent wherever no mask covers. */
  data: Uint8ClampedArray;
}

export const MASK_ALPHA = 115; // ~0.45

/** Paint every instance mask of one event into a single RGBA layer.
 *  Later (higher-id) instances win overlap ties, matching their draw order. */
export function renderMaskLayer(event: FrameEvent): OverlayLayer | null {
  const ids = Object.keys(event.instances)
    .map(Number)
    .sort((a, b) => a - b);
  const first = ids.length > 0 ? event.instances[String(ids[0])] : undefined;
  if (first === undefined) {
    return null;
  }
  const { height, width } = first;
  const data = new Uint8ClampedArray(height * width * 4);
  for (const id of ids) {
    const payload = event.instances[String(id)];
    if (payload === undefined) {
      continue;
    }
    const bits = decodeMask(payload);
    const [r, g, b] = instanceColor(id);
    for (let i = 0; i < bits.length; i += 1) {
      if (bits[i]) {
        const at = i * 4;
        data[at] = r;
        data[at + 1] = g;
        data[at + 2] = b;
        data[at + 3] = MASK_ALPHA;
      }
    }
  }
  return { width, height, data };
}

export interface PointMarker {
  x: number;
  y: number;
  instanceId: number;
  visible: boolean;
  fill: string;
  /** Occluded points render hollow so they stay distinct even for the
   *  color-blind when visibility coloring is on. */
  hollow: boolean;
}

export const VISIBLE_FILL = "rgb(34, 197, 94)";
export const OCCLUDED_FILL = "rgb(239, 68, 68)";

export function pointMarkers(event: FrameEvent, visibilityColoring: boolean): PointMarker[] {
  const markers: PointMarker[] = [];
  for (const set of event.tracked) {
    set.points.forEach(([x, y], index) => {
      const visible = set.visible[index] ?? false;
      markers.push({
        x,
        y,
        instanceId: set.instance_id,
        visible,
        fill: visibilityColoring
          ? visible
            ? VISIBLE_FILL
            : OCCLUDED_FILL
          : instanceColorCss(set.instance_id),
        hollow: visibilityColoring && !visible,
      });
    });
  }
  return markers;
}

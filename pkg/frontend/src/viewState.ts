/** Client-side session view: playback position, overlay toggles, and the
 *  pending-click buffer. Pure data + transition functions; the controller
 *  owns the network side. */

import type { Pt } from "./coords";
import type { FrameEvent, SessionState } from "./schema";

export interface ViewState {
  sessionId: string | null;
  sessionState: SessionState | null;
  playback: { frameIndex: number; playing: boolean };
  overlays: { masks: boolean; points: boolean; visibilityColoring: boolean };
  /** Frame-space clicks accumulated while awaiting the initial prompt, or
   *  in flight during a mid-run add. Cleared on submission ack or error. */
  pendingClicks: Pt[];
  /** Query points per instance at session creation, clamped to [1, 9]. */
  pointsPerInstance: number;
  strategy: string;
  /** Sticky failure banner (connection/session level). */
  banner: string | null;
  /** Transient rejection toast (e.g. a background click). */
  toast: string | null;
  /** False once the session stopped, finished, or failed. */
  clicksEnabled: boolean;
  lastEvent: FrameEvent | null;
  instanceIds: number[];
  droppedCount: number;
}

export function initialViewState(): ViewState {
  return {
    sessionId: null,
    sessionState: null,
    playback: { frameIndex: -1, playing: false },
    overlays: { masks: true, points: true, visibilityColoring: true },
    pendingClicks: [],
    pointsPerInstance: 5,
    strategy: "kmedoids",
    banner: null,
    toast: null,
    clicksEnabled: true,
    lastEvent: null,
    instanceIds: [],
    droppedCount: 0,
  };
}

export function clampPointsPerInstance(value: number): number {
  if (!Number.isFinite(value)) {
    return 1;
  }
  return Math.min(9, Math.max(1, Math.round(value)));
}

export function setPointsPerInstance(state: ViewState, value: number): void {
  state.pointsPerInstance = clampPointsPerInstance(value);
}

const TERMINAL: SessionState[] = ["finished", "failed"];

export function setSessionState(state: ViewState, next: SessionState): void {
  state.sessionState = next;
  state.playback.playing = next === "running";
  if (TERMINAL.includes(next)) {
    state.clicksEnabled = false;
  }
}

export function applyFrameEvent(state: ViewState, event: FrameEvent): void {
  state.playback.frameIndex = event.frame_index;
  state.lastEvent = event;
  state.droppedCount = event.dropped_count;
  for (const key of Object.keys(event.instances)) {
    const id = Number(key);
    if (!state.instanceIds.includes(id)) {
      state.instanceIds.push(id);
      state.instanceIds.sort((a, b) => a - b);
    }
  }
}

export function pushPendingClick(state: ViewState, point: Pt): void {
  state.pendingClicks.push(point);
}

export function clearPendingClicks(state: ViewState): void {
  state.pendingClicks = [];
}

export function promptAcknowledged(state: ViewState, instanceIds: number[]): void {
  clearPendingClicks(state);
  state.toast = null;
  for (const id of instanceIds) {
    if (!state.instanceIds.includes(id)) {
      state.instanceIds.push(id);
      state.instanceIds.sort((a, b) => a - b);
    }
  }
}

export function promptRejected(state: ViewState, message: string): void {
  clearPendingClicks(state);
  state.toast = message;
}

/** Stop is terminal for interaction: no further clicks are accepted. */
export function markStopped(state: ViewState): void {
  state.clicksEnabled = false;
  state.playback.playing = false;
}

export function showBanner(state: ViewState, message: string): void {
  state.banner = message;
}

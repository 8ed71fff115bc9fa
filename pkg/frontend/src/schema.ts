/** Wire types for the session service. Field names mirror the JSON exactly. */

export const EVENT_VERSION = 1;

export interface RlePayload {
  height: number;
  width: number;
  counts: number[];
}

export interface TrackedSet {
  instance_id: number;
  points: [number, number][];
  visible: boolean[];
}

export interface FrameEvent {
  v: 1;
  type: "frame";
  frame_index: number;
  instances: Record<string, RlePayload>;
  tracked: TrackedSet[];
  reinitialized: number[];
  timings_ms: Record<string, number>;
  dropped_count: number;
}

/** Session failures carry the failing frame index; an unknown-session
 *  rejection arrives as an error event without one. */
export interface ErrorEvent {
  v: 1;
  type: "error";
  frame_index?: number;
  message: string;
}

export interface EndEvent {
  v: 1;
  type: "end";
  state: SessionState;
}

export type ServiceEvent = FrameEvent | ErrorEvent | EndEvent;

export type SessionState =
  | "awaiting_prompt"
  | "running"
  | "paused"
  | "finished"
  | "failed";

export interface SessionInfo {
  session_id: string;
  state: SessionState;
  frame_cursor: number;
  instance_ids: number[];
  event_count: number;
  dropped_count: number;
  error: string | null;
}

export interface PromptEntry {
  instance_id?: number;
  points?: [number, number][];
  box?: [number, number, number, number];
  text?: string;
}

export interface PromptAck {
  instance_ids: number[];
  state: SessionState;
  frame_index: number;
}

export interface CreateSessionBody {
  config: Record<string, unknown>;
  source: Record<string, unknown>;
  overrides?: Record<string, unknown>;
}

export class SchemaError extends Error {}

/** Parse one WebSocket message. Unknown event types from a compatible
 *  version are returned as null so newer servers don't break the client. */
export function parseEvent(raw: string): ServiceEvent | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    throw new SchemaError(`event is not JSON: ${raw.slice(0, 80)}`);
  }
  if (typeof data !== "object" || data === null) {
    throw new SchemaError("event is not an object");
  }
  const event = data as Record<string, unknown>;
  if (event.v !== EVENT_VERSION) {
    throw new SchemaError(`unsupported event version ${String(event.v)}`);
  }
  switch (event.type) {
    case "frame": {
      if (
        typeof event.frame_index !== "number" ||
        typeof event.instances !== "object" ||
        event.instances === null
      ) {
        throw new SchemaError("malformed frame event");
      }
      return event as unknown as FrameEvent;
    }
    case "error": {
      if (typeof event.message !== "string") {
        throw new SchemaError("malformed error event");
      }
      return event as unknown as ErrorEvent;
    }
    case "end": {
      if (typeof event.state !== "string") {
        throw new SchemaError("malformed end event");
      }
      return event as unknown as EndEvent;
    }
    default:
      return null;
  }
}

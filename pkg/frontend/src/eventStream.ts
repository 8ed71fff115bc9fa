/** Reconnecting event-stream consumer. Events are applied in arrival order;
 *  after a dropped connection the stream reopens at ?after=<last seen frame
 *  index>, which the service replays from, so no frame event is ever missed
 *  or duplicated. */

import { parseEvent } from "./schema";
import type { EndEvent, ErrorEvent, FrameEvent } from "./schema";

/** The subset of the WebSocket surface the stream needs; real sockets
 *  satisfy it, and tests substitute scripted fakes. */
export interface SocketLike {
  onopen: (() => void) | null;
  onmessage: ((event: { data: string }) => void) | null;
  onclose: ((event: { code: number }) => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface StreamHandlers {
  onFrame: (event: FrameEvent) => void;
  onError: (event: ErrorEvent) => void;
  onEnd: (event: EndEvent) => void;
  /** Connection-level failures that stop the stream (e.g. unknown session). */
  onFatal: (message: string) => void;
}

export const UNKNOWN_SESSION_CLOSE = 4404;

export interface StreamOptions {
  after?: number;
  reconnectDelayMs?: number;
  /** Gives up after this many consecutive failed connections. */
  maxReconnects?: number;
}

export class EventStream {
  private socket: SocketLike | null = null;
  private lastFrameIndex: number;
  private ended = false;
  private stopped = false;
  private fatal = false;
  private reconnects = 0;
  private readonly reconnectDelayMs: number;
  private readonly maxReconnects: number;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private urlFor: (after: number) => string,
    private factory: SocketFactory,
    private handlers: StreamHandlers,
    options: StreamOptions = {},
  ) {
    this.lastFrameIndex = options.after ?? -1;
    this.reconnectDelayMs = options.reconnectDelayMs ?? 500;
    this.maxReconnects = options.maxReconnects ?? 20;
  }

  start(): void {
    this.open();
  }

  /** Deliberate detach: no further events, no reconnects. */
  stop(): void {
    this.stopped = true;
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    this.socket?.close();
    this.socket = null;
  }

  get finished(): boolean {
    return this.ended;
  }

  private open(): void {
    if (this.stopped || this.ended || this.fatal) {
      return;
    }
    const socket = this.factory(this.urlFor(this.lastFrameIndex));
    this.socket = socket;
    socket.onopen = () => {
      this.reconnects = 0;
    };
    socket.onmessage = ({ data }) => this.handleMessage(data);
    socket.onclose = ({ code }) => this.handleClose(code);
  }

  private handleMessage(data: string): void {
    let event;
    try {
      event = parseEvent(data);
    } catch (error) {
      this.fatal = true;
      this.socket?.close();
      this.handlers.onFatal(String(error));
      return;
    }
    if (event === null) {
      return; // unknown-but-compatible event type
    }
    if (event.type === "frame") {
      if (event.frame_index <= this.lastFrameIndex) {
        return; // replay overlap after a reconnect race
      }
      this.lastFrameIndex = event.frame_index;
      this.handlers.onFrame(event);
    } else if (event.type === "error") {
      if (event.frame_index === undefined) {
        // Session-lookup rejection: surface as fatal, the close follows.
        this.fatal = true;
        this.handlers.onFatal(event.message);
      } else {
        if (event.frame_index > this.lastFrameIndex) {
          this.lastFrameIndex = event.frame_index;
        }
        this.handlers.onError(event);
      }
    } else {
      this.ended = true;
      this.handlers.onEnd(event);
    }
  }

  private handleClose(code: number): void {
    this.socket = null;
    if (this.stopped || this.ended || this.fatal) {
      return;
    }
    if (code === UNKNOWN_SESSION_CLOSE) {
      this.fatal = true;
      this.handlers.onFatal("unknown session");
      return;
    }
    this.reconnects += 1;
    if (this.reconnects > this.maxReconnects) {
      this.fatal = true;
      this.handlers.onFatal("connection lost and not recoverable");
      return;
    }
    this.timer = setTimeout(() => {
      this.timer = null;
      this.open();
    }, this.reconnectDelayMs);
  }
}

/** Session controller: binds the HTTP client, the event stream, and the view
 *  state. Canvas/DOM work stays in main.ts; everything here is plain data in,
 *  plain data out, so the interaction rules are testable without a browser. */

import { ServiceClient, ServiceError } from "./client";
import { displayToFrame, dragToFrameBox } from "./coords";
import type { Pt, ViewTransform } from "./coords";
import type { SocketFactory } from "./eventStream";
import { EventStream } from "./eventStream";
import type { CreateSessionBody, PromptEntry, SessionInfo } from "./schema";
import {
  applyFrameEvent,
  initialViewState,
  markStopped,
  promptAcknowledged,
  promptRejected,
  pushPendingClick,
  setSessionState,
  showBanner,
} from "./viewState";
import type { ViewState } from "./viewState";

export interface ControllerOptions {
  reconnectDelayMs?: number;
  /** Called after every state change so the host can repaint. */
  onChange?: (state: ViewState) => void;
}

export class SessionController {
  readonly state: ViewState = initialViewState();
  private stream: EventStream | null = null;

  constructor(
    private client: ServiceClient,
    private sockets: SocketFactory,
    private options: ControllerOptions = {},
  ) {}

  private changed(): void {
    this.options.onChange?.(this.state);
  }

  /** Create a session and attach to its event stream. The strategy and
   *  points-per-instance selectors only apply here, at creation time. */
  async create(body: CreateSessionBody): Promise<SessionInfo> {
    const config = { ...(body.config as Record<string, unknown>) };
    const sampling = {
      ...((config.sampling as Record<string, unknown>) ?? {}),
      kind: this.state.strategy,
      points_per_instance: this.state.pointsPerInstance,
    };
    const info = await this.client.createSession({
      ...body,
      config: { ...config, sampling },
    });
    this.attachTo(info);
    return info;
  }

  /** Attach to an existing session (e.g. after a page refresh). */
  async attach(sessionId: string, after = -1): Promise<SessionInfo> {
    let info: SessionInfo;
    try {
      info = await this.client.getSession(sessionId);
    } catch (error) {
      if (error instanceof ServiceError && error.status === 404) {
        showBanner(this.state, `unknown session ${sessionId}`);
        this.changed();
      }
      throw error;
    }
    this.attachTo(info, after);
    return info;
  }

  private attachTo(info: SessionInfo, after = -1): void {
    this.state.sessionId = info.session_id;
    setSessionState(this.state, info.state);
    this.state.instanceIds = [...info.instance_ids];
    this.stream?.stop();
    this.stream = new EventStream(
      (cursor) => this.client.eventsUrl(info.session_id, cursor),
      this.sockets,
      {
        onFrame: (event) => {
          applyFrameEvent(this.state, event);
          this.changed();
        },
        onError: (event) => {
          setSessionState(this.state, "failed");
          showBanner(this.state, event.message);
          this.changed();
        },
        onEnd: (event) => {
          setSessionState(this.state, event.state);
          this.changed();
        },
        onFatal: (message) => {
          showBanner(this.state, message);
          this.changed();
        },
      },
      { after, reconnectDelayMs: this.options.reconnectDelayMs },
    );
    this.stream.start();
    this.changed();
  }

  detach(): void {
    this.stream?.stop();
    this.stream = null;
  }

  private requireSession(): string {
    if (this.state.sessionId === null) {
      throw new Error("no session attached");
    }
    return this.state.sessionId;
  }

  /** A click on the canvas, in display coordinates. While the session waits
   *  for its initial prompt the click only accumulates; mid-run it submits a
   *  one-point instance add immediately. */
  async handleClick(display: Pt, transform: ViewTransform): Promise<void> {
    if (!this.state.clicksEnabled || this.state.sessionId === null) {
      return;
    }
    const point = displayToFrame(display, transform);
    if (this.state.sessionState === "awaiting_prompt") {
      pushPendingClick(this.state, point);
      this.changed();
      return;
    }
    if (this.state.sessionState !== "running") {
      return;
    }
    pushPendingClick(this.state, point);
    this.changed();
    await this.submit([{ points: [[point.x, point.y]] }]);
  }

  /** Send the accumulated clicks as one instance's initial points. */
  async submitInitialPoints(): Promise<void> {
    if (this.state.pendingClicks.length === 0) {
      return;
    }
    const points = this.state.pendingClicks.map(
      (p): [number, number] => [p.x, p.y],
    );
    await this.submit([{ points }]);
  }

  /** A box drag, in display coordinates; allowed both as the initial prompt
   *  and as a mid-run add. */
  async handleBoxDrag(a: Pt, b: Pt, transform: ViewTransform): Promise<void> {
    if (!this.state.clicksEnabled || this.state.sessionId === null) {
      return;
    }
    const box = dragToFrameBox(a, b, transform);
    await this.submit([{ box: [box.xMin, box.yMin, box.xMax, box.yMax] }]);
  }

  private async submit(prompts: PromptEntry[]): Promise<void> {
    const sessionId = this.requireSession();
    try {
      const ack = await this.client.submitPrompts(sessionId, prompts);
      promptAcknowledged(this.state, ack.instance_ids);
      setSessionState(this.state, ack.state);
    } catch (error) {
      if (error instanceof ServiceError) {
        promptRejected(this.state, error.message);
      } else {
        promptRejected(this.state, String(error));
      }
    }
    this.changed();
  }

  async pause(): Promise<void> {
    const info = await this.client.control(this.requireSession(), "pause");
    setSessionState(this.state, info.state);
    this.changed();
  }

  async resume(): Promise<void> {
    const info = await this.client.control(this.requireSession(), "resume");
    setSessionState(this.state, info.state);
    this.changed();
  }

  async stop(): Promise<void> {
    const info = await this.client.control(this.requireSession(), "stop");
    setSessionState(this.state, info.state);
    markStopped(this.state);
    this.changed();
  }
}

/** Thin HTTP client for the session service. The fetch implementation is
 *  injected so tests can fake the server without a network. */

import type {
  CreateSessionBody,
  PromptAck,
  PromptEntry,
  SessionInfo,
} from "./schema";

export interface HttpResponse {
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<HttpResponse>;

export class ServiceError extends Error {
  constructor(
    public status: number,
    message: string,
    public field?: string,
  ) {
    super(message);
  }
}

async function errorFrom(response: HttpResponse): Promise<ServiceError> {
  let message = `service returned ${response.status}`;
  let field: string | undefined;
  try {
    const payload = (await response.json()) as Record<string, unknown>;
    if (typeof payload.message === "string") {
      message = payload.message;
    }
    if (typeof payload.field === "string") {
      field = payload.field;
    }
  } catch {
    // keep the status-only message
  }
  return new ServiceError(response.status, message, field);
}

export class ServiceClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike,
  ) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method,
      headers: { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (response.status >= 400) {
      throw await errorFrom(response);
    }
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string; version: string }> {
    return this.request("GET", "/health");
  }

  createSession(body: CreateSessionBody): Promise<SessionInfo> {
    return this.request("POST", "/sessions", body);
  }

  getSession(sessionId: string): Promise<SessionInfo> {
    return this.request("GET", `/sessions/${sessionId}`);
  }

  submitPrompts(sessionId: string, prompts: PromptEntry[]): Promise<PromptAck> {
    return this.request("POST", `/sessions/${sessionId}/prompts`, { prompts });
  }

  control(sessionId: string, verb: "pause" | "resume" | "stop"): Promise<SessionInfo> {
    return this.request("POST", `/sessions/${sessionId}/control`, { verb });
  }

  /** WebSocket endpoint for a session's event stream. */
  eventsUrl(sessionId: string, after: number): string {
    const ws = this.baseUrl.replace(/^http/, "ws");
    return `${ws}/sessions/${sessionId}/events?after=${after}`;
  }
}

/** End-to-end controller behavior against a scripted service: the canvas
 *  interaction rules, including the mid-stream click that promotes a second
 *  on-screen object to a tracked instance. */

import { describe, expect, it } from "vitest";

import { ServiceClient } from "../src/client";
import { SessionController } from "../src/controller";
import type { ViewTransform } from "../src/coords";
import { instanceColor, pointMarkers, renderMaskLayer } from "../src/render";
import type { SessionInfo, SessionState, TrackedSet } from "../src/schema";
import { FakeHttp, FakeSocketFactory, frameEvent, type MaskSpec } from "./fakes";

const H = 4;
const W = 6;

/** Filled column band [x0, x1] of the 4x6 test frame. */
function band(x0: number, x1: number): MaskSpec {
  const grid = new Array<number>(H * W).fill(0);
  for (let y = 0; y < H; y += 1) {
    for (let x = x0; x <= x1; x += 1) {
      grid[y * W + x] = 1;
    }
  }
  return { height: H, width: W, grid };
}

const objectA = band(0, 1); // left object, instance 0 from creation
const objectB = band(4, 5); // right object, not yet tracked

const trackedA: TrackedSet = { instance_id: 0, points: [[0.5, 1.5]], visible: [true] };
const trackedB: TrackedSet = { instance_id: 1, points: [[4.5, 1.5]], visible: [true] };

// The canvas shows the frame at 2x, so dividing by the transform recovers
// frame coordinates from click positions.
const zoom2: ViewTransform = { scale: 2, offsetX: 0, offsetY: 0 };

function sessionInfo(state: SessionState, instanceIds: number[]): SessionInfo {
  return {
    session_id: "s1",
    state,
    frame_cursor: 0,
    instance_ids: instanceIds,
    event_count: 0,
    dropped_count: 0,
    error: null,
  };
}

function harness(initial: SessionInfo) {
  const http = new FakeHttp();
  const sockets = new FakeSocketFactory();
  http.on("GET", "/sessions/s1", () => ({ status: 200, body: initial }));
  const client = new ServiceClient("http://svc:8008", http.fetch);
  const controller = new SessionController(client, sockets.make, { reconnectDelayMs: 0 });
  return { http, sockets, controller };
}

describe("mid-stream instance add", () => {
  it("turns a click on an untracked object into a tracked instance on later frames", async () => {
    const { http, sockets, controller } = harness(sessionInfo("running", [0]));
    http.on("POST", "/sessions/s1/prompts", () => ({
      status: 200,
      body: { instance_ids: [1], state: "running", frame_index: 3 },
    }));

    await controller.attach("s1");
    const socket = sockets.last();
    socket.open();
    for (let index = 0; index <= 2; index += 1) {
      socket.emit(frameEvent(index, { "0": objectA }, [trackedA]));
    }
    expect(controller.state.instanceIds).toEqual([0]);
    expect(controller.state.lastEvent?.instances["1"]).toBeUndefined();

    // Click the center of the right-hand object: display (9, 3) at 2x is
    // frame (4.5, 1.5).
    await controller.handleClick({ x: 9, y: 3 }, zoom2);

    const promptCall = http.calls.find((call) => call.path.endsWith("/prompts"));
    expect(promptCall?.body).toEqual({ prompts: [{ points: [[4.5, 1.5]] }] });
    expect(controller.state.pendingClicks).toHaveLength(0);
    expect(controller.state.instanceIds).toEqual([0, 1]);

    // The service keeps streaming; the new instance shows up in the overlays.
    socket.emit(frameEvent(3, { "0": objectA, "1": objectB }, [trackedA, trackedB]));
    socket.emit(frameEvent(4, { "0": objectA, "1": objectB }, [trackedA, trackedB]));

    const event = controller.state.lastEvent;
    expect(event?.frame_index).toBe(4);
    expect(event?.instances["1"]).toBeDefined();

    const layer = event === null ? null : renderMaskLayer(event);
    expect(layer).not.toBeNull();
    if (layer !== null) {
      const at = (1 * W + 4) * 4; // a pixel inside object B
      expect(Array.from(layer.data.slice(at, at + 3))).toEqual(instanceColor(1));
    }
    if (event !== null) {
      const markers = pointMarkers(event, true);
      expect(markers.some((marker) => marker.instanceId === 1)).toBe(true);
    }
  });

  it("keeps the view unchanged when the service rejects a background click", async () => {
    const { http, sockets, controller } = harness(sessionInfo("running", [0]));
    http.on("POST", "/sessions/s1/prompts", () => ({
      status: 422,
      body: { error: "InvalidArgumentError", message: "point lands on background", field: "points" },
    }));

    await controller.attach("s1");
    const socket = sockets.last();
    socket.open();
    socket.emit(frameEvent(0, { "0": objectA }, [trackedA]));

    await controller.handleClick({ x: 5, y: 7 }, zoom2);

    expect(controller.state.toast).toBe("point lands on background");
    expect(controller.state.pendingClicks).toHaveLength(0);
    expect(controller.state.instanceIds).toEqual([0]);
    expect(controller.state.sessionState).toBe("running");
  });
});

describe("initial prompting", () => {
  it("accumulates clicks while awaiting the prompt and submits them as one instance", async () => {
    const { http, sockets, controller } = harness(sessionInfo("awaiting_prompt", []));
    http.on("POST", "/sessions/s1/prompts", () => ({
      status: 200,
      body: { instance_ids: [0], state: "running", frame_index: 0 },
    }));

    await controller.attach("s1");
    sockets.last().open();

    await controller.handleClick({ x: 2, y: 2 }, zoom2);
    await controller.handleClick({ x: 3, y: 6 }, zoom2);
    expect(controller.state.pendingClicks).toEqual([
      { x: 1, y: 1 },
      { x: 1.5, y: 3 },
    ]);
    expect(http.calls.filter((call) => call.path.endsWith("/prompts"))).toHaveLength(0);

    await controller.submitInitialPoints();
    const promptCall = http.calls.find((call) => call.path.endsWith("/prompts"));
    expect(promptCall?.body).toEqual({
      prompts: [{ points: [[1, 1], [1.5, 3]] }],
    });
    expect(controller.state.pendingClicks).toHaveLength(0);
    expect(controller.state.sessionState).toBe("running");
    expect(controller.state.instanceIds).toEqual([0]);
  });

  it("submits a drag as a box prompt with normalized corners", async () => {
    const { http, sockets, controller } = harness(sessionInfo("awaiting_prompt", []));
    http.on("POST", "/sessions/s1/prompts", () => ({
      status: 200,
      body: { instance_ids: [0], state: "running", frame_index: 0 },
    }));

    await controller.attach("s1");
    sockets.last().open();
    await controller.handleBoxDrag({ x: 10, y: 8 }, { x: 2, y: 2 }, zoom2);

    const promptCall = http.calls.find((call) => call.path.endsWith("/prompts"));
    expect(promptCall?.body).toEqual({ prompts: [{ box: [1, 1, 5, 4] }] });
  });

  it("does nothing when asked to submit zero pending clicks", async () => {
    const { http, sockets, controller } = harness(sessionInfo("awaiting_prompt", []));
    await controller.attach("s1");
    sockets.last().open();
    await controller.submitInitialPoints();
    expect(http.calls.filter((call) => call.path.endsWith("/prompts"))).toHaveLength(0);
  });
});

describe("session creation", () => {
  it("applies the strategy and points-per-instance selectors at creation time", async () => {
    const http = new FakeHttp();
    const sockets = new FakeSocketFactory();
    http.on("POST", "/sessions", () => ({ status: 200, body: sessionInfo("awaiting_prompt", []) }));
    const controller = new SessionController(
      new ServiceClient("http://svc:8008", http.fetch),
      sockets.make,
      { reconnectDelayMs: 0 },
    );
    controller.state.strategy = "random";
    controller.state.pointsPerInstance = 7;

    await controller.create({
      config: { pipeline: { window_frames: 4 } },
      source: { kind: "scene", path: "scene.json" },
    });

    expect(http.calls[0]?.body).toEqual({
      config: {
        pipeline: { window_frames: 4 },
        sampling: { kind: "random", points_per_instance: 7 },
      },
      source: { kind: "scene", path: "scene.json" },
    });
    expect(controller.state.sessionId).toBe("s1");
    expect(sockets.sockets).toHaveLength(1);
  });
});

describe("playback control", () => {
  it("reflects a pause ack immediately while still rendering the in-flight frame", async () => {
    const { http, sockets, controller } = harness(sessionInfo("running", [0]));
    http.on("POST", "/sessions/s1/control", (call) => {
      const verb = (call.body as { verb: string }).verb;
      const next = verb === "pause" ? "paused" : verb === "resume" ? "running" : "finished";
      return { status: 200, body: sessionInfo(next as SessionState, [0]) };
    });

    await controller.attach("s1");
    const socket = sockets.last();
    socket.open();
    socket.emit(frameEvent(0, { "0": objectA }, [trackedA]));
    socket.emit(frameEvent(1, { "0": objectA }, [trackedA]));

    await controller.pause();
    expect(controller.state.playback.playing).toBe(false);
    expect(controller.state.sessionState).toBe("paused");

    // One event was already in flight when the pause landed; it still renders.
    socket.emit(frameEvent(2, { "0": objectA }, [trackedA]));
    expect(controller.state.playback.frameIndex).toBe(2);

    await controller.resume();
    expect(controller.state.playback.playing).toBe(true);
  });

  it("ignores canvas clicks after a stop", async () => {
    const { http, sockets, controller } = harness(sessionInfo("running", [0]));
    http.on("POST", "/sessions/s1/control", () => ({
      status: 200,
      body: sessionInfo("finished", [0]),
    }));

    await controller.attach("s1");
    sockets.last().open();
    await controller.stop();
    expect(controller.state.clicksEnabled).toBe(false);

    const before = http.calls.length;
    await controller.handleClick({ x: 9, y: 3 }, zoom2);
    await controller.handleBoxDrag({ x: 0, y: 0 }, { x: 4, y: 4 }, zoom2);
    expect(http.calls).toHaveLength(before);
  });
});

describe("attach failures", () => {
  it("shows a banner for an unknown session id", async () => {
    const http = new FakeHttp();
    const sockets = new FakeSocketFactory();
    http.on("GET", "/sessions/ghost", () => ({
      status: 404,
      body: { error: "NotFoundError", message: "no session ghost" },
    }));
    const controller = new SessionController(
      new ServiceClient("http://svc:8008", http.fetch),
      sockets.make,
      { reconnectDelayMs: 0 },
    );

    await expect(controller.attach("ghost")).rejects.toThrow("no session ghost");
    expect(controller.state.banner).toContain("unknown session ghost");
    expect(sockets.sockets).toHaveLength(0);
  });

  it("surfaces a failed session through the stream error event", async () => {
    const { sockets, controller } = harness(sessionInfo("running", [0]));
    await controller.attach("s1");
    const socket = sockets.last();
    socket.open();
    socket.emit(frameEvent(0, { "0": objectA }, [trackedA]));
    socket.emit({ v: 1, type: "error", frame_index: 1, message: "tracker lost all points" });

    expect(controller.state.sessionState).toBe("failed");
    expect(controller.state.banner).toBe("tracker lost all points");
    expect(controller.state.clicksEnabled).toBe(false);
  });
});

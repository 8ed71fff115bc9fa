/** Browser entry point: wires the controller to the DOM. All interaction
 *  rules live in controller.ts/viewState.ts; this file only paints and
 *  forwards input. */

import { ServiceClient } from "./client";
import type { FetchLike } from "./client";
import { frameToDisplay } from "./coords";
import type { Pt, ViewTransform } from "./coords";
import { SessionController } from "./controller";
import type { SocketLike } from "./eventStream";
import { pointMarkers, renderMaskLayer } from "./render";
import { clampPointsPerInstance } from "./viewState";
import type { ViewState } from "./viewState";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function currentTransform(zoom: number): ViewTransform {
  return { scale: zoom, offsetX: 0, offsetY: 0 };
}

/** Adapt a browser WebSocket to the stream's socket surface. */
function browserSocket(url: string): SocketLike {
  const ws = new WebSocket(url);
  const adapter: SocketLike = {
    onopen: null,
    onmessage: null,
    onclose: null,
    close: () => ws.close(),
  };
  ws.onopen = () => adapter.onopen?.();
  ws.onmessage = (event) => adapter.onmessage?.({ data: String(event.data) });
  ws.onclose = (event) => adapter.onclose?.({ code: event.code });
  return adapter;
}

function paint(
  canvas: HTMLCanvasElement,
  state: ViewState,
  zoom: number,
): void {
  const ctx = canvas.getContext("2d");
  if (ctx === null) {
    return;
  }
  const event = state.lastEvent;
  const transform = currentTransform(zoom);
  ctx.fillStyle = "#111827";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (event === null) {
    return;
  }
  if (state.overlays.masks) {
    const layer = renderMaskLayer(event);
    if (layer !== null) {
      canvas.width = Math.round(layer.width * zoom);
      canvas.height = Math.round(layer.height * zoom);
      ctx.fillStyle = "#111827";
      ctx.fillRect(0, 0, canvas.width, canvas.height);
      const source = new ImageData(
        new Uint8ClampedArray(layer.data),
        layer.width,
        layer.height,
      );
      const buffer = document.createElement("canvas");
      buffer.width = layer.width;
      buffer.height = layer.height;
      buffer.getContext("2d")?.putImageData(source, 0, 0);
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(buffer, 0, 0, canvas.width, canvas.height);
    }
  }
  if (state.overlays.points) {
    for (const marker of pointMarkers(event, state.overlays.visibilityColoring)) {
      const at = frameToDisplay({ x: marker.x, y: marker.y }, transform);
      ctx.beginPath();
      ctx.arc(at.x, at.y, 3, 0, 2 * Math.PI);
      if (marker.hollow) {
        ctx.strokeStyle = marker.fill;
        ctx.lineWidth = 2;
        ctx.stroke();
      } else {
        ctx.fillStyle = marker.fill;
        ctx.fill();
      }
    }
  }
}

function wire(): void {
  const canvas = el<HTMLCanvasElement>("view");
  const status = el<HTMLElement>("status");
  const banner = el<HTMLElement>("banner");
  const toast = el<HTMLElement>("toast");
  const zoomInput = el<HTMLInputElement>("zoom");

  const baseUrl = (): string => el<HTMLInputElement>("base-url").value;
  const zoom = (): number => Number(zoomInput.value) || 1;

  const fetchImpl: FetchLike = (url, init) => fetch(url, init);
  let controller = makeController();

  function makeController(): SessionController {
    const client = new ServiceClient(baseUrl(), fetchImpl);
    return new SessionController(client, browserSocket, {
      onChange: (state) => {
        paint(canvas, state, zoom());
        status.textContent =
          `session ${state.sessionId ?? "-"} · ${state.sessionState ?? "detached"}` +
          ` · frame ${state.playback.frameIndex}` +
          ` · instances [${state.instanceIds.join(", ")}]` +
          (state.droppedCount > 0 ? ` · dropped ${state.droppedCount}` : "") +
          (state.pendingClicks.length > 0
            ? ` · ${state.pendingClicks.length} pending click(s)`
            : "");
        banner.textContent = state.banner ?? "";
        banner.style.display = state.banner === null ? "none" : "block";
        toast.textContent = state.toast ?? "";
        toast.style.display = state.toast === null ? "none" : "block";
      },
    });
  }

  function displayPoint(event: MouseEvent): Pt {
    const rect = canvas.getBoundingClientRect();
    return { x: event.clientX - rect.left, y: event.clientY - rect.top };
  }

  let dragStart: Pt | null = null;
  canvas.addEventListener("mousedown", (event) => {
    dragStart = displayPoint(event);
  });
  canvas.addEventListener("mouseup", (event) => {
    const start = dragStart;
    dragStart = null;
    if (start === null) {
      return;
    }
    const end = displayPoint(event);
    const moved = Math.hypot(end.x - start.x, end.y - start.y) > 4;
    const transform = currentTransform(zoom());
    void (moved
      ? controller.handleBoxDrag(start, end, transform)
      : controller.handleClick(end, transform));
  });

  el<HTMLButtonElement>("create").addEventListener("click", () => {
    controller.detach();
    controller = makeController();
    const points = clampPointsPerInstance(
      Number(el<HTMLInputElement>("points-per-instance").value),
    );
    controller.state.pointsPerInstance = points;
    controller.state.strategy = el<HTMLSelectElement>("strategy").value;
    const source = JSON.parse(el<HTMLTextAreaElement>("source").value) as Record<
      string,
      unknown
    >;
    const initMode = el<HTMLSelectElement>("init-mode").value;
    const pipeline =
      initMode === "points"
        ? { init_mode: "points" }
        : { init_mode: "text", init_text: "bright instrument" };
    void controller
      .create({ config: { pipeline }, source })
      .catch((error) => window.alert(String(error)));
  });

  el<HTMLButtonElement>("attach").addEventListener("click", () => {
    controller.detach();
    controller = makeController();
    const sessionId = el<HTMLInputElement>("session-id").value.trim();
    void controller.attach(sessionId).catch(() => undefined);
  });

  el<HTMLButtonElement>("submit-points").addEventListener("click", () => {
    void controller.submitInitialPoints();
  });
  el<HTMLButtonElement>("pause").addEventListener("click", () => void controller.pause());
  el<HTMLButtonElement>("resume").addEventListener("click", () => void controller.resume());
  el<HTMLButtonElement>("stop").addEventListener("click", () => void controller.stop());

  for (const toggle of ["masks", "points", "visibility"] as const) {
    el<HTMLInputElement>(`toggle-${toggle}`).addEventListener("change", (event) => {
      const checked = (event.target as HTMLInputElement).checked;
      if (toggle === "masks") {
        controller.state.overlays.masks = checked;
      } else if (toggle === "points") {
        controller.state.overlays.points = checked;
      } else {
        controller.state.overlays.visibilityColoring = checked;
      }
      paint(canvas, controller.state, zoom());
    });
  }
}

if (typeof document !== "undefined") {
  window.addEventListener("DOMContentLoaded", wire);
}

/** Browser application: WebSocket session, canvas blitting, controls. */

import { FrameGate, RequestScheduler } from "./coalescer.js";
import {
  buildOpenMessage,
  buildRenderMessage,
  frameBody,
  parseFrameHeader,
  type ServerMessage,
} from "./protocol.js";
import {
  applyOpened,
  clampState,
  initialState,
  stateToRequest,
  type ViewerState,
} from "./state.js";

export interface ViewerElements {
  canvas: HTMLCanvasElement;
  banner: HTMLElement;
  status: HTMLElement;
  emotionA: HTMLSelectElement;
  emotionB: HTMLSelectElement;
  alphaE: HTMLInputElement;
  styleA: HTMLSelectElement;
  styleB: HTMLSelectElement;
  alphaS: HTMLInputElement;
  styleEnabled: HTMLInputElement;
  frame: HTMLInputElement;
  play: HTMLButtonElement;
  retry: HTMLButtonElement;
}

export class ViewerApp {
  state: ViewerState = initialState();
  private ws: WebSocket | null = null;
  private gate = new FrameGate();
  private scheduler = new RequestScheduler<ViewerState>((s, id) => {
    this.sentAt.set(id, performance.now());
    this.ws?.send(JSON.stringify(buildRenderMessage(stateToRequest(s, id))));
  });
  private sentAt = new Map<number, number>();
  private playTimer: number | null = null;
  private dragging = false;

  constructor(private readonly el: ViewerElements,
              private readonly url: string) {
    this.wireControls();
  }

  connect(): void {
    this.setStatus("connecting");
    this.banner(null);
    const ws = new WebSocket(this.url);
    ws.binaryType = "arraybuffer";
    this.ws = ws;
    ws.onopen = () => ws.send(JSON.stringify(buildOpenMessage()));
    ws.onmessage = (ev) => this.onMessage(ev);
    ws.onerror = () => this.fail("connection failed");
    ws.onclose = () => {
      if (this.state.status === "open") this.fail("connection lost");
    };
  }

  private fail(message: string): void {
    this.setStatus("error");
    this.banner(message);
    this.scheduler.reset();
    this.gate.reset();
  }

  private onMessage(ev: MessageEvent): void {
    if (ev.data instanceof ArrayBuffer) {
      this.onFrame(ev.data);
      return;
    }
    const msg = JSON.parse(ev.data as string) as ServerMessage;
    if (msg.type === "opened") {
      this.state = applyOpened(this.state, {
        id: msg.session,
        emotions: msg.emotions,
        styles: msg.styles,
        frames: msg.frames,
        stage: msg.stage,
      });
      this.populatePickers();
      this.setStatus("open");
      this.requestRender();
    } else if (msg.type === "rendered") {
      this.state.lastRenderMs = msg.ms;
      this.updateStatusLine();
    } else if (msg.type === "error") {
      this.banner(msg.message);
      if (msg.id !== undefined) this.scheduler.settle(msg.id);
    }
  }

  private onFrame(buf: ArrayBuffer): void {
    let header;
    try {
      header = parseFrameHeader(buf);
    } catch (err) {
      this.banner(String(err));
      return;
    }
    const latency = this.sentAt.get(header.id);
    this.sentAt.delete(header.id);
    this.scheduler.settle(header.id);
    if (!this.gate.accept(header.id)) {
      return; // stale: a newer frame is already on screen
    }
    const body = frameBody(buf, header);
    const rgba = new Uint8ClampedArray(header.width * header.height * 4);
    for (let i = 0, j = 0; i < body.length; i += 3, j += 4) {
      rgba[j] = body[i];
      rgba[j + 1] = body[i + 1];
      rgba[j + 2] = body[i + 2];
      rgba[j + 3] = 255;
    }
    const ctx = this.el.canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    const image = new ImageData(rgba, header.width, header.height);
    // draw at native size on an offscreen canvas, then nearest-neighbor scale
    const off = document.createElement("canvas");
    off.width = header.width;
    off.height = header.height;
    off.getContext("2d")!.putImageData(image, 0, 0);
    ctx.drawImage(off, 0, 0, this.el.canvas.width, this.el.canvas.height);
    if (latency !== undefined) {
      this.updateStatusLine(performance.now() - latency);
    }
  }

  requestRender(): void {
    if (this.state.status !== "open") return;
    this.state = clampState(this.state);
    this.state.quality = this.dragging ? "draft" : "full";
    this.scheduler.update(this.state);
    this.updateStatusLine();
  }

  // -- controls ---------------------------------------------------------------

  private wireControls(): void {
    const c = this.el.canvas;
    let lastX = 0;
    let lastY = 0;
    c.addEventListener("pointerdown", (e) => {
      this.dragging = true;
      lastX = e.clientX;
      lastY = e.clientY;
      c.setPointerCapture(e.pointerId);
    });
    c.addEventListener("pointermove", (e) => {
      if (!this.dragging) return;
      this.state.orbit.azimuth -= (e.clientX - lastX) * 0.01;
      this.state.orbit.elevation += (e.clientY - lastY) * 0.01;
      lastX = e.clientX;
      lastY = e.clientY;
      this.requestRender();
    });
    c.addEventListener("pointerup", () => {
      this.dragging = false;
      this.requestRender(); // full-quality frame on release
    });
    c.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.state.orbit.radius *= Math.exp(e.deltaY * 0.001);
      this.requestRender();
    });

    const onInput = (elt: HTMLElement, f: () => void) => {
      elt.addEventListener("input", () => {
        f();
        this.requestRender();
      });
    };
    onInput(this.el.alphaE, () => {
      this.state.alphaE = Number(this.el.alphaE.value);
    });
    onInput(this.el.alphaS, () => {
      this.state.alphaS = Number(this.el.alphaS.value);
    });
    onInput(this.el.frame, () => {
      this.state.frame = Number(this.el.frame.value);
    });
    onInput(this.el.styleEnabled, () => {
      this.state.styleEnabled = this.el.styleEnabled.checked;
    });
    const pairInput = () => {
      this.state.emotionPair = [this.el.emotionA.value, this.el.emotionB.value];
      this.state.stylePair = this.el.styleA.value
        ? [this.el.styleA.value, this.el.styleB.value] : null;
    };
    for (const sel of [this.el.emotionA, this.el.emotionB,
                       this.el.styleA, this.el.styleB]) {
      onInput(sel, pairInput);
    }
    this.el.play.addEventListener("click", () => this.togglePlay());
    this.el.retry.addEventListener("click", () => this.connect());
  }

  private togglePlay(): void {
    this.state.playing = !this.state.playing;
    this.el.play.textContent = this.state.playing ? "Pause" : "Play";
    if (this.playTimer !== null) {
      clearInterval(this.playTimer);
      this.playTimer = null;
    }
    if (this.state.playing) {
      this.playTimer = setInterval(() => {
        const frames = this.state.session?.frames ?? 1;
        this.state.frame = (this.state.frame + 1) % frames;
        this.el.frame.value = String(this.state.frame);
        this.requestRender();
      }, 100) as unknown as number;
    }
  }

  private populatePickers(): void {
    const fill = (sel: HTMLSelectElement, labels: string[], pick: string) => {
      sel.innerHTML = "";
      for (const label of labels) {
        const opt = document.createElement("option");
        opt.value = label;
        opt.textContent = label;
        opt.selected = label === pick;
        sel.appendChild(opt);
      }
    };
    const s = this.state;
    fill(this.el.emotionA, s.session!.emotions, s.emotionPair?.[0] ?? "");
    fill(this.el.emotionB, s.session!.emotions, s.emotionPair?.[1] ?? "");
    fill(this.el.styleA, s.session!.styles, s.stylePair?.[0] ?? "");
    fill(this.el.styleB, s.session!.styles, s.stylePair?.[1] ?? "");
    this.el.frame.max = String(Math.max(0, s.session!.frames - 1));
  }

  private setStatus(status: ViewerState["status"]): void {
    this.state.status = status;
    this.updateStatusLine();
  }

  private updateStatusLine(latencyMs?: number): void {
    const parts: string[] = [this.state.status];
    if (this.state.session) parts.push(`stage ${this.state.session.stage}`);
    if (this.state.lastRenderMs !== null) {
      parts.push(`render ${this.state.lastRenderMs.toFixed(1)} ms`);
    }
    if (latencyMs !== undefined) {
      parts.push(`round-trip ${latencyMs.toFixed(0)} ms`);
    }
    if (this.scheduler.pending) parts.push("rendering…");
    this.el.status.textContent = parts.join(" · ");
  }

  private banner(message: string | null): void {
    this.el.banner.textContent = message ?? "";
    this.el.banner.style.display = message ? "block" : "none";
  }
}

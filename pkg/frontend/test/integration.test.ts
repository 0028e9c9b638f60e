// End-to-end loop against a real local render service.  Opt-in because it
// needs the Python package installed: RUN_SERVER_TESTS=1 npm run test:integration
import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { orbitCamera, type Orbit } from "../src/camera.js";
import { FrameGate } from "../src/coalescer.js";
import {
  buildRenderMessage,
  frameBody,
  parseFrameHeader,
  type FrameHeader,
  type RenderOptions,
} from "../src/protocol.js";

const enabled = !!process.env.RUN_SERVER_TESTS;
const PY = process.env.PYTHON ?? "python3";
const PORT = 8123 + (process.pid % 1000);

const baseOrbit: Orbit = { azimuth: 0, elevation: 0, radius: 2.5, target: [0, 0, 0] };

function py(args: string[], cwd: string): void {
  const r = spawnSync(PY, ["-m", "splatface.cli", ...args], {
    cwd, encoding: "utf8", timeout: 600_000,
  });
  if (r.status !== 0) {
    throw new Error(`splatface ${args[0]} failed:\n${r.stdout}\n${r.stderr}`);
  }
}

function toArrayBuffer(data: Buffer): ArrayBuffer {
  return data.buffer.slice(data.byteOffset, data.byteOffset + data.byteLength);
}

interface Frame { header: FrameHeader; body: Uint8Array; at: number }

class TestClient {
  ws: WebSocket;
  frames: Frame[] = [];
  messages: any[] = [];
  private waiters: Array<() => void> = [];

  constructor(url: string) {
    this.ws = new WebSocket(url);
    this.ws.on("message", (data: Buffer, isBinary: boolean) => {
      if (isBinary) {
        const buf = toArrayBuffer(data);
        const header = parseFrameHeader(buf);
        this.frames.push({ header, body: frameBody(buf, header), at: performance.now() });
      } else {
        this.messages.push(JSON.parse(data.toString()));
      }
      for (const w of this.waiters.splice(0)) w();
    });
  }

  open(): Promise<any> {
    return new Promise((resolve, reject) => {
      this.ws.once("open", () => this.ws.send(JSON.stringify({ type: "open" })));
      this.ws.once("error", reject);
      void this.until(() => this.messages.find((m) => m.type === "opened"))
        .then(resolve, reject);
    });
  }

  send(opts: RenderOptions): void {
    this.ws.send(JSON.stringify(buildRenderMessage(opts)));
  }

  async until<T>(probe: () => T | undefined, ms = 30_000): Promise<T> {
    const deadline = performance.now() + ms;
    for (;;) {
      const got = probe();
      if (got !== undefined) return got;
      if (performance.now() > deadline) throw new Error("timed out waiting");
      await new Promise<void>((resolve) => {
        this.waiters.push(resolve);
        setTimeout(resolve, 250);
      });
    }
  }

  frame(id: number, ms?: number): Promise<Frame> {
    return this.until(() => this.frames.find((f) => f.header.id === id), ms);
  }

  close(): void {
    this.ws.close();
  }
}

function renderOpts(id: number, over: Partial<RenderOptions> = {}): RenderOptions {
  return {
    id, t: 0,
    cam: orbitCamera(baseOrbit, 256),
    emo: null, sty: null, quality: "full",
    ...over,
  };
}

function percentile(xs: number[], p: number): number {
  const sorted = [...xs].sort((a, b) => a - b);
  return sorted[Math.min(sorted.length - 1, Math.ceil(p * sorted.length) - 1)];
}

describe.skipIf(!enabled)("viewer loop against a live server", () => {
  let dir: string;
  let server: ChildProcess | null = null;

  beforeAll(async () => {
    dir = mkdtempSync(join(tmpdir(), "viewer-it-"));
    py(["gen-data", "--out", join(dir, "data"), "--seed", "0",
        "--splats", "500", "--size", "48", "--frames", "6", "--styles", "1"], dir);
    py(["train", "--stage", "neutral", "--data", join(dir, "data"),
        "--out", join(dir, "runs"), "--iterations", "3",
        "--heldout-every", "3", "--checkpoint-every", "0"], dir);
    py(["train", "--stage", "emotion", "--data", join(dir, "data"),
        "--out", join(dir, "runs"), "--iterations", "2", "--heldout-every", "3",
        "--checkpoint-every", "0",
        "--init-from", join(dir, "runs", "neutral.esgc")], dir);
    server = spawn(PY, ["-m", "splatface.cli", "serve",
      "--checkpoint", join(dir, "runs", "emotion.esgc"),
      "--manifest", join(dir, "data", "manifest_emotional.json"),
      "--port", String(PORT)], { cwd: dir, stdio: "ignore" });
    const deadline = Date.now() + 60_000;
    for (;;) {
      try {
        const res = await fetch(`http://127.0.0.1:${PORT}/healthz`);
        if (res.ok) break;
      } catch { /* not up yet */ }
      if (Date.now() > deadline) throw new Error("server did not come up");
      await new Promise((r) => setTimeout(r, 300));
    }
  }, 600_000);

  afterAll(() => {
    server?.kill();
    if (dir) rmSync(dir, { recursive: true, force: true });
  });

  it("renders a new frame after a slider/camera change", async () => {
    const c = new TestClient(`ws://127.0.0.1:${PORT}/ws`);
    const opened = await c.open();
    expect(opened.frames).toBeGreaterThan(0);

    c.send(renderOpts(1));
    const first = await c.frame(1);
    expect(first.header.width).toBe(256);
    expect(first.body.length).toBe(256 * 256 * 3);

    // emotion-slider change, then a camera orbit change: each yields a frame
    const [a, b] = opened.emotions as string[];
    c.send(renderOpts(2, { emo: { a, b, alpha: 0.5 } }));
    const second = await c.frame(2);
    c.send(renderOpts(3, {
      cam: orbitCamera({ ...baseOrbit, azimuth: 0.4 }, 256),
    }));
    const third = await c.frame(3);
    expect(Buffer.from(second.body).equals(Buffer.from(first.body))).toBe(false);
    expect(Buffer.from(third.body).equals(Buffer.from(first.body))).toBe(false);
    c.close();
  }, 120_000);

  it("p95 request-to-display under 300 ms at 256x256 draft", async () => {
    const c = new TestClient(`ws://127.0.0.1:${PORT}/ws`);
    await c.open();
    // draft halves the requested resolution server-side: ask at 512
    const cam = orbitCamera(baseOrbit, 512);
    const times: number[] = [];
    for (let i = 0; i < 25; i++) {
      const id = 10 + i;
      const t0 = performance.now();
      c.send(renderOpts(id, { cam, quality: "draft" }));
      const f = await c.frame(id);
      expect(f.header.width).toBe(256);
      expect(f.header.height).toBe(256);
      times.push(f.at - t0);
    }
    const p95 = percentile(times.slice(5), 0.95); // skip warmup
    expect(p95).toBeLessThan(300);
    c.close();
  }, 120_000);

  it("drops stale frames under a request burst", async () => {
    const c = new TestClient(`ws://127.0.0.1:${PORT}/ws`);
    await c.open();
    const ids = Array.from({ length: 10 }, (_, i) => 100 + i);
    for (const id of ids) {
      c.send(renderOpts(id, {
        cam: orbitCamera({ ...baseOrbit, azimuth: 0.02 * id }, 128),
        quality: "draft",
      }));
    }
    await c.frame(109, 60_000); // coalescing must surface the latest request
    // server may skip intermediate requests entirely; whatever arrives must
    // pass the gate in nondecreasing order, ending on the newest id
    expect(c.frames.length).toBeLessThanOrEqual(ids.length);
    const gate = new FrameGate();
    const shown: number[] = [];
    for (const f of c.frames) {
      if (gate.accept(f.header.id)) shown.push(f.header.id);
    }
    for (let i = 1; i < shown.length; i++) {
      expect(shown[i]).toBeGreaterThanOrEqual(shown[i - 1]);
    }
    expect(shown[shown.length - 1]).toBe(109);
    expect(gate.displayedId).toBe(109);
    c.close();
  }, 120_000);
});

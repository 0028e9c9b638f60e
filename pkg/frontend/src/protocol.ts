/** Wire protocol: JSON control messages plus binary frame payloads.
 *
 * Binary frame layout (little-endian): u8 protocol version, u32 request id,
 * u16 width, u16 height, then width*height*3 bytes of RGB8 (raw format).
 */

import type { CameraDict } from "./camera.js";

export const PROTOCOL_VERSION = 1;
export const FRAME_HEADER_BYTES = 9;

export interface PairAlpha {
  a: string;
  b: string;
  alpha: number;
}

export interface OpenedMessage {
  type: "opened";
  session: string;
  emotions: string[];
  styles: string[];
  frames: number;
  stage: string;
  version: number;
}

export interface RenderedMessage {
  type: "rendered";
  id: number;
  ms: number;
}

export interface ErrorMessage {
  type: "error";
  id?: number;
  message: string;
}

export type ServerMessage =
  | OpenedMessage
  | RenderedMessage
  | ErrorMessage
  | { type: "closed"; session: string | null };

export interface FrameHeader {
  version: number;
  id: number;
  width: number;
  height: number;
  bodyOffset: number;
}

export function parseFrameHeader(buf: ArrayBuffer): FrameHeader {
  if (buf.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame too short: ${buf.byteLength} bytes`);
  }
  const view = new DataView(buf);
  const version = view.getUint8(0);
  if (version !== PROTOCOL_VERSION) {
    throw new Error(
      `protocol version mismatch: got ${version}, expected ${PROTOCOL_VERSION}`);
  }
  return {
    version,
    id: view.getUint32(1, true),
    width: view.getUint16(5, true),
    height: view.getUint16(7, true),
    bodyOffset: FRAME_HEADER_BYTES,
  };
}

/** Raw RGB8 body of a frame; length-checked against the header. */
export function frameBody(buf: ArrayBuffer, header: FrameHeader): Uint8Array {
  const expected = header.width * header.height * 3;
  const body = new Uint8Array(buf, header.bodyOffset);
  if (body.length !== expected) {
    throw new Error(
      `frame body has ${body.length} bytes, expected ${expected}`);
  }
  return body;
}

const clamp01 = (x: number) => Math.min(1, Math.max(0, x));

export function buildOpenMessage(checkpoint?: string, manifest?: string) {
  const msg: Record<string, unknown> = { type: "open" };
  if (checkpoint) msg.checkpoint = checkpoint;
  if (manifest) msg.manifest = manifest;
  return msg;
}

export interface RenderOptions {
  id: number;
  t: number;
  cam: CameraDict;
  emo: PairAlpha | null;
  sty: PairAlpha | null;
  quality: "draft" | "full";
}

export function buildRenderMessage(opts: RenderOptions) {
  const pair = (p: PairAlpha | null) =>
    p === null ? null : { a: p.a, b: p.b, alpha: clamp01(p.alpha) };
  return {
    type: "render",
    id: opts.id,
    t: opts.t,
    cam: opts.cam,
    emo: pair(opts.emo),
    sty: pair(opts.sty),
    quality: opts.quality,
    format: "raw",
  };
}

/** Viewer state and its mapping to render requests. */

import type { Orbit } from "./camera.js";
import { orbitCamera } from "./camera.js";
import type { PairAlpha, RenderOptions } from "./protocol.js";

export type ConnectionStatus = "disconnected" | "connecting" | "open" | "error";

export interface SessionInfo {
  id: string;
  emotions: string[];
  styles: string[];
  frames: number;
  stage: string;
}

export interface ViewerState {
  status: ConnectionStatus;
  session: SessionInfo | null;
  orbit: Orbit;
  frame: number;
  playing: boolean;
  emotionPair: [string, string] | null;
  alphaE: number;
  stylePair: [string, string] | null;
  alphaS: number;
  styleEnabled: boolean;
  quality: "draft" | "full";
  renderSize: number;
  lastRenderMs: number | null;
}

export function initialState(): ViewerState {
  return {
    status: "disconnected",
    session: null,
    orbit: { azimuth: 0, elevation: 0, radius: 2.5, target: [0, 0, 0] },
    frame: 0,
    playing: false,
    emotionPair: null,
    alphaE: 1,
    stylePair: null,
    alphaS: 1,
    styleEnabled: false,
    quality: "full",
    renderSize: 256,
    lastRenderMs: null,
  };
}

const clamp = (x: number, lo: number, hi: number) =>
  Math.min(hi, Math.max(lo, x));

/** Fold the `opened` reply into the state, defaulting both pickers. */
export function applyOpened(state: ViewerState, info: SessionInfo): ViewerState {
  const pair = (labels: string[]): [string, string] | null =>
    labels.length >= 2 ? [labels[0], labels[1]]
      : labels.length === 1 ? [labels[0], labels[0]] : null;
  return {
    ...state,
    status: "open",
    session: info,
    frame: clamp(state.frame, 0, Math.max(0, info.frames - 1)),
    emotionPair: pair(info.emotions),
    stylePair: pair(info.styles),
  };
}

export function clampState(state: ViewerState): ViewerState {
  const frames = state.session ? state.session.frames : 1;
  return {
    ...state,
    alphaE: clamp(state.alphaE, 0, 1),
    alphaS: clamp(state.alphaS, 0, 1),
    frame: clamp(Math.round(state.frame), 0, Math.max(0, frames - 1)),
    orbit: { ...state.orbit, radius: Math.max(1e-3, state.orbit.radius) },
  };
}

/** Render request options for the current state (id assigned by the caller). */
export function stateToRequest(state: ViewerState, id: number): RenderOptions {
  const s = clampState(state);
  const emo: PairAlpha | null = s.emotionPair
    ? { a: s.emotionPair[0], b: s.emotionPair[1], alpha: s.alphaE }
    : null;
  const sty: PairAlpha | null = s.styleEnabled && s.stylePair
    ? { a: s.stylePair[0], b: s.stylePair[1], alpha: s.alphaS }
    : null;
  return {
    id,
    t: s.frame,
    cam: orbitCamera(s.orbit, s.renderSize),
    emo,
    sty,
    quality: s.quality,
  };
}

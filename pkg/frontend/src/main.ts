import { ViewerApp, type ViewerElements } from "./app.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

const elements: ViewerElements = {
  canvas: byId("view"),
  banner: byId("banner"),
  status: byId("status"),
  emotionA: byId("emotion-a"),
  emotionB: byId("emotion-b"),
  alphaE: byId("alpha-e"),
  styleA: byId("style-a"),
  styleB: byId("style-b"),
  alphaS: byId("alpha-s"),
  styleEnabled: byId("style-enabled"),
  frame: byId("frame"),
  play: byId("play"),
  retry: byId("retry"),
};

const proto = location.protocol === "https:" ? "wss" : "ws";
const app = new ViewerApp(elements, `${proto}://${location.host}/ws`);
app.connect();

import { SessionClient, httpTransport } from "./client";
import { createStore } from "./store";
import type { Mode, RosterEntry } from "./types";
import { render } from "./view";

const PRESET_ROSTER: RosterEntry[] = [
  { id: "teacher", displayName: "Teacher", kind: "teacher", roles: ["TI", "ID"] },
  { id: "assistant", displayName: "Teaching Assistant", kind: "assistant", roles: ["CM", "EC"] },
  { id: "clown", displayName: "Class Clown", kind: "classmate", roles: ["TI", "EC", "CM"] },
  { id: "deep_thinker", displayName: "Deep Thinker", kind: "classmate", roles: ["TI", "ID"] },
  { id: "note_taker", displayName: "Note Taker", kind: "classmate", roles: ["TI", "CM"] },
  { id: "inquisitive", displayName: "Inquisitive Mind", kind: "classmate", roles: ["TI", "EC"] },
  { id: "user", displayName: "You", kind: "user", roles: [] },
];

function rosterFromQuery(params: URLSearchParams): RosterEntry[] {
  const wanted = params.get("roster");
  if (!wanted) return PRESET_ROSTER;
  const ids = new Set(wanted.split(",").concat(["teacher", "user"]));
  return PRESET_ROSTER.filter((entry) => ids.has(entry.id));
}

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  const params = new URLSearchParams(window.location.search);
  const courseId = params.get("course");
  if (!courseId) {
    root.textContent = "add ?course=<id> to join a classroom";
    return;
  }
  const mode = (params.get("mode") ?? "interactive") as Mode;
  const store = createStore();
  const client = new SessionClient(httpTransport("", params.get("token") ?? ""), store);

  const rerender = () =>
    render(root, store.getState(), {
      onIntent: (intent) => void client.dispatchIntent(intent),
      onComposerChange: (text) => store.dispatch({ type: "COMPOSER", text }),
    });
  store.subscribe(rerender);
  rerender();

  await client.join(courseId, rosterFromQuery(params), mode);

  // Tick the waiting-window countdown without a full re-render. Deadlines
  // are in session-clock seconds (wall clock in live deployments).
  setInterval(() => {
    const node = document.querySelector<HTMLElement>(".countdown");
    const state = store.getState();
    if (!node || state.waitingDeadline === null) return;
    const remaining = state.waitingDeadline - Date.now() / 1000;
    node.textContent =
      remaining > 0
        ? `your turn: ${remaining.toFixed(0)}s before the class moves on`
        : "your turn: waiting…";
  }, 500);
}

void boot();

import type { UserIntent, ViewState } from "./types";

export interface ViewHandles {
  onIntent(intent: UserIntent): void;
  onComposerChange(text: string): void;
}

const ROLE_TITLES: Record<string, string> = {
  TI: "teaching & initiation",
  ID: "in-depth discussion",
  EC: "emotional companionship",
  CM: "classroom management",
};

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function renderRoster(state: ViewState): HTMLElement {
  const bar = el("div", "roster");
  for (const member of state.roster) {
    const chip = el("span", `chip chip-${member.kind}`, member.displayName);
    for (const role of member.roles) {
      const badge = el("span", "badge", role);
      badge.title = ROLE_TITLES[role] ?? role;
      chip.appendChild(badge);
    }
    bar.appendChild(chip);
  }
  return bar;
}

function renderSlide(state: ViewState): HTMLElement {
  const pane = el("div", "slide-pane");
  if (state.currentPage !== null && state.courseId) {
    const img = el("img", "slide");
    img.src = `/courses/${state.courseId}/pages/${state.currentPage}`;
    img.alt = `Slide page ${state.currentPage}`;
    pane.appendChild(img);
    pane.appendChild(el("div", "page-number", `page ${state.currentPage}`));
  } else {
    pane.appendChild(el("div", "placeholder", "waiting for the first slide"));
  }
  return pane;
}

function renderTimeline(state: ViewState): HTMLElement {
  const list = el("ol", "timeline");
  for (const item of state.timeline) {
    if (item.kind === "utterance") {
      const li = el("li", item.pending ? "bubble pending" : "bubble");
      li.dataset["seq"] = item.seq === null ? "" : String(item.seq);
      li.appendChild(el("span", `speaker speaker-${item.speaker}`, item.speaker));
      li.appendChild(el("span", "text", item.text));
      list.appendChild(li);
    } else if (item.kind === "page_change") {
      const page = item.action?.["page"];
      list.appendChild(el("li", "system", `→ slide ${page ?? "?"}`));
    } else if (item.kind === "phase_change" && item.text === "paused") {
      list.appendChild(el("li", "system", "class paused"));
    } else if (item.kind === "error") {
      list.appendChild(el("li", "system error", item.text));
    }
  }
  return list;
}

function renderStatus(state: ViewState, handles: ViewHandles): HTMLElement {
  const bar = el("div", "status-bar");
  bar.appendChild(el("span", `conn conn-${state.connection}`, state.connection));
  bar.appendChild(el("span", "mode", state.mode));
  const modeToggle = el("button", "", state.mode === "continuous" ? "go interactive" : "go continuous");
  modeToggle.onclick = () =>
    handles.onIntent({
      kind: "set_mode",
      mode: state.mode === "continuous" ? "interactive" : "continuous",
    });
  bar.appendChild(modeToggle);
  const pause = el("button", "", state.phase === "paused" ? "resume" : "pause");
  pause.onclick = () => handles.onIntent({ kind: state.phase === "paused" ? "resume" : "pause" });
  bar.appendChild(pause);
  if (state.waitingDeadline !== null) {
    // Visible countdown: the class moves on when it reaches zero unless
    // the student jumps in first.
    const countdown = el("span", "countdown");
    countdown.dataset["deadline"] = String(state.waitingDeadline);
    countdown.textContent = "your turn: waiting…";
    bar.appendChild(countdown);
  }
  if (state.notice) {
    bar.appendChild(el("span", "notice", state.notice));
  }
  return bar;
}

function renderComposer(state: ViewState, handles: ViewHandles): HTMLElement {
  const form = el("form", "composer");
  const input = el("input");
  input.type = "text";
  input.value = state.composer;
  input.placeholder = "interrupt, ask, steer…";
  input.oninput = () => handles.onComposerChange(input.value);
  const send = el("button", "", "send");
  send.type = "submit";
  form.onsubmit = (event) => {
    event.preventDefault();
    const text = input.value.trim();
    if (text) handles.onIntent({ kind: "send_message", text });
  };
  form.appendChild(input);
  form.appendChild(send);
  return form;
}

/** Full re-render; one state in, one DOM out, no retained widgets. */
export function render(root: HTMLElement, state: ViewState, handles: ViewHandles): void {
  root.replaceChildren(
    renderStatus(state, handles),
    renderRoster(state),
    renderSlide(state),
    renderTimeline(state),
    renderComposer(state, handles),
  );
}

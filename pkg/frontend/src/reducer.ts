import type {
  ConnectionStatus,
  EventEnvelope,
  Mode,
  Phase,
  RosterEntry,
  TimelineItem,
  UserIntent,
  ViewState,
} from "./types";

export type Action =
  | { type: "CONNECTION"; status: ConnectionStatus }
  | { type: "JOINED"; sessionId: string; courseId: string; roster: RosterEntry[]; mode: Mode; phase: Phase }
  | { type: "SERVER_EVENT"; envelope: EventEnvelope }
  | { type: "INTENT_SENT"; intent: UserIntent; localId: string }
  | { type: "INTENT_CONFIRMED"; localId: string; seq: number | null }
  | { type: "INTENT_REJECTED"; localId: string; reason: string }
  | { type: "COMPOSER"; text: string }
  | { type: "NOTICE_CLEARED" };

function insertBySeq(timeline: TimelineItem[], item: TimelineItem): TimelineItem[] {
  // Confirmed items carry a seq; optimistic echoes (seq null) stay at the end.
  const confirmed = timeline.filter((t) => t.seq !== null);
  const optimistic = timeline.filter((t) => t.seq === null);
  if (item.seq !== null && confirmed.some((t) => t.seq === item.seq)) {
    return timeline; // duplicate delivery; rendered order never double-counts a seq
  }
  const merged = [...confirmed, item].sort((a, b) => (a.seq ?? 0) - (b.seq ?? 0));
  return [...merged, ...optimistic];
}

function applyServerEvent(state: ViewState, envelope: EventEnvelope): ViewState {
  const { kind, payload, seq } = envelope;
  let next: ViewState = { ...state, lastSeq: Math.max(state.lastSeq, seq) };

  if (kind === "utterance" && payload.speaker === "user") {
    // The echo of one of our own messages: confirm the oldest matching
    // optimistic bubble instead of rendering the message twice.
    const match = next.timeline.find(
      (t) => t.pending && t.speaker === "user" && t.text === payload.text,
    );
    if (match) {
      next = {
        ...next,
        timeline: insertBySeq(
          next.timeline.filter((t) => t !== match),
          { ...match, seq, pending: false, localId: undefined },
        ),
      };
      return next;
    }
  }

  next = {
    ...next,
    timeline: insertBySeq(next.timeline, {
      seq,
      kind,
      speaker: payload.speaker,
      text: payload.text,
      action: payload.action,
      pending: false,
    }),
  };

  if (kind === "page_change") {
    const page = payload.action?.page;
    if (typeof page === "number") {
      next = { ...next, currentPage: page };
    }
  } else if (kind === "phase_change") {
    const action = payload.action ?? {};
    const text = payload.text as Phase;
    if (["awaiting_decision", "waiting", "executing", "paused", "closed"].includes(text)) {
      next = { ...next, phase: text };
    }
    next =
      text === "waiting" && typeof action["deadline"] === "number"
        ? { ...next, waitingDeadline: action["deadline"] as number }
        : { ...next, waitingDeadline: null };
    if (action["command"] === "set_mode" && typeof action["mode"] === "string") {
      next = { ...next, mode: action["mode"] as Mode };
    }
    if (text === "closed") {
      next = { ...next, connection: "closed" };
    }
  }
  return next;
}

export function reducer(state: ViewState, action: Action): ViewState {
  switch (action.type) {
    case "CONNECTION":
      return { ...state, connection: action.status };

    case "JOINED":
      return {
        ...state,
        sessionId: action.sessionId,
        courseId: action.courseId,
        roster: action.roster,
        mode: action.mode,
        phase: action.phase,
        connection: "connecting",
      };

    case "SERVER_EVENT":
      return applyServerEvent(state, action.envelope);

    case "INTENT_SENT": {
      if (action.intent.kind !== "send_message") {
        return state; // control intents render only once server-confirmed
      }
      const echo: TimelineItem = {
        seq: null,
        localId: action.localId,
        kind: "utterance",
        speaker: "user",
        text: action.intent.text,
        action: null,
        pending: true,
      };
      return { ...state, composer: "", timeline: [...state.timeline, echo] };
    }

    case "INTENT_CONFIRMED": {
      // A confirmed message cancels the countdown (the waiting window was
      // preempted server-side); the echo itself resolves via SERVER_EVENT.
      return { ...state, waitingDeadline: null };
    }

    case "INTENT_REJECTED": {
      const timeline = state.timeline.filter((t) => t.localId !== action.localId);
      return { ...state, timeline, notice: action.reason };
    }

    case "COMPOSER":
      return { ...state, composer: action.text };

    case "NOTICE_CLEARED":
      return { ...state, notice: null };

    default:
      return state;
  }
}

// Wire contract with the classroom service (see the repository README:
// event envelopes mirror transcript records one-to-one, keyed by seq).

export type EventKind = "utterance" | "page_change" | "phase_change" | "error";

export interface EventPayload {
  ts: number;
  speaker: string;
  text: string;
  action: Record<string, unknown> | null;
}

export interface EventEnvelope {
  seq: number;
  session_id: string;
  kind: EventKind;
  payload: EventPayload;
}

export type Mode = "continuous" | "interactive";
export type Phase = "awaiting_decision" | "waiting" | "executing" | "paused" | "closed";

export interface RosterEntry {
  id: string;
  displayName: string;
  kind: "teacher" | "assistant" | "classmate" | "user";
  roles: string[]; // subset of TI / ID / EC / CM
}

export interface TimelineItem {
  seq: number | null; // null while an optimistic echo awaits its server seq
  localId?: string;
  kind: EventKind;
  speaker: string;
  text: string;
  action: Record<string, unknown> | null;
  pending: boolean;
}

export type ConnectionStatus = "idle" | "connecting" | "live" | "dropped" | "closed";

export interface ViewState {
  connection: ConnectionStatus;
  sessionId: string | null;
  courseId: string | null;
  roster: RosterEntry[];
  mode: Mode;
  phase: Phase;
  currentPage: number | null;
  timeline: TimelineItem[];
  waitingDeadline: number | null; // session-clock seconds; drives the countdown
  lastSeq: number;
  composer: string;
  notice: string | null;
}

export type UserIntent =
  | { kind: "send_message"; text: string }
  | { kind: "pause" }
  | { kind: "resume" }
  | { kind: "set_mode"; mode: Mode }
  | { kind: "seek_page"; cursor: number };

export const initialViewState: ViewState = {
  connection: "idle",
  sessionId: null,
  courseId: null,
  roster: [],
  mode: "continuous",
  phase: "awaiting_decision",
  currentPage: null,
  timeline: [],
  waitingDeadline: null,
  lastSeq: 0,
  composer: "",
  notice: null,
};

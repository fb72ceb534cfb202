import type { Action } from "./reducer";
import type { Store } from "./store";
import { EventBuffer } from "./timeline";
import type { EventEnvelope, Mode, RosterEntry, UserIntent } from "./types";

export interface TransportError {
  status: number;
  message: string;
}

/** Thin I/O seam so tests can drive the client without a network. */
export interface Transport {
  post(path: string, body: unknown): Promise<unknown>;
  getText(path: string): Promise<string>;
  /** Open an event stream from `since`; returns a close function. */
  stream(
    path: string,
    since: number,
    onEvent: (envelope: EventEnvelope) => void,
    onDrop: () => void,
  ): () => void;
}

export interface SessionClientOptions {
  reconnectDelayMs?: number;
  maxReconnects?: number;
}

interface CreateSessionReply {
  session_id: string;
  roster: string[];
  mode: Mode;
  phase: string;
}

let nextLocalId = 0;

export class SessionClient {
  readonly buffer = new EventBuffer();
  private closeStream: (() => void) | null = null;
  private reconnects = 0;

  constructor(
    private readonly transport: Transport,
    private readonly store: Store,
    private readonly options: SessionClientOptions = {},
  ) {}

  private dispatch(action: Action): void {
    this.store.dispatch(action);
  }

  /** Create a session over a published course and subscribe to its events. */
  async join(courseId: string, roster: RosterEntry[], mode: Mode): Promise<void> {
    this.dispatch({ type: "CONNECTION", status: "connecting" });
    let reply: CreateSessionReply;
    try {
      reply = (await this.transport.post("/sessions", {
        course_id: courseId,
        roster: roster.filter((r) => r.kind !== "user").map((r) => r.id),
        mode,
      })) as CreateSessionReply;
    } catch (error) {
      this.dispatch({ type: "CONNECTION", status: "idle" });
      this.dispatch({
        type: "INTENT_REJECTED",
        localId: "",
        reason: `could not join: ${describeError(error)}`,
      });
      throw error;
    }
    this.dispatch({
      type: "JOINED",
      sessionId: reply.session_id,
      courseId,
      roster,
      mode: reply.mode,
      phase: reply.phase as never,
    });
    this.subscribe();
  }

  /** (Re)open the event stream, resuming after the last delivered seq. */
  subscribe(): void {
    const sessionId = this.store.getState().sessionId;
    if (!sessionId) throw new Error("join a session first");
    this.closeStream?.();
    // Mark live before opening: a transport may deliver (and even drop)
    // synchronously, and that outcome must not be overwritten.
    this.dispatch({ type: "CONNECTION", status: "live" });
    this.closeStream = this.transport.stream(
      `/sessions/${sessionId}/events`,
      this.buffer.lastSeq,
      (envelope) => {
        for (const released of this.buffer.push(envelope)) {
          this.dispatch({ type: "SERVER_EVENT", envelope: released });
        }
      },
      () => this.onDrop(),
    );
  }

  private onDrop(): void {
    if (this.store.getState().connection === "closed") return;
    this.dispatch({ type: "CONNECTION", status: "dropped" });
    const max = this.options.maxReconnects ?? Infinity;
    if (this.reconnects >= max) return;
    this.reconnects += 1;
    const delay = this.options.reconnectDelayMs ?? 1000;
    setTimeout(() => {
      if (this.store.getState().connection === "dropped") this.subscribe();
    }, delay);
  }

  /** Optimistically apply a user intent and confirm it with the server. */
  async dispatchIntent(intent: UserIntent): Promise<void> {
    const sessionId = this.store.getState().sessionId;
    if (!sessionId) throw new Error("join a session first");
    const localId = `local-${nextLocalId++}`;
    this.dispatch({ type: "INTENT_SENT", intent, localId });
    try {
      if (intent.kind === "send_message") {
        const reply = (await this.transport.post(
          `/sessions/${sessionId}/messages`,
          { text: intent.text },
        )) as { seq: number };
        this.dispatch({ type: "INTENT_CONFIRMED", localId, seq: reply.seq });
      } else {
        const body =
          intent.kind === "set_mode"
            ? { command: "set_mode", mode: intent.mode }
            : intent.kind === "seek_page"
              ? { command: "seek", cursor: intent.cursor }
              : { command: intent.kind };
        await this.transport.post(`/sessions/${sessionId}/control`, body);
        this.dispatch({ type: "INTENT_CONFIRMED", localId, seq: null });
      }
    } catch (error) {
      this.dispatch({
        type: "INTENT_REJECTED",
        localId,
        reason: describeError(error),
      });
    }
  }

  /** The server-side record of this session, for integrity comparisons. */
  async fetchTranscript(): Promise<string> {
    const sessionId = this.store.getState().sessionId;
    if (!sessionId) throw new Error("join a session first");
    return this.transport.getText(`/sessions/${sessionId}/transcript`);
  }

  close(): void {
    this.closeStream?.();
    this.closeStream = null;
  }
}

function describeError(error: unknown): string {
  if (error && typeof error === "object" && "message" in error) {
    return String((error as { message: unknown }).message);
  }
  return String(error);
}

/** Browser transport: fetch for commands, EventSource for the stream. */
export function httpTransport(baseUrl: string, authToken = ""): Transport {
  const headers: Record<string, string> = { "Content-Type": "application/json" };
  if (authToken) headers["Authorization"] = `Bearer ${authToken}`;
  return {
    async post(path, body) {
      const response = await fetch(baseUrl + path, {
        method: "POST",
        headers,
        body: JSON.stringify(body),
      });
      if (!response.ok) {
        throw { status: response.status, message: await response.text() } as TransportError;
      }
      return response.json();
    },
    async getText(path) {
      const response = await fetch(baseUrl + path, { headers });
      if (!response.ok) {
        throw { status: response.status, message: await response.text() } as TransportError;
      }
      return response.text();
    },
    stream(path, since, onEvent, onDrop) {
      const source = new EventSource(`${baseUrl}${path}?since=${since}`);
      const handler = (event: MessageEvent<string>) => {
        onEvent(JSON.parse(event.data) as EventEnvelope);
      };
      for (const kind of ["utterance", "page_change", "phase_change", "error"]) {
        source.addEventListener(kind, handler as EventListener);
      }
      source.onerror = () => {
        source.close();
        onDrop();
      };
      return () => source.close();
    },
  };
}

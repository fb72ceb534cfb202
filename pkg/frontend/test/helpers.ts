import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import type { Transport } from "../src/client";
import type { EventEnvelope, EventKind } from "../src/types";

const FIXTURE = join(dirname(fileURLToPath(import.meta.url)), "..", "fixtures", "transcript.jsonl");

interface TranscriptRecord {
  seq: number;
  ts: number;
  speaker: string;
  kind: string;
  text: string;
  action: Record<string, unknown> | null;
}

export function loadFixtureLines(): string[] {
  return readFileSync(FIXTURE, "utf-8").trim().split("\n");
}

/** Transcript records map one-to-one onto stream envelopes (same seq). */
export function envelopeFromRecord(record: TranscriptRecord, sessionId: string): EventEnvelope {
  return {
    seq: record.seq,
    session_id: sessionId,
    kind: record.kind as EventKind,
    payload: {
      ts: record.ts,
      speaker: record.speaker,
      text: record.text,
      action: record.action,
    },
  };
}

export function loadFixtureEnvelopes(sessionId = "s-fixture"): EventEnvelope[] {
  return loadFixtureLines()
    .map((line) => JSON.parse(line) as TranscriptRecord)
    .filter((record) => record.kind !== "meta")
    .map((record) => envelopeFromRecord(record, sessionId));
}

/** Deterministic Fisher-Yates so shuffle failures reproduce. */
export function seededShuffle<T>(items: T[], seed: number): T[] {
  let state = seed >>> 0;
  const next = () => {
    state = (state * 1664525 + 1013904223) >>> 0;
    return state / 2 ** 32;
  };
  const out = [...items];
  for (let i = out.length - 1; i > 0; i--) {
    const j = Math.floor(next() * (i + 1));
    const tmp = out[i]!;
    out[i] = out[j]!;
    out[j] = tmp;
  }
  return out;
}

interface Subscriber {
  since: number;
  onEvent: (envelope: EventEnvelope) => void;
  onDrop: () => void;
  open: boolean;
  delivered: number;
}

/**
 * In-memory stand-in for the classroom service, speaking the same wire
 * shapes: POST /sessions, /messages, /control; SSE-equivalent stream with
 * `since` resume; transcript endpoint returning the JSONL lines.
 */
export class FakeServer implements Transport {
  envelopes: EventEnvelope[] = [];
  sessionId = "s-fake01";
  phase = "awaiting_decision";
  mode = "interactive";
  cursor = 0;
  dropAfter: number | null = null;
  rejectNextPost: { status: number; message: string } | null = null;
  posts: Array<{ path: string; body: unknown }> = [];
  private subscribers: Subscriber[] = [];
  private nextSeq = 1;

  emit(kind: EventKind, payload: Partial<EventEnvelope["payload"]>): EventEnvelope {
    const envelope: EventEnvelope = {
      seq: this.nextSeq++,
      session_id: this.sessionId,
      kind,
      payload: { ts: 0, speaker: "", text: "", action: null, ...payload },
    };
    this.envelopes.push(envelope);
    this.flush();
    return envelope;
  }

  /** Preload already-persisted events (e.g. the fixture transcript). */
  preload(envelopes: EventEnvelope[]): void {
    this.envelopes.push(...envelopes);
    this.nextSeq = Math.max(...envelopes.map((e) => e.seq)) + 1;
  }

  private flush(): void {
    for (const sub of this.subscribers) {
      if (!sub.open) continue;
      for (const envelope of this.envelopes) {
        if (envelope.seq <= sub.since) continue;
        if (this.dropAfter !== null && sub.delivered >= this.dropAfter) {
          sub.open = false;
          sub.onDrop();
          break;
        }
        sub.since = envelope.seq;
        sub.delivered += 1;
        sub.onEvent(envelope);
      }
    }
  }

  async post(path: string, body: unknown): Promise<unknown> {
    // Hop off the caller's synchronous path, like a real network would,
    // so optimistic state is observable before the server answers.
    await flushTimers();
    this.posts.push({ path, body });
    if (this.rejectNextPost) {
      const rejection = this.rejectNextPost;
      this.rejectNextPost = null;
      throw rejection;
    }
    if (path === "/sessions") {
      return {
        session_id: this.sessionId,
        roster: ["teacher", "user"],
        mode: this.mode,
        phase: this.phase,
      };
    }
    if (path.endsWith("/messages")) {
      const text = (body as { text: string }).text;
      const user = this.emit("utterance", { speaker: "user", text });
      this.emit("utterance", {
        speaker: "assistant",
        text: `Answer the student: ${text}`,
        action: { type: "speak" },
      });
      this.emit("phase_change", {
        text: "waiting",
        action: { deadline: 8.0, tau: 8.0 },
      });
      this.phase = "waiting";
      return { seq: user.seq };
    }
    if (path.endsWith("/control")) {
      const command = (body as { command: string }).command;
      if (command === "pause") {
        this.phase = "paused";
        this.emit("phase_change", { text: "paused", action: { command } });
      } else if (command === "resume") {
        this.phase = "awaiting_decision";
        this.emit("phase_change", { text: "awaiting_decision", action: { command } });
      } else if (command === "seek") {
        this.cursor = (body as { cursor: number }).cursor;
        this.emit("page_change", {
          action: { type: "Seek", cursor: this.cursor, page: this.cursor + 1 },
        });
      } else if (command === "set_mode") {
        this.mode = (body as { mode: string }).mode;
        this.emit("phase_change", {
          text: this.phase,
          action: { command, mode: this.mode },
        });
      }
      return { phase: this.phase, mode: this.mode, cursor: this.cursor };
    }
    throw { status: 404, message: `no such path ${path}` };
  }

  async getText(path: string): Promise<string> {
    if (!path.endsWith("/transcript")) throw { status: 404, message: path };
    const meta = JSON.stringify({
      seq: 0, ts: 0, speaker: "", kind: "meta", text: "",
      action: { session_id: this.sessionId },
    });
    const lines = this.envelopes.map((e) =>
      JSON.stringify({
        seq: e.seq, ts: e.payload.ts, speaker: e.payload.speaker,
        kind: e.kind, text: e.payload.text, action: e.payload.action,
      }),
    );
    return [meta, ...lines].join("\n") + "\n";
  }

  stream(
    _path: string,
    since: number,
    onEvent: (envelope: EventEnvelope) => void,
    onDrop: () => void,
  ): () => void {
    const sub: Subscriber = { since, onEvent, onDrop, open: true, delivered: 0 };
    this.subscribers.push(sub);
    this.flush();
    return () => {
      sub.open = false;
    };
  }
}

export function flushTimers(): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, 0));
}

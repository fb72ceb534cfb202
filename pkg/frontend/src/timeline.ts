import type { EventEnvelope } from "./types";

/**
 * Reorder buffer for server-push events.
 *
 * The service guarantees consecutive seq values per session; the network
 * does not guarantee arrival order, and reconnects can replay. The buffer
 * releases events strictly in seq order, holding back anything early and
 * dropping anything already seen.
 */
export class EventBuffer {
  private pending = new Map<number, EventEnvelope>();
  private last: number;

  constructor(since = 0) {
    this.last = since;
  }

  get lastSeq(): number {
    return this.last;
  }

  /** True while out-of-order events are parked waiting for a gap to fill. */
  get hasGap(): boolean {
    return this.pending.size > 0;
  }

  /** Accept one envelope; returns the events that became releasable, in order. */
  push(envelope: EventEnvelope): EventEnvelope[] {
    if (envelope.seq <= this.last || this.pending.has(envelope.seq)) {
      return []; // duplicate (replayed after resume, or double delivery)
    }
    this.pending.set(envelope.seq, envelope);
    const released: EventEnvelope[] = [];
    for (;;) {
      const next = this.pending.get(this.last + 1);
      if (next === undefined) break;
      this.pending.delete(next.seq);
      this.last = next.seq;
      released.push(next);
    }
    return released;
  }
}

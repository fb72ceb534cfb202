import { describe, expect, it } from "vitest";

import { reducer } from "../src/reducer";
import { createStore } from "../src/store";
import { EventBuffer } from "../src/timeline";
import { initialViewState } from "../src/types";
import { loadFixtureEnvelopes, seededShuffle } from "./helpers";

describe("event buffer", () => {
  it("releases contiguous runs and holds back gaps", () => {
    const envelopes = loadFixtureEnvelopes();
    const buffer = new EventBuffer();
    expect(buffer.push(envelopes[2]!)).toEqual([]); // seq 3 early
    expect(buffer.hasGap).toBe(true);
    expect(buffer.push(envelopes[0]!).map((e) => e.seq)).toEqual([1]);
    expect(buffer.push(envelopes[1]!).map((e) => e.seq)).toEqual([2, 3]);
    expect(buffer.hasGap).toBe(false);
  });

  it("drops duplicates and already-delivered events", () => {
    const [first, second] = loadFixtureEnvelopes();
    const buffer = new EventBuffer();
    expect(buffer.push(first!).length).toBe(1);
    expect(buffer.push(first!)).toEqual([]);
    expect(buffer.push(second!).length).toBe(1);
    expect(buffer.push(first!)).toEqual([]);
  });
});

describe("timeline integrity under shuffled delivery", () => {
  it("renders in seq order no matter the arrival order", () => {
    const envelopes = loadFixtureEnvelopes();
    const expectedSeqs = envelopes.map((e) => e.seq);
    for (let round = 0; round < 25; round++) {
      const buffer = new EventBuffer();
      const store = createStore();
      for (const envelope of seededShuffle(envelopes, 1000 + round)) {
        for (const released of buffer.push(envelope)) {
          store.dispatch({ type: "SERVER_EVENT", envelope: released });
        }
      }
      const rendered = store.getState().timeline.map((t) => t.seq);
      expect(rendered).toEqual(expectedSeqs);
    }
  });

  it("double delivery never double-renders a seq", () => {
    const envelopes = loadFixtureEnvelopes();
    let state = initialViewState;
    for (const envelope of [...envelopes, ...envelopes]) {
      state = reducer(state, { type: "SERVER_EVENT", envelope });
    }
    const seqs = state.timeline.map((t) => t.seq);
    expect(seqs).toEqual(envelopes.map((e) => e.seq));
  });

  it("tracks the slide from the last page_change", () => {
    const envelopes = loadFixtureEnvelopes();
    const store = createStore();
    for (const envelope of envelopes) {
      store.dispatch({ type: "SERVER_EVENT", envelope });
    }
    const lastPage = [...envelopes]
      .reverse()
      .find((e) => e.kind === "page_change" && typeof e.payload.action?.["page"] === "number");
    expect(store.getState().currentPage).toBe(lastPage?.payload.action?.["page"]);
  });

  it("tracks phase and waiting deadline from phase_change events", () => {
    const envelopes = loadFixtureEnvelopes();
    const store = createStore();
    for (const envelope of envelopes) {
      store.dispatch({ type: "SERVER_EVENT", envelope });
      const state = store.getState();
      if (envelope.kind === "phase_change" && envelope.payload.text === "waiting") {
        expect(state.waitingDeadline).toBe(envelope.payload.action?.["deadline"]);
      }
    }
    expect(store.getState().phase).toBe("closed");
    expect(store.getState().connection).toBe("closed");
  });
});

import type { Action } from "./reducer";
import { reducer } from "./reducer";
import type { ViewState } from "./types";
import { initialViewState } from "./types";

export interface Store {
  getState(): ViewState;
  dispatch(action: Action): void;
  subscribe(listener: (state: ViewState) => void): () => void;
}

export function createStore(initial: ViewState = initialViewState): Store {
  let state = initial;
  const listeners = new Set<(state: ViewState) => void>();
  return {
    getState: () => state,
    dispatch(action) {
      state = reducer(state, action);
      for (const listener of listeners) listener(state);
    },
    subscribe(listener) {
      listeners.add(listener);
      return () => listeners.delete(listener);
    },
  };
}

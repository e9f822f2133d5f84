import { describe, expect, it } from "vitest";

import { Store } from "../src/state.js";

function drafted(): Store {
  const store = new Store();
  store.startSession("s1", [64, 64]);
  store.addPendingKnot({ x: 1, y: 2 });
  store.addPendingKnot({ x: 10, y: 12 });
  store.finishPending();
  return store;
}

describe("draft guards", () => {
  it("refuses to finish a polyline with fewer than 2 knots", () => {
    const store = new Store();
    store.startSession("s1", [64, 64]);
    expect(store.finishPending()).toBe(false);
    store.addPendingKnot({ x: 5, y: 5 });
    expect(store.canFinishPending()).toBe(false);
    expect(store.finishPending()).toBe(false);
    expect(store.get().bodies).toHaveLength(0);
    store.addPendingKnot({ x: 9, y: 9 });
    expect(store.finishPending()).toBe(true);
    expect(store.get().bodies).toHaveLength(1);
  });

  it("ignores clicks before a session exists", () => {
    const store = new Store();
    store.addPendingKnot({ x: 1, y: 1 });
    expect(store.get().pending).toHaveLength(0);
  });

  it("loading a new frame resets bodies but keeps view settings", () => {
    const store = drafted();
    store.update({ zoom: 8, mode: "polyline" });
    store.startSession("s2", [32, 32]);
    expect(store.get().bodies).toHaveLength(0);
    expect(store.get().zoom).toBe(8);
    expect(store.get().mode).toBe("polyline");
  });
});

describe("server mirrors", () => {
  it("replaces draft geometry with the server echo", () => {
    const store = drafted();
    store.splinesAccepted([{ knots: [[1, 2, 1], [10, 12, 1]] }]);
    const body = store.get().bodies[0]!;
    expect(body.status).toBe("draft");
    expect(body.chain?.knots[0]).toEqual([1, 2, 1]);
  });

  it("a rejected submission keeps drafts and pins the complaint", () => {
    const store = drafted();
    store.splinesRejected("each knot must be [x, y] or [x, y, w]");
    expect(store.get().bodies).toHaveLength(1);
    expect(store.get().bodies[0]!.fault).toMatch(/knot/);
    expect(store.get().notice).toMatch(/knot/);
  });

  it("job lifecycle moves statuses draft -> refining -> refined", () => {
    const store = drafted();
    store.jobStarted("j1");
    expect(store.get().bodies[0]!.status).toBe("refining");
    expect(store.get().job?.state).toBe("queued");

    store.jobPolled({ id: "j1", state: "running", progress: { phase: 2, step: 40 }, error: null });
    expect(store.get().job?.progress.phase).toBe(2);

    store.jobDone(
      { id: "j1", state: "done", progress: { phase: 3, step: 99 }, error: null },
      [{ knots: [[1.1, 2.2, 0.5], [9.9, 11.8, 0.5]] }],
      [[2.0, 2.1]],
      { finalRecon: 1e-4, backgroundRecon: 1e-2, success: true },
    );
    const body = store.get().bodies[0]!;
    expect(body.status).toBe("refined");
    expect(body.widths).toEqual([2.0, 2.1]);
    expect(store.get().loss?.success).toBe(true);
  });

  it("a failed job restores drafts for redraw", () => {
    const store = drafted();
    store.jobStarted("j1");
    store.jobFailed({
      id: "j1",
      state: "failed",
      progress: { phase: 2, step: 10 },
      error: "RefinementError: every seed diverged",
    });
    expect(store.get().bodies[0]!.status).toBe("draft");
    expect(store.get().notice).toMatch(/diverged/);
  });
});

describe("accept locking", () => {
  function refined(): Store {
    const store = drafted();
    store.jobStarted("j1");
    store.jobDone(
      { id: "j1", state: "done", progress: { phase: 3, step: 99 }, error: null },
      [{ knots: [[1, 2, 1], [10, 12, 1]] }, { knots: [[5, 5, 1], [20, 20, 1]] }],
      [[2], [2]],
      { finalRecon: 1e-4, backgroundRecon: 1e-2, success: true },
    );
    return store;
  }

  it("accepted bodies cannot be deleted", () => {
    const store = refined();
    store.acceptedFlags([true, false]);
    expect(store.get().bodies[0]!.status).toBe("accepted");
    expect(store.removeBody(0)).toBe(false);
    expect(store.removeBody(1)).toBe(true);
    expect(store.get().bodies).toHaveLength(1);
  });

  it("accepted indices feed the export query", () => {
    const store = refined();
    store.acceptedFlags([false, true]);
    expect(store.acceptedIndices()).toEqual([1]);
    store.acceptedFlags([true, true]);
    expect(store.acceptedIndices()).toEqual([0, 1]);
  });

  it("flags from the export response overwrite local accepts", () => {
    const store = refined();
    store.acceptedFlags([true, true]);
    store.acceptedFlags([false, true]);
    expect(store.get().bodies.map((b) => b.status)).toEqual(["refined", "accepted"]);
  });
});

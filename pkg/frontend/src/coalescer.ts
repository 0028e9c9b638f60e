/** Client-side request pacing and stale-frame rejection.
 *
 * The scheduler keeps at most one render request in flight.  While waiting,
 * newer state snapshots replace the queued one (latest wins), so a slider
 * drag burst costs one in-flight render plus one catch-up render.  The frame
 * gate drops any frame older than the newest one already displayed.
 */

export class RequestScheduler<S> {
  private nextId = 1;
  private inFlightId: number | null = null;
  private queued: S | null = null;

  constructor(private readonly send: (state: S, id: number) => void) {}

  /** Request a render for `state`; coalesces while one is in flight. */
  update(state: S): void {
    if (this.inFlightId !== null) {
      this.queued = state; // replaces any previously queued state
      return;
    }
    this.dispatch(state);
  }

  /** Call when the in-flight request completed (frame or error). */
  settle(id: number): void {
    if (id !== this.inFlightId) {
      return; // response for an older request; the newer one is still out
    }
    this.inFlightId = null;
    if (this.queued !== null) {
      const state = this.queued;
      this.queued = null;
      this.dispatch(state);
    }
  }

  /** Drop any queued state and forget the in-flight id (e.g. on reconnect). */
  reset(): void {
    this.inFlightId = null;
    this.queued = null;
  }

  get pending(): boolean {
    return this.inFlightId !== null || this.queued !== null;
  }

  get lastIssuedId(): number {
    return this.nextId - 1;
  }

  private dispatch(state: S): void {
    const id = this.nextId++;
    this.inFlightId = id;
    this.send(state, id);
  }
}

/** Accepts only frames at least as new as everything already displayed. */
export class FrameGate {
  private latestDisplayed = 0;

  accept(id: number): boolean {
    if (id < this.latestDisplayed) {
      return false;
    }
    this.latestDisplayed = id;
    return true;
  }

  get displayedId(): number {
    return this.latestDisplayed;
  }

  reset(): void {
    this.latestDisplayed = 0;
  }
}

/**
 * Last-writer-wins request sequencing: overlapping in-flight responses are
 * resolved by sequence number and stale ones are dropped.
 */

export class LatestWins<T> {
  private issued = 0;
  private rendered = 0;

  /** Tag an outgoing request. */
  next(): number {
    return ++this.issued;
  }

  /** True when a response with this tag should be rendered. */
  accept(tag: number): boolean {
    if (tag <= this.rendered) {
      return false;
    }
    this.rendered = tag;
    return true;
  }

  get inFlight(): number {
    return this.issued - this.rendered;
  }
}

/**
 * Run an async request under last-writer-wins; `render` fires only when no
 * newer request has already landed.
 */
export async function submitLatest<T>(
  tracker: LatestWins<T>,
  call: () => Promise<T>,
  render: (value: T) => void,
  onError?: (err: unknown) => void,
): Promise<void> {
  const tag = tracker.next();
  try {
    const value = await call();
    if (tracker.accept(tag)) {
      render(value);
    }
  } catch (err) {
    if (onError) {
      onError(err);
    }
  }
}

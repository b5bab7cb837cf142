/**
 * Trailing-edge debounce with a guaranteed maximum call rate, used to keep
 * slider drags at or below 4 requests per second.
 */

export const MIN_INTERVAL_MS = 250;

export type Scheduler = {
  setTimeout: (fn: () => void, ms: number) => unknown;
  clearTimeout: (handle: unknown) => void;
  now: () => number;
};

const realScheduler: Scheduler = {
  setTimeout: (fn, ms) => setTimeout(fn, ms),
  clearTimeout: (handle) => clearTimeout(handle as ReturnType<typeof setTimeout>),
  now: () => Date.now(),
};

/**
 * Returns a wrapper that fires `fn` with the latest arguments, at most once
 * per `intervalMs`, always including the final call of a burst.
 */
export function rateLimited<A extends unknown[]>(
  fn: (...args: A) => void,
  intervalMs: number = MIN_INTERVAL_MS,
  scheduler: Scheduler = realScheduler,
): (...args: A) => void {
  let lastFire = -Infinity;
  let pending: A | null = null;
  let handle: unknown = null;

  const fire = (args: A) => {
    lastFire = scheduler.now();
    fn(...args);
  };

  return (...args: A) => {
    const now = scheduler.now();
    const wait = lastFire + intervalMs - now;
    if (wait <= 0 && handle === null) {
      fire(args);
      return;
    }
    pending = args;
    if (handle === null) {
      handle = scheduler.setTimeout(() => {
        handle = null;
        if (pending !== null) {
          const args2 = pending;
          pending = null;
          fire(args2);
        }
      }, Math.max(wait, 0));
    }
  };
}

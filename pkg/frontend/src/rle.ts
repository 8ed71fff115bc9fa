/** Run-length mask codec: alternating run lengths over the row-major
 *  flattening, starting with a (possibly zero) background run. */

import type { RlePayload } from "./schema";

export class RleError extends Error {}

/** Decode to a flat 0/1 byte grid of length height*width. */
export function decodeCounts(counts: number[], height: number, width: number): Uint8Array {
  const total = height * width;
  const bits = new Uint8Array(total);
  let cursor = 0;
  let value = 0;
  for (const run of counts) {
    if (!Number.isInteger(run) || run < 0) {
      throw new RleError(`run lengths must be non-negative integers, got ${run}`);
    }
    if (cursor + run > total) {
      throw new RleError(`runs cover ${cursor + run} pixels, grid has ${total}`);
    }
    if (value === 1) {
      bits.fill(1, cursor, cursor + run);
    }
    cursor += run;
    value ^= 1;
  }
  if (cursor !== total) {
    throw new RleError(`runs cover ${cursor} pixels, grid has ${total}`);
  }
  return bits;
}

export function decodeMask(payload: RlePayload): Uint8Array {
  return decodeCounts(payload.counts, payload.height, payload.width);
}

/** Inverse of decodeCounts; used by tests to build fixtures. */
export function encodeBits(bits: ArrayLike<number>, height: number, width: number): number[] {
  if (bits.length !== height * width) {
    throw new RleError(`grid has ${bits.length} pixels, expected ${height * width}`);
  }
  const counts: number[] = [];
  let value = 0;
  let run = 0;
  for (let i = 0; i < bits.length; i += 1) {
    const bit = bits[i] ? 1 : 0;
    if (bit === value) {
      run += 1;
    } else {
      counts.push(run);
      value = bit;
      run = 1;
    }
  }
  counts.push(run);
  return counts;
}

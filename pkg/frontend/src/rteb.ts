/**
 * Bit-exact embedding file format shared with the Python library.
 *
 * Layout: bytes 0-3 ASCII "RTEB"; bytes 4-7 version = 1; bytes 8-11 row
 * count; bytes 12-15 feature dimension (all unsigned 32-bit little-endian);
 * then rows * dim IEEE-754 32-bit little-endian floats, row-major. A valid
 * file is exactly 16 + 4 * rows * dim bytes.
 */

import { promises as fs } from "node:fs";

export const MAGIC = "RTEB";
export const VERSION = 1;
const HEADER_BYTES = 16;

export interface EmbeddingMatrix {
  rows: number;
  dim: number;
  /** row-major, length rows * dim */
  data: Float32Array;
}

export function encodeRteb(matrix: EmbeddingMatrix): Buffer {
  const { rows, dim, data } = matrix;
  if (rows < 1 || dim < 1) {
    throw new Error(`invalid shape rows=${rows} dim=${dim}`);
  }
  if (data.length !== rows * dim) {
    throw new Error(`payload length ${data.length} does not match ${rows}x${dim}`);
  }
  const buffer = Buffer.alloc(HEADER_BYTES + 4 * rows * dim);
  buffer.write(MAGIC, 0, "ascii");
  buffer.writeUInt32LE(VERSION, 4);
  buffer.writeUInt32LE(rows, 8);
  buffer.writeUInt32LE(dim, 12);
  for (let i = 0; i < data.length; i++) {
    buffer.writeFloatLE(data[i], HEADER_BYTES + 4 * i);
  }
  return buffer;
}

export function decodeRteb(raw: Buffer): EmbeddingMatrix {
  if (raw.length < HEADER_BYTES) {
    throw new Error(`file is ${raw.length} bytes; header needs ${HEADER_BYTES}`);
  }
  if (raw.toString("ascii", 0, 4) !== MAGIC) {
    throw new Error("bad magic at byte offset 0");
  }
  const version = raw.readUInt32LE(4);
  if (version !== VERSION) {
    throw new Error(`unsupported version ${version} at byte offset 4`);
  }
  const rows = raw.readUInt32LE(8);
  const dim = raw.readUInt32LE(12);
  const expected = HEADER_BYTES + 4 * rows * dim;
  if (raw.length !== expected) {
    throw new Error(`payload size mismatch: expected ${expected} bytes for ${rows}x${dim}, got ${raw.length}`);
  }
  const data = new Float32Array(rows * dim);
  for (let i = 0; i < data.length; i++) {
    data[i] = raw.readFloatLE(HEADER_BYTES + 4 * i);
    if (!Number.isFinite(data[i])) {
      throw new Error(`non-finite value, row ${Math.floor(i / dim)}`);
    }
  }
  return { rows, dim, data };
}

export async function writeRteb(path: string, matrix: EmbeddingMatrix): Promise<void> {
  await fs.writeFile(path, encodeRteb(matrix));
}

export async function readRteb(path: string): Promise<EmbeddingMatrix> {
  return decodeRteb(await fs.readFile(path));
}

/** L2-normalize each row in double precision, then store as float32. */
export function normalizeRows(rows: number, dim: number, values: Float64Array): Float32Array {
  const out = new Float32Array(rows * dim);
  for (let r = 0; r < rows; r++) {
    let sum = 0;
    for (let c = 0; c < dim; c++) {
      const v = values[r * dim + c];
      sum += v * v;
    }
    const norm = Math.sqrt(sum);
    if (norm === 0) {
      throw new Error(`zero-norm row ${r}`);
    }
    for (let c = 0; c < dim; c++) {
      out[r * dim + c] = values[r * dim + c] / norm;
    }
  }
  return out;
}

export function rowNorms(matrix: EmbeddingMatrix): number[] {
  const norms: number[] = [];
  for (let r = 0; r < matrix.rows; r++) {
    let sum = 0;
    for (let c = 0; c < matrix.dim; c++) {
      const v = matrix.data[r * matrix.dim + c];
      sum += v * v;
    }
    norms.push(Math.sqrt(sum));
  }
  return norms;
}

/**
 * Binary containers consumed by the engine.
 *
 * PBAG (one slide bag): 28-byte header
 *   magic "PBAG" | version u32=1 | dim u32 | n_patches u32 | label u32 |
 *   time f32 | event u8 | 3 pad bytes
 * followed by n_patches*dim little-endian f32, row-major.
 *
 * PEB1 (feature bank): 20-byte header
 *   magic "PEB1" | version u32=1 | dim u32 | count u64
 * followed by count*dim little-endian f32.
 */

import { promises as fs } from 'fs';
import * as path from 'path';

export const PBAG_HEADER_SIZE = 28;
export const PEB1_HEADER_SIZE = 20;

export interface BagMeta {
  label: number;
  time?: number;
  event?: 0 | 1;
}

export class FormatError extends Error {
  constructor(public file: string, public offset: number, message: string) {
    super(`${file} @ byte ${offset}: ${message}`);
  }
}

function checkRows(rows: Float32Array[], what: string): number {
  if (rows.length === 0) throw new Error(`${what}: need at least one row`);
  const dim = rows[0].length;
  if (dim === 0) throw new Error(`${what}: zero-dimensional rows`);
  for (const row of rows) {
    if (row.length !== dim) {
      throw new Error(`${what}: ragged rows (${row.length} vs ${dim})`);
    }
  }
  return dim;
}

function payload(rows: Float32Array[], dim: number): Buffer {
  const buf = Buffer.alloc(4 * rows.length * dim);
  rows.forEach((row, i) => {
    for (let j = 0; j < dim; j++) buf.writeFloatLE(row[j], 4 * (i * dim + j));
  });
  return buf;
}

async function writeAtomic(file: string, data: Buffer): Promise<void> {
  await fs.mkdir(path.dirname(file), { recursive: true });
  const tmp = `${file}.tmp`;
  await fs.writeFile(tmp, data);
  await fs.rename(tmp, file);
}

export async function writeBag(
  file: string,
  rows: Float32Array[],
  meta: BagMeta,
): Promise<void> {
  const dim = checkRows(rows, 'bag');
  const header = Buffer.alloc(PBAG_HEADER_SIZE);
  header.write('PBAG', 0, 'ascii');
  header.writeUInt32LE(1, 4);
  header.writeUInt32LE(dim, 8);
  header.writeUInt32LE(rows.length, 12);
  header.writeUInt32LE(meta.label, 16);
  header.writeFloatLE(meta.time ?? 0, 20);
  header.writeUInt8(meta.event ?? 0, 24);
  await writeAtomic(file, Buffer.concat([header, payload(rows, dim)]));
}

export async function writeExamples(
  file: string,
  rows: Float32Array[],
): Promise<void> {
  const dim = checkRows(rows, 'bank');
  const header = Buffer.alloc(PEB1_HEADER_SIZE);
  header.write('PEB1', 0, 'ascii');
  header.writeUInt32LE(1, 4);
  header.writeUInt32LE(dim, 8);
  header.writeBigUInt64LE(BigInt(rows.length), 12);
  await writeAtomic(file, Buffer.concat([header, payload(rows, dim)]));
}

function readRows(buf: Buffer, offset: number, count: number, dim: number): Float32Array[] {
  const rows: Float32Array[] = [];
  for (let i = 0; i < count; i++) {
    const row = new Float32Array(dim);
    for (let j = 0; j < dim; j++) row[j] = buf.readFloatLE(offset + 4 * (i * dim + j));
    rows.push(row);
  }
  return rows;
}

export async function readBag(
  file: string,
): Promise<{ rows: Float32Array[]; meta: Required<BagMeta> }> {
  const buf = await fs.readFile(file);
  if (buf.length < PBAG_HEADER_SIZE) {
    throw new FormatError(file, buf.length, `truncated header (${buf.length} bytes)`);
  }
  if (buf.toString('ascii', 0, 4) !== 'PBAG') {
    throw new FormatError(file, 0, 'bad magic');
  }
  if (buf.readUInt32LE(4) !== 1) throw new FormatError(file, 4, 'unsupported version');
  const dim = buf.readUInt32LE(8);
  const n = buf.readUInt32LE(12);
  if (n < 1) throw new FormatError(file, 12, 'empty bag');
  const expected = PBAG_HEADER_SIZE + 4 * n * dim;
  if (buf.length !== expected) {
    throw new FormatError(file, Math.min(buf.length, expected),
      `length ${buf.length} != expected ${expected}`);
  }
  return {
    rows: readRows(buf, PBAG_HEADER_SIZE, n, dim),
    meta: {
      label: buf.readUInt32LE(16),
      time: buf.readFloatLE(20),
      event: buf.readUInt8(24) as 0 | 1,
    },
  };
}

export async function readExamples(file: string): Promise<Float32Array[]> {
  const buf = await fs.readFile(file);
  if (buf.length < PEB1_HEADER_SIZE) {
    throw new FormatError(file, buf.length, `truncated header (${buf.length} bytes)`);
  }
  if (buf.toString('ascii', 0, 4) !== 'PEB1') {
    throw new FormatError(file, 0, 'bad magic');
  }
  if (buf.readUInt32LE(4) !== 1) throw new FormatError(file, 4, 'unsupported version');
  const dim = buf.readUInt32LE(8);
  const count = Number(buf.readBigUInt64LE(12));
  if (count < 1) throw new FormatError(file, 12, 'empty bank');
  const expected = PEB1_HEADER_SIZE + 4 * count * dim;
  if (buf.length !== expected) {
    throw new FormatError(file, Math.min(buf.length, expected),
      `length ${buf.length} != expected ${expected}`);
  }
  return readRows(buf, PEB1_HEADER_SIZE, count, dim);
}

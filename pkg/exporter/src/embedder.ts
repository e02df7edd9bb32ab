/**
 * Pluggable feature extractors.
 *
 * The engine only cares that features are unit-norm f32 rows of a fixed
 * width, so the extractor is an interface:
 *
 *  - `hash-<dim>` is the built-in deterministic embedder. It folds the raw
 *    bytes of an image (or the UTF-8 bytes of a prompt) into `dim` signed
 *    buckets through a 64-bit FNV-1a stream. No model download, fully
 *    reproducible; meant for offline pipelines, contract tests, and CI.
 *  - `module:<path>` dynamically imports a user module that must export
 *    `createEmbedder(): Embedder`. This is where a real pretrained
 *    vision-language checkpoint plugs in; the identifier of that checkpoint
 *    is the user's business.
 */

export interface Embedder {
  readonly dim: number;
  readonly name: string;
  embedImage(data: Buffer): Promise<Float32Array>;
  embedText(text: string): Promise<Float32Array>;
}

const FNV_OFFSET = 0xcbf29ce484222325n;
const FNV_PRIME = 0x100000001b3n;
const MASK64 = 0xffffffffffffffffn;

function normalize(vec: Float32Array): Float32Array {
  let sq = 0;
  for (const v of vec) sq += v * v;
  const norm = Math.sqrt(sq);
  if (norm === 0) {
    // degenerate input (e.g. empty byte stream): deterministic unit fallback
    const out = new Float32Array(vec.length);
    out[0] = 1;
    return out;
  }
  return vec.map((v) => v / norm) as Float32Array;
}

export class HashEmbedder implements Embedder {
  readonly name: string;

  constructor(readonly dim: number) {
    if (!Number.isInteger(dim) || dim < 4) {
      throw new Error(`hash embedder dim must be an integer >= 4, got ${dim}`);
    }
    this.name = `hash-${dim}`;
  }

  private fold(data: Buffer): Float32Array {
    const acc = new Float32Array(this.dim);
    let state = FNV_OFFSET;
    for (const byte of data) {
      state = ((state ^ BigInt(byte)) * FNV_PRIME) & MASK64;
      const bucket = Number(state % BigInt(this.dim));
      const sign = (state >> 32n) & 1n ? 1 : -1;
      acc[bucket] += sign;
    }
    return normalize(acc);
  }

  async embedImage(data: Buffer): Promise<Float32Array> {
    return this.fold(data);
  }

  async embedText(text: string): Promise<Float32Array> {
    return this.fold(Buffer.from(text, 'utf-8'));
  }
}

export async function loadEmbedder(model: string): Promise<Embedder> {
  const hash = /^hash-(\d+)$/.exec(model);
  if (hash) return new HashEmbedder(parseInt(hash[1], 10));
  if (model.startsWith('module:')) {
    const mod = await import(model.slice('module:'.length));
    if (typeof mod.createEmbedder !== 'function') {
      throw new Error(`${model}: module must export createEmbedder()`);
    }
    return mod.createEmbedder();
  }
  throw new Error(
    `unknown model ${model}; use hash-<dim> or module:<path-to-js-module> ` +
    `(the module wraps your pretrained checkpoint and exports createEmbedder)`);
}

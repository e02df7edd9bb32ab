/**
 * CLI: `exporter patches ...` and `exporter texts ...`.
 * Exit codes: 0 success, 2 on validation/usage errors.
 */

import { promises as fs } from 'fs';

import { loadEmbedder } from './embedder';
import { exportPatchFeatures, exportTextFeatures } from './export';

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith('--') || i + 1 >= argv.length) {
      throw new Error(`bad flag pair near ${key}`);
    }
    flags.set(key.slice(2), argv[i + 1]);
  }
  return flags;
}

function required(flags: Map<string, string>, key: string): string {
  const value = flags.get(key);
  if (value === undefined) throw new Error(`missing --${key}`);
  return value;
}

const USAGE = `usage:
  exporter patches --images <dir> --model <id> --out <dir>
                   [--labels <json>] [--batch-size <n>] [--device cpu]
  exporter texts   --prompts <file(.json|.txt)> --model <id> --out <file.peb1>
                   [--device cpu]

models: hash-<dim> (built-in deterministic) or module:<path.js>
        wrapping a pretrained checkpoint (must export createEmbedder()).`;

export async function main(argv: string[]): Promise<number> {
  const [command, ...rest] = argv;
  try {
    const flags = parseFlags(rest);
    if (command === 'patches') {
      const embedder = await loadEmbedder(required(flags, 'model'));
      let labels: Record<string, number> | undefined;
      if (flags.has('labels')) {
        labels = JSON.parse(await fs.readFile(flags.get('labels')!, 'utf-8'));
      }
      const result = await exportPatchFeatures({
        imagesDir: required(flags, 'images'),
        outDir: required(flags, 'out'),
        labels,
        batchSize: flags.has('batch-size')
          ? parseInt(flags.get('batch-size')!, 10) : undefined,
      }, embedder);
      for (const warning of result.warnings) console.warn(warning);
      console.log(`wrote ${result.slides.length} bags (dim ${result.dim}) `
        + `under ${required(flags, 'out')}`);
      return 0;
    }
    if (command === 'texts') {
      const embedder = await loadEmbedder(required(flags, 'model'));
      const file = required(flags, 'prompts');
      const raw = await fs.readFile(file, 'utf-8');
      const prompts: string[] = file.endsWith('.json')
        ? JSON.parse(raw)
        : raw.split('\n').filter((line) => line.trim().length > 0);
      const out = required(flags, 'out');
      const rows = await exportTextFeatures(prompts, out, embedder);
      console.log(`wrote ${rows.length} prompt features (dim ${embedder.dim}) to ${out}`);
      return 0;
    }
    console.error(USAGE);
    return 2;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

if (require.main === module) {
  main(process.argv.slice(2)).then((code) => process.exit(code));
}

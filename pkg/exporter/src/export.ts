/**
 * Export jobs: patch-image features to PBAG bags, prompt texts to a PEB1
 * bank, plus a manifest fragment describing what was written.
 */

import { promises as fs } from 'fs';
import * as path from 'path';

import { Embedder } from './embedder';
import { writeBag, writeExamples } from './formats';

export interface PatchExportJob {
  /** directory with one sub-directory of patch images per slide */
  imagesDir: string;
  outDir: string;
  /** label per slide id; slides not listed get label 0 */
  labels?: Record<string, number>;
  batchSize?: number;
}

export interface SlideRecord {
  id: string;
  path: string;
  label: number;
  n_patches: number;
  omitted: string[];
}

export interface PatchExportResult {
  dim: number;
  model: string;
  slides: SlideRecord[];
  warnings: string[];
}

const IMAGE_EXTENSIONS = new Set(['.png', '.jpg', '.jpeg', '.tif', '.tiff',
                                  '.bmp', '.webp']);

async function listSlides(imagesDir: string): Promise<Map<string, string[]>> {
  const slides = new Map<string, string[]>();
  const entries = await fs.readdir(imagesDir, { withFileTypes: true });
  for (const entry of entries.sort((a, b) => a.name.localeCompare(b.name))) {
    if (!entry.isDirectory()) continue;
    const dir = path.join(imagesDir, entry.name);
    const files = (await fs.readdir(dir))
      .filter((f) => IMAGE_EXTENSIONS.has(path.extname(f).toLowerCase()))
      .sort()
      .map((f) => path.join(dir, f));
    slides.set(entry.name, files);
  }
  return slides;
}

export async function exportPatchFeatures(
  job: PatchExportJob,
  embedder: Embedder,
): Promise<PatchExportResult> {
  const slides = await listSlides(job.imagesDir);
  if (slides.size === 0) {
    throw new Error(`${job.imagesDir}: no slide sub-directories found`);
  }
  const result: PatchExportResult = {
    dim: embedder.dim,
    model: embedder.name,
    slides: [],
    warnings: [],
  };
  const batch = job.batchSize ?? 32;
  for (const [slideId, files] of slides) {
    const rows: Float32Array[] = [];
    const omitted: string[] = [];
    for (let i = 0; i < files.length; i += batch) {
      const chunk = files.slice(i, i + batch);
      const loaded = await Promise.all(chunk.map(async (file) => {
        try {
          return await fs.readFile(file);
        } catch (err) {
          omitted.push(path.basename(file));
          result.warnings.push(`skipped unreadable image ${file}: ${err}`);
          return null;
        }
      }));
      for (const data of loaded) {
        if (data !== null) rows.push(await embedder.embedImage(data));
      }
    }
    if (rows.length === 0) {
      throw new Error(`slide ${slideId}: zero usable patches`);
    }
    const rel = path.join('bags', `${slideId}.pbag`);
    await writeBag(path.join(job.outDir, rel), rows,
                   { label: job.labels?.[slideId] ?? 0 });
    result.slides.push({
      id: slideId, path: rel, label: job.labels?.[slideId] ?? 0,
      n_patches: rows.length, omitted,
    });
  }
  const fragment = {
    dim: result.dim,
    model: result.model,
    entries: result.slides.map((s) => ({
      id: s.id, path: s.path, label: s.label,
      ...(s.omitted.length ? { omitted: s.omitted } : {}),
    })),
  };
  await fs.writeFile(path.join(job.outDir, 'manifest_fragment.json'),
                     JSON.stringify(fragment, null, 2) + '\n');
  return result;
}

export async function exportTextFeatures(
  prompts: string[],
  outFile: string,
  embedder: Embedder,
): Promise<Float32Array[]> {
  if (prompts.length === 0) throw new Error('empty prompt list');
  prompts.forEach((p, i) => {
    if (!p.trim()) throw new Error(`empty prompt at index ${i}`);
  });
  const rows: Float32Array[] = [];
  for (const prompt of prompts) rows.push(await embedder.embedText(prompt));
  await writeExamples(outFile, rows);
  return rows;
}

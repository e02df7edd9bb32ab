export { Embedder, HashEmbedder, loadEmbedder } from './embedder';
export { FormatError, readBag, readExamples, writeBag, writeExamples } from './formats';
export { exportPatchFeatures, exportTextFeatures } from './export';
export type { PatchExportJob, PatchExportResult } from './export';

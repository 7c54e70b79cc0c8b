/**
 * Feature export: class-name prompts and image folders in, RTEB files,
 * sidecars, and manifests out. Output ordering is deterministic (class-list
 * order for text, lexicographic path order for images), so re-exports are
 * byte-identical.
 */

import { promises as fs } from "node:fs";
import path from "node:path";

import type { Encoder } from "./encoders.js";
import { decodePng } from "./png.js";
import { PromptSpec, renderPrompts } from "./prompts.js";
import { EmbeddingMatrix, normalizeRows, writeRteb } from "./rteb.js";

export interface TextExportResult {
  featuresPath: string;
  namesPath: string;
  rows: number;
  dim: number;
}

export async function exportTextFeatures(
  encoder: Encoder,
  spec: PromptSpec,
  outPath: string,
): Promise<TextExportResult> {
  const dim = encoder.dim;
  const rows = new Float64Array(spec.classNames.length * dim);
  for (let cls = 0; cls < spec.classNames.length; cls++) {
    const accumulated = new Float64Array(dim);
    const prompts = renderPrompts(spec, spec.classNames[cls]);
    for (const prompt of prompts) {
      const feature = await encoder.encodeText(prompt);
      // per-prompt normalization, then average (re-normalized below)
      let norm = 0;
      for (let i = 0; i < dim; i++) norm += feature[i] * feature[i];
      norm = Math.sqrt(norm);
      if (norm === 0) throw new Error(`zero text feature for prompt ${JSON.stringify(prompt)}`);
      for (let i = 0; i < dim; i++) accumulated[i] += feature[i] / norm / prompts.length;
    }
    rows.set(accumulated, cls * dim);
  }
  const matrix: EmbeddingMatrix = {
    rows: spec.classNames.length,
    dim,
    data: normalizeRows(spec.classNames.length, dim, rows),
  };
  await writeRteb(outPath, matrix);
  const namesPath = sidecarPath(outPath, ".names.txt");
  await fs.writeFile(namesPath, spec.classNames.map((n) => `${n}\n`).join(""));
  return { featuresPath: outPath, namesPath, rows: matrix.rows, dim };
}

export interface ImageExportResult {
  featuresPath: string;
  labelsPath: string;
  rows: number;
  dim: number;
  skipped: string[];
}

/**
 * Images live in one subdirectory per class, named after the class; rows are
 * emitted in lexicographic path order. Unreadable images are skipped with a
 * warning and recorded in the returned skip list.
 */
export async function exportImageFeatures(
  encoder: Encoder,
  imagesDir: string,
  classNames: string[],
  outPath: string,
  warn: (message: string) => void = (m) => console.warn(m),
): Promise<ImageExportResult> {
  const classIndex = new Map(classNames.map((name, i) => [name, i]));
  const entries: { file: string; label: number }[] = [];
  for (const dirent of (await fs.readdir(imagesDir, { withFileTypes: true })).sort((a, b) =>
    a.name < b.name ? -1 : a.name > b.name ? 1 : 0,
  )) {
    if (!dirent.isDirectory()) continue;
    const label = classIndex.get(dirent.name);
    if (label === undefined) {
      warn(`skipping directory ${dirent.name}: not in the class list`);
      continue;
    }
    const dirPath = path.join(imagesDir, dirent.name);
    for (const file of (await fs.readdir(dirPath)).sort()) {
      entries.push({ file: path.join(dirPath, file), label });
    }
  }
  if (entries.length === 0) {
    throw new Error(`no images found under ${imagesDir}`);
  }

  const dim = encoder.dim;
  const features: Float64Array[] = [];
  const labels: number[] = [];
  const skipped: string[] = [];
  for (const entry of entries) {
    try {
      const pixels = decodePng(await fs.readFile(entry.file));
      features.push(await encoder.encodeImage(pixels));
      labels.push(entry.label);
    } catch (error) {
      skipped.push(entry.file);
      warn(`skipping unreadable image ${entry.file}: ${(error as Error).message}`);
    }
  }
  if (features.length === 0) {
    throw new Error("every image was unreadable");
  }

  const flat = new Float64Array(features.length * dim);
  features.forEach((feature, row) => flat.set(feature, row * dim));
  await writeRteb(outPath, { rows: features.length, dim, data: normalizeRows(features.length, dim, flat) });
  const labelsPath = sidecarPath(outPath, ".labels.txt");
  await fs.writeFile(labelsPath, labels.map((l) => `${l}\n`).join(""));
  return { featuresPath: outPath, labelsPath, rows: features.length, dim, skipped };
}

export interface ManifestPaths {
  targets: string;
  images: string;
  labels: string;
  classNames: string;
  anchors?: string;
  supportImages?: string;
  supportLabels?: string;
}

export async function makeManifest(
  paths: ManifestPaths,
  outPath: string,
  options: { tau?: number; tauPrime?: number; alpha?: number; backbone?: string } = {},
): Promise<string> {
  const base = path.dirname(path.resolve(outPath));
  const relative = async (target: string, key: string) => {
    try {
      await fs.access(target);
    } catch {
      throw new Error(`manifest ${key} file is missing: ${target}`);
    }
    return path.relative(base, path.resolve(target)) || ".";
  };
  const doc: Record<string, unknown> = {
    targets: await relative(paths.targets, "targets"),
    images: await relative(paths.images, "images"),
    labels: await relative(paths.labels, "labels"),
    class_names: await relative(paths.classNames, "class_names"),
    tau: options.tau ?? 0.01,
    tau_prime: options.tauPrime ?? 0.01,
    alpha: options.alpha ?? 1.0,
    backbone: options.backbone ?? "",
  };
  if (paths.anchors) doc.anchors = await relative(paths.anchors, "anchors");
  if (paths.supportImages) doc.support_images = await relative(paths.supportImages, "support_images");
  if (paths.supportLabels) doc.support_labels = await relative(paths.supportLabels, "support_labels");
  const ordered = Object.fromEntries(Object.entries(doc).sort(([a], [b]) => (a < b ? -1 : 1)));
  await fs.writeFile(outPath, `${JSON.stringify(ordered, null, 2)}\n`);
  return outPath;
}

function sidecarPath(featurePath: string, suffix: string): string {
  const parsed = path.parse(featurePath);
  return path.join(parsed.dir, `${parsed.name}${suffix}`);
}

#!/usr/bin/env node
/**
 * relt-export: produce RTEB feature files, sidecars, and manifests.
 *
 *   relt-export text     --backbone rn50|vit-b16|test --classes FILE --out PATH
 *                        [--template T | --template-file FILE] [--ensemble] [--model-dir DIR]
 *   relt-export images   --backbone ... --classes FILE --images DIR --out PATH [--model-dir DIR]
 *   relt-export manifest --targets F --images F --labels F --classes F --out PATH
 *                        [--anchors F] [--support-images F] [--support-labels F]
 *                        [--tau X] [--tau-prime X] [--alpha X] [--backbone TAG]
 */

import { promises as fs } from "node:fs";

import { resolveEncoder } from "./encoders.js";
import { exportImageFeatures, exportTextFeatures, makeManifest } from "./export.js";
import { DEFAULT_TEMPLATE, ENSEMBLE_TEMPLATES, makePromptSpec } from "./prompts.js";

interface Args {
  positional: string[];
  options: Map<string, string | true>;
}

function parseArgs(argv: string[]): Args {
  const positional: string[] = [];
  const options = new Map<string, string | true>();
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg.startsWith("--")) {
      const key = arg.slice(2);
      const next = argv[i + 1];
      if (next !== undefined && !next.startsWith("--")) {
        options.set(key, next);
        i += 1;
      } else {
        options.set(key, true);
      }
    } else {
      positional.push(arg);
    }
  }
  return { positional, options };
}

function requireOption(args: Args, name: string): string {
  const value = args.options.get(name);
  if (typeof value !== "string") {
    throw new Error(`missing required --${name}`);
  }
  return value;
}

async function readLines(file: string): Promise<string[]> {
  return (await fs.readFile(file, "utf8")).split("\n").map((l) => l.trimEnd()).filter((l) => l.length > 0);
}

async function cmdText(args: Args): Promise<void> {
  const backbone = requireOption(args, "backbone");
  const classNames = await readLines(requireOption(args, "classes"));
  const out = requireOption(args, "out");
  const ensemble = args.options.get("ensemble") === true;
  let templates = [DEFAULT_TEMPLATE];
  const templateFile = args.options.get("template-file");
  const template = args.options.get("template");
  if (typeof templateFile === "string") {
    templates = await readLines(templateFile);
  } else if (typeof template === "string") {
    templates = [template];
  } else if (ensemble) {
    templates = ENSEMBLE_TEMPLATES;
  }
  const encoder = await resolveEncoder(backbone, optionString(args, "model-dir"));
  const spec = makePromptSpec(classNames, templates, ensemble);
  const result = await exportTextFeatures(encoder, spec, out);
  console.log(`wrote ${result.rows}x${result.dim} text features to ${result.featuresPath}`);
  console.log(`class names sidecar: ${result.namesPath}`);
}

async function cmdImages(args: Args): Promise<void> {
  const backbone = requireOption(args, "backbone");
  const classNames = await readLines(requireOption(args, "classes"));
  const imagesDir = requireOption(args, "images");
  const out = requireOption(args, "out");
  const encoder = await resolveEncoder(backbone, optionString(args, "model-dir"));
  const result = await exportImageFeatures(encoder, imagesDir, classNames, out);
  console.log(`wrote ${result.rows}x${result.dim} image features to ${result.featuresPath}`);
  console.log(`labels sidecar: ${result.labelsPath}`);
  if (result.skipped.length > 0) {
    console.log(`skipped ${result.skipped.length} unreadable file(s)`);
  }
}

async function cmdManifest(args: Args): Promise<void> {
  const out = requireOption(args, "out");
  const manifest = await makeManifest(
    {
      targets: requireOption(args, "targets"),
      images: requireOption(args, "images"),
      labels: requireOption(args, "labels"),
      classNames: requireOption(args, "classes"),
      anchors: optionString(args, "anchors"),
      supportImages: optionString(args, "support-images"),
      supportLabels: optionString(args, "support-labels"),
    },
    out,
    {
      tau: optionNumber(args, "tau"),
      tauPrime: optionNumber(args, "tau-prime"),
      alpha: optionNumber(args, "alpha"),
      backbone: optionString(args, "backbone"),
    },
  );
  console.log(`wrote manifest to ${manifest}`);
}

function optionString(args: Args, name: string): string | undefined {
  const value = args.options.get(name);
  return typeof value === "string" ? value : undefined;
}

function optionNumber(args: Args, name: string): number | undefined {
  const value = optionString(args, name);
  return value === undefined ? undefined : Number(value);
}

export async function main(argv = process.argv.slice(2)): Promise<number> {
  const args = parseArgs(argv);
  const command = args.positional[0];
  try {
    if (command === "text") {
      await cmdText(args);
    } else if (command === "images") {
      await cmdImages(args);
    } else if (command === "manifest") {
      await cmdManifest(args);
    } else {
      console.error("usage: relt-export text|images|manifest [options]");
      return 2;
    }
    return 0;
  } catch (error) {
    console.error(`error: ${(error as Error).message}`);
    return 1;
  }
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("cli.js") || entry.endsWith("relt-export")) {
  main().then((code) => process.exit(code));
}

import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync, mkdirSync } from "node:fs";
import { tmpdir } from "node:os";
import path from "node:path";
import { describe, expect, it } from "vitest";

import { resolveEncoder, TestEncoder } from "../src/encoders.js";
import { exportImageFeatures, exportTextFeatures, makeManifest } from "../src/export.js";
import { decodePng, encodePng } from "../src/png.js";
import { makePromptSpec, renderPrompts } from "../src/prompts.js";
import { decodeRteb, encodeRteb, readRteb, rowNorms } from "../src/rteb.js";

function tempDir(): string {
  return mkdtempSync(path.join(tmpdir(), "relt-export-"));
}

function classFile(dir: string, names: string[]): string {
  const file = path.join(dir, "classes.txt");
  writeFileSync(file, names.map((n) => `${n}\n`).join(""));
  return file;
}

/** solid-color PNG with a little structure so features differ per class */
function fixturePng(shade: number, size = 12): Buffer {
  const rgb = new Uint8Array(size * size * 3);
  for (let i = 0; i < size * size; i++) {
    const x = i % size;
    rgb[3 * i] = shade;
    rgb[3 * i + 1] = (shade + 40 * (x % 3)) % 256;
    rgb[3 * i + 2] = 255 - shade;
  }
  return encodePng(size, size, rgb);
}

describe("rteb format", () => {
  it("round-trips byte-identically", () => {
    const data = new Float32Array([1, 0, 0, 1, 0.5, -0.25]);
    const buffer = encodeRteb({ rows: 3, dim: 2, data });
    expect(buffer.length).toBe(16 + 4 * 6);
    const back = decodeRteb(buffer);
    expect(back.rows).toBe(3);
    expect(back.dim).toBe(2);
    expect(encodeRteb(back).equals(buffer)).toBe(true);
  });

  it("rejects malformed headers", () => {
    const good = encodeRteb({ rows: 1, dim: 1, data: new Float32Array([1]) });
    const badMagic = Buffer.from(good);
    badMagic.write("NOPE", 0, "ascii");
    expect(() => decodeRteb(badMagic)).toThrow(/magic/);
    const badVersion = Buffer.from(good);
    badVersion.writeUInt32LE(9, 4);
    expect(() => decodeRteb(badVersion)).toThrow(/version/);
    expect(() => decodeRteb(good.subarray(0, 17))).toThrow(/size mismatch/);
  });
});

describe("prompts", () => {
  it("validates the placeholder", () => {
    expect(() => makePromptSpec(["cat"], ["no placeholder"])).toThrow(/exactly one/);
    expect(() => makePromptSpec(["cat"], ["{} and {}"])).toThrow(/exactly one/);
    expect(() => makePromptSpec([], ["a {}"])).toThrow(/nonempty/);
  });

  it("renders one prompt unless ensembling", () => {
    const spec = makePromptSpec(["cat"], ["a {}.", "the {}."], false);
    expect(renderPrompts(spec, "cat")).toEqual(["a cat."]);
    const ensembled = makePromptSpec(["cat"], ["a {}.", "the {}."], true);
    expect(renderPrompts(ensembled, "cat")).toEqual(["a cat.", "the cat."]);
  });
});

describe("png codec", () => {
  it("round-trips pixels", () => {
    const png = fixturePng(120, 5);
    const image = decodePng(png);
    expect(image.width).toBe(5);
    expect(image.height).toBe(5);
    expect(image.data[0]).toBe(120);
    expect(image.data[3]).toBe(255);
  });

  it("rejects non-png bytes", () => {
    expect(() => decodePng(Buffer.from("definitely not a png"))).toThrow(/not a PNG/);
  });
});

describe("encoders", () => {
  it("is deterministic and text features are unit-norm after export", async () => {
    const encoder = new TestEncoder();
    const a = await encoder.encodeText("A photo of cat.");
    const b = await encoder.encodeText("A photo of cat.");
    expect(Array.from(a)).toEqual(Array.from(b));
  });

  it("rejects unknown backbones and missing weights", async () => {
    await expect(resolveEncoder("rn101")).rejects.toThrow(/unknown backbone/);
    delete process.env.RELT_EXPORT_MODELS;
    await expect(resolveEncoder("rn50")).rejects.toThrow(/pretrained weights/);
    const dir = tempDir();
    await expect(resolveEncoder("vit-b16", dir)).rejects.toThrow(/vit-b16\.onnx/);
  });
});

describe("text export", () => {
  it("writes unit-norm rows and a names sidecar", async () => {
    const dir = tempDir();
    const spec = makePromptSpec(["cat", "dog", "fish"]);
    const out = path.join(dir, "targets.rteb");
    const result = await exportTextFeatures(new TestEncoder(), spec, out);
    expect(result.rows).toBe(3);
    const matrix = await readRteb(out);
    for (const norm of rowNorms(matrix)) {
      expect(Math.abs(norm - 1)).toBeLessThan(1e-5);
    }
    expect(readFileSync(result.namesPath, "utf8")).toBe("cat\ndog\nfish\n");
  });

  it("ensemble of one template equals no ensemble bitwise", async () => {
    const dir = tempDir();
    const encoder = new TestEncoder();
    const plain = path.join(dir, "plain.rteb");
    const single = path.join(dir, "single.rteb");
    await exportTextFeatures(encoder, makePromptSpec(["cat", "dog"], ["a {}."], false), plain);
    await exportTextFeatures(encoder, makePromptSpec(["cat", "dog"], ["a {}."], true), single);
    expect(readFileSync(plain).equals(readFileSync(single))).toBe(true);
  });

  it("re-export is bit-identical", async () => {
    const dir = tempDir();
    const spec = makePromptSpec(["ant", "bee"], ["a photo of {}."], false);
    const a = path.join(dir, "a.rteb");
    const b = path.join(dir, "b.rteb");
    await exportTextFeatures(new TestEncoder(), spec, a);
    await exportTextFeatures(new TestEncoder(), spec, b);
    expect(readFileSync(a).equals(readFileSync(b))).toBe(true);
  });
});

describe("image export", () => {
  function imageTree(dir: string): string {
    const root = path.join(dir, "images");
    const shades: Record<string, number[]> = { cat: [10, 30], dog: [140, 160], fish: [230, 250] };
    for (const [cls, values] of Object.entries(shades)) {
      mkdirSync(path.join(root, cls), { recursive: true });
      values.forEach((shade, i) => {
        writeFileSync(path.join(root, cls, `img_${i}.png`), fixturePng(shade));
      });
    }
    return root;
  }

  it("emits rows in sorted order with aligned labels", async () => {
    const dir = tempDir();
    const root = imageTree(dir);
    const out = path.join(dir, "images.rteb");
    const result = await exportImageFeatures(new TestEncoder(), root, ["cat", "dog", "fish"], out);
    expect(result.rows).toBe(6);
    expect(readFileSync(result.labelsPath, "utf8")).toBe("0\n0\n1\n1\n2\n2\n");
    for (const norm of rowNorms(await readRteb(out))) {
      expect(Math.abs(norm - 1)).toBeLessThan(1e-5);
    }
  });

  it("skips unreadable files with a warning and records them", async () => {
    const dir = tempDir();
    const root = imageTree(dir);
    writeFileSync(path.join(root, "cat", "broken.png"), Buffer.from("not a png"));
    const warnings: string[] = [];
    const out = path.join(dir, "images.rteb");
    const result = await exportImageFeatures(
      new TestEncoder(), root, ["cat", "dog", "fish"], out, (m) => warnings.push(m),
    );
    expect(result.rows).toBe(6);
    expect(result.skipped).toHaveLength(1);
    expect(result.skipped[0]).toContain("broken.png");
    expect(warnings.some((w) => w.includes("broken.png"))).toBe(true);
  });

  it("re-export is bit-identical", async () => {
    const dir = tempDir();
    const root = imageTree(dir);
    const a = path.join(dir, "a.rteb");
    const b = path.join(dir, "b.rteb");
    await exportImageFeatures(new TestEncoder(), root, ["cat", "dog", "fish"], a);
    await exportImageFeatures(new TestEncoder(), root, ["cat", "dog", "fish"], b);
    expect(readFileSync(a).equals(readFileSync(b))).toBe(true);
  });
});

describe("manifest and pipeline", () => {
  it("builds a manifest the classifier pipeline accepts end to end", async () => {
    const dir = tempDir();
    const classes = ["cat", "dog", "fish"];
    const classesPath = classFile(dir, classes);
    const encoder = new TestEncoder();

    const targets = path.join(dir, "targets.rteb");
    await exportTextFeatures(encoder, makePromptSpec(classes), targets);
    const anchors = path.join(dir, "anchors.rteb");
    await exportTextFeatures(
      encoder,
      makePromptSpec(["kitten", "puppy", "shark", "animal"], ["a photo of {}."]),
      anchors,
    );

    const root = path.join(dir, "images");
    for (const [i, cls] of classes.entries()) {
      mkdirSync(path.join(root, cls), { recursive: true });
      writeFileSync(path.join(root, cls, "a.png"), fixturePng(40 + 80 * i));
      writeFileSync(path.join(root, cls, "b.png"), fixturePng(45 + 80 * i));
    }
    const images = path.join(dir, "images.rteb");
    const imageResult = await exportImageFeatures(encoder, root, classes, images);

    const manifestPath = path.join(dir, "manifest.json");
    await makeManifest(
      {
        targets,
        images,
        labels: imageResult.labelsPath,
        classNames: path.join(dir, "targets.names.txt"),
        anchors,
      },
      manifestPath,
      { backbone: "test" },
    );

    const report = execFileSync(
      "python3",
      ["-m", "relt.cli", "zero-shot", "--manifest", manifestPath, "--variant", "total-prob"],
      { encoding: "utf8" },
    );
    const parsed = JSON.parse(report);
    expect(parsed.sample_count).toBe(6);
    expect(parsed.top1_accuracy).toBeGreaterThanOrEqual(0);
    expect(parsed.branch_accuracies).toHaveProperty("total_prob");
  });

  it("errors when a referenced file is missing", async () => {
    const dir = tempDir();
    await expect(
      makeManifest(
        {
          targets: path.join(dir, "missing.rteb"),
          images: path.join(dir, "missing.rteb"),
          labels: path.join(dir, "missing.txt"),
          classNames: path.join(dir, "missing.txt"),
        },
        path.join(dir, "manifest.json"),
      ),
    ).rejects.toThrow(/missing/);
  });
});

/**
 * Minimal PNG reader for export-time decoding: 8-bit greyscale, RGB, RGBA,
 * and greyscale+alpha, non-interlaced. Uses node's zlib for the IDAT stream
 * and undoes the per-scanline filters. Anything else is rejected, which the
 * exporter reports as an unreadable image.
 */

import zlib from "node:zlib";

import type { ImageTensor } from "./encoders.js";

const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

const CHANNELS: Record<number, number> = { 0: 1, 2: 3, 4: 2, 6: 4 };

export function decodePng(raw: Buffer): ImageTensor {
  if (raw.length < 8 || !raw.subarray(0, 8).equals(SIGNATURE)) {
    throw new Error("not a PNG file");
  }
  let width = 0;
  let height = 0;
  let colorType = -1;
  const idat: Buffer[] = [];
  let offset = 8;
  while (offset + 8 <= raw.length) {
    const length = raw.readUInt32BE(offset);
    const type = raw.toString("ascii", offset + 4, offset + 8);
    const body = raw.subarray(offset + 8, offset + 8 + length);
    if (type === "IHDR") {
      width = body.readUInt32BE(0);
      height = body.readUInt32BE(4);
      const bitDepth = body.readUInt8(8);
      colorType = body.readUInt8(9);
      const interlace = body.readUInt8(12);
      if (bitDepth !== 8 || !(colorType in CHANNELS) || interlace !== 0) {
        throw new Error(`unsupported PNG variant (depth ${bitDepth}, color ${colorType})`);
      }
    } else if (type === "IDAT") {
      idat.push(body);
    } else if (type === "IEND") {
      break;
    }
    offset += 12 + length;
  }
  if (!width || !height || colorType < 0 || idat.length === 0) {
    throw new Error("truncated PNG");
  }

  const channels = CHANNELS[colorType];
  const stride = width * channels;
  const decompressed = zlib.inflateSync(Buffer.concat(idat));
  if (decompressed.length < (stride + 1) * height) {
    throw new Error("truncated PNG pixel data");
  }

  const lines = Buffer.alloc(stride * height);
  for (let y = 0; y < height; y++) {
    const filter = decompressed[y * (stride + 1)];
    const rowAt = y * (stride + 1) + 1;
    const outAt = y * stride;
    for (let x = 0; x < stride; x++) {
      const value = decompressed[rowAt + x];
      const left = x >= channels ? lines[outAt + x - channels] : 0;
      const up = y > 0 ? lines[outAt - stride + x] : 0;
      const upLeft = y > 0 && x >= channels ? lines[outAt - stride + x - channels] : 0;
      let reconstructed: number;
      switch (filter) {
        case 0:
          reconstructed = value;
          break;
        case 1:
          reconstructed = value + left;
          break;
        case 2:
          reconstructed = value + up;
          break;
        case 3:
          reconstructed = value + Math.floor((left + up) / 2);
          break;
        case 4: {
          const p = left + up - upLeft;
          const pa = Math.abs(p - left);
          const pb = Math.abs(p - up);
          const pc = Math.abs(p - upLeft);
          reconstructed = value + (pa <= pb && pa <= pc ? left : pb <= pc ? up : upLeft);
          break;
        }
        default:
          throw new Error(`unsupported PNG filter ${filter}`);
      }
      lines[outAt + x] = reconstructed & 0xff;
    }
  }

  const data = new Uint8Array(width * height * 4);
  for (let pixel = 0; pixel < width * height; pixel++) {
    const src = pixel * channels;
    let r: number, g: number, b: number, a: number;
    if (colorType === 0) {
      r = g = b = lines[src];
      a = 255;
    } else if (colorType === 4) {
      r = g = b = lines[src];
      a = lines[src + 1];
    } else if (colorType === 2) {
      r = lines[src];
      g = lines[src + 1];
      b = lines[src + 2];
      a = 255;
    } else {
      r = lines[src];
      g = lines[src + 1];
      b = lines[src + 2];
      a = lines[src + 3];
    }
    data.set([r, g, b, a], pixel * 4);
  }
  return { width, height, data };
}

/** Tiny PNG writer (8-bit RGB, filter 0) for tests and fixtures. */
export function encodePng(width: number, height: number, rgb: Uint8Array): Buffer {
  if (rgb.length !== width * height * 3) {
    throw new Error("rgb payload must be width*height*3 bytes");
  }
  const stride = width * 3;
  const withFilters = Buffer.alloc((stride + 1) * height);
  for (let y = 0; y < height; y++) {
    withFilters[y * (stride + 1)] = 0;
    Buffer.from(rgb.buffer, rgb.byteOffset + y * stride, stride).copy(
      withFilters, y * (stride + 1) + 1,
    );
  }
  const ihdr = Buffer.alloc(13);
  ihdr.writeUInt32BE(width, 0);
  ihdr.writeUInt32BE(height, 4);
  ihdr.writeUInt8(8, 8);   // bit depth
  ihdr.writeUInt8(2, 9);   // color type RGB
  const chunks = [
    chunk("IHDR", ihdr),
    chunk("IDAT", zlib.deflateSync(withFilters)),
    chunk("IEND", Buffer.alloc(0)),
  ];
  return Buffer.concat([SIGNATURE, ...chunks]);
}

function chunk(type: string, body: Buffer): Buffer {
  const out = Buffer.alloc(12 + body.length);
  out.writeUInt32BE(body.length, 0);
  out.write(type, 4, "ascii");
  body.copy(out, 8);
  out.writeUInt32BE(crc32(Buffer.concat([Buffer.from(type, "ascii"), body])), 8 + body.length);
  return out;
}

let CRC_TABLE: Uint32Array | null = null;

function crc32(buffer: Buffer): number {
  if (!CRC_TABLE) {
    CRC_TABLE = new Uint32Array(256);
    for (let n = 0; n < 256; n++) {
      let c = n;
      for (let k = 0; k < 8; k++) {
        c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
      }
      CRC_TABLE[n] = c >>> 0;
    }
  }
  let crc = 0xffffffff;
  for (const byte of buffer) {
    crc = CRC_TABLE[(crc ^ byte) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}

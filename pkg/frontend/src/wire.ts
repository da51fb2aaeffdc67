// Byte-level helpers shared by every page: hex, UTF-8, canonical JSON, SHA-256.

export function bytesToHex(bytes: Uint8Array): string {
  return Array.from(bytes)
    .map((b) => b.toString(16).padStart(2, "0"))
    .join("");
}

export function hexToBytes(hex: string): Uint8Array {
  if (!/^[0-9a-fA-F]*$/.test(hex) || hex.length % 2 !== 0) {
    throw new Error(`not a hex string: ${hex.slice(0, 32)}`);
  }
  const out = new Uint8Array(hex.length / 2);
  for (let i = 0; i < out.length; i++) {
    out[i] = parseInt(hex.slice(i * 2, i * 2 + 2), 16);
  }
  return out;
}

export function utf8(text: string): Uint8Array {
  return new TextEncoder().encode(text);
}

type Wireable = string | number | boolean | null | Wireable[] | { [key: string]: Wireable };

/**
 * Canonical JSON: keys sorted, no whitespace, non-ASCII escaped as \uXXXX.
 * Must stay byte-identical to what the servers sign and hash.
 */
export function toWire(value: Wireable): string {
  if (value === null || typeof value === "number" || typeof value === "boolean") {
    return JSON.stringify(value);
  }
  if (typeof value === "string") {
    return escapeNonAscii(JSON.stringify(value));
  }
  if (Array.isArray(value)) {
    return "[" + value.map(toWire).join(",") + "]";
  }
  const keys = Object.keys(value).sort();
  const parts = keys.map((k) => escapeNonAscii(JSON.stringify(k)) + ":" + toWire(value[k]!));
  return "{" + parts.join(",") + "}";
}

function escapeNonAscii(jsonString: string): string {
  return jsonString.replace(/[-￿]/g, (ch) => {
    return "\\u" + ch.charCodeAt(0).toString(16).padStart(4, "0");
  });
}

export async function sha256(data: Uint8Array): Promise<Uint8Array> {
  const subtle = globalThis.crypto?.subtle;
  if (subtle) {
    return new Uint8Array(await subtle.digest("SHA-256", data as BufferSource));
  }
  // test runners that stub out WebCrypto fall back to the node built-in
  const { createHash } = await import("node:crypto");
  return new Uint8Array(createHash("sha256").update(data).digest());
}

export async function sha256Hex(data: Uint8Array): Promise<string> {
  return bytesToHex(await sha256(data));
}

export function concatBytes(...parts: Uint8Array[]): Uint8Array {
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let offset = 0;
  for (const part of parts) {
    out.set(part, offset);
    offset += part.length;
  }
  return out;
}

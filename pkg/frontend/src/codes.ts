// Ballot domain logic: canonical vote encoding, verification codes, and the
// published-file line formats. Mirrors the server rules bit for bit — the
// whole point of the booth is recomputing these on the voter's side.

import { bytesToHex, concatBytes, hexToBytes, sha256Hex, toWire, utf8 } from "./wire.js";

export interface Question {
  question_id: string;
  text: string;
  choices: string[];
}

export interface BallotSpec {
  ballot_id: string;
  questions: Question[];
  open_at: string;
  close_at: string;
}

export type Answer = [string, number];

export interface Vote {
  ballot_id: string;
  answers: Answer[];
}

export interface Receipt {
  verification_code: string;
  timestamp: string;
  random_string: string; // hex
  signature: string; // hex
  signer_key_id: string;
}

export const CODE_SALT_BYTES = 16;

const TIMESTAMP_RE = /^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{6}Z$/;

export function isTimestamp(value: string): boolean {
  return TIMESTAMP_RE.test(value);
}

export function validateVote(vote: Vote, spec: BallotSpec): void {
  if (vote.ballot_id !== spec.ballot_id) {
    throw new Error(`vote is for ballot ${vote.ballot_id}, form is ${spec.ballot_id}`);
  }
  const byId = new Map(vote.answers);
  if (byId.size !== vote.answers.length || byId.size !== spec.questions.length) {
    throw new Error("every question needs exactly one answer");
  }
  for (const q of spec.questions) {
    const choice = byId.get(q.question_id);
    if (choice === undefined || !Number.isInteger(choice) || choice < 0 || choice >= q.choices.length) {
      throw new Error(`question ${q.question_id}: choice out of range`);
    }
  }
}

/** Canonical bytes: ballot id, then `question-id=choice` per line in form order. */
export function canonicalEncodeVote(vote: Vote, spec: BallotSpec): Uint8Array {
  validateVote(vote, spec);
  const byId = new Map(vote.answers);
  const lines = [vote.ballot_id];
  for (const q of spec.questions) {
    lines.push(`${q.question_id}=${byId.get(q.question_id)}`);
  }
  return utf8(lines.join("\n"));
}

/** H(canonical vote || LF || timestamp || LF || random string), as lowercase hex. */
export async function computeVerificationCode(
  vote: Vote,
  spec: BallotSpec,
  timestamp: string,
  randomString: Uint8Array,
): Promise<string> {
  if (randomString.length !== CODE_SALT_BYTES) {
    throw new Error(`random string must be ${CODE_SALT_BYTES} bytes`);
  }
  if (!isTimestamp(timestamp)) {
    throw new Error(`malformed timestamp: ${timestamp}`);
  }
  const preimage = concatBytes(
    canonicalEncodeVote(vote, spec),
    utf8("\n" + timestamp + "\n"),
    randomString,
  );
  return sha256Hex(preimage);
}

export function parseReceipt(data: unknown): Receipt {
  if (typeof data !== "object" || data === null) {
    throw new Error("receipt must be a JSON object");
  }
  const record = data as Record<string, unknown>;
  for (const field of ["verification_code", "timestamp", "random_string", "signature", "signer_key_id"]) {
    if (typeof record[field] !== "string") {
      throw new Error(`receipt is missing ${field}`);
    }
  }
  const receipt = record as unknown as Receipt;
  if (hexToBytes(receipt.random_string).length !== CODE_SALT_BYTES) {
    throw new Error("receipt random string has the wrong length");
  }
  if (hexToBytes(receipt.verification_code).length !== 32) {
    throw new Error("receipt verification code is not a SHA-256 digest");
  }
  if (!isTimestamp(receipt.timestamp)) {
    throw new Error("receipt timestamp is malformed");
  }
  return receipt;
}

/** Recompute the receipt's code from the vote the voter believes she cast. */
export async function receiptCodeMatches(
  receipt: Receipt,
  vote: Vote,
  spec: BallotSpec,
): Promise<boolean> {
  const recomputed = await computeVerificationCode(
    vote,
    spec,
    receipt.timestamp,
    hexToBytes(receipt.random_string),
  );
  return recomputed === receipt.verification_code;
}

export function voteToWire(vote: Vote): string {
  return toWire({ answers: vote.answers, ballot_id: vote.ballot_id });
}

// -- published files ----------------------------------------------------------

export function readPublishedList(text: string): string[] {
  return text.split("\n").filter((line) => line.length > 0);
}

export interface CodeVoteEntry {
  code: string;
  timestamp: string;
  randomString: Uint8Array;
  vote: Vote;
}

export function parseCodeVoteLine(line: string): CodeVoteEntry {
  const parts = line.split("\t");
  if (parts.length < 4) {
    throw new Error(`malformed code-vote line: ${line.slice(0, 60)}`);
  }
  const [code, timestamp, saltHex] = parts as [string, string, string, ...string[]];
  const voteJson = parts.slice(3).join("\t");
  const parsed = JSON.parse(voteJson) as { ballot_id: string; answers: Answer[] };
  return {
    code,
    timestamp,
    randomString: hexToBytes(saltHex),
    vote: { ballot_id: parsed.ballot_id, answers: parsed.answers },
  };
}

export interface UsedTokenEntry {
  tokenDigest: string;
  usedAt: string;
}

export function parseUsedTokenLine(line: string): UsedTokenEntry {
  const parts = line.split("\t");
  if (parts.length !== 3 || parts[2] !== "") {
    throw new Error(`malformed used-token line: ${line.slice(0, 60)}`);
  }
  return { tokenDigest: parts[0]!, usedAt: parts[1]! };
}

export async function tokenDigestOf(tokenText: string): Promise<string> {
  // tokens are base32 (RFC 4648, no padding) of 20 random bytes; only the
  // digest of those bytes ever appears in a published file
  return sha256Hex(base32Decode(tokenText.trim().toUpperCase()));
}

const BASE32_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ234567";

function base32Decode(text: string): Uint8Array {
  let bits = 0;
  let value = 0;
  const out: number[] = [];
  for (const ch of text) {
    const index = BASE32_ALPHABET.indexOf(ch);
    if (index < 0) {
      throw new Error(`not a vote token: bad character ${ch}`);
    }
    value = (value << 5) | index;
    bits += 5;
    if (bits >= 8) {
      out.push((value >>> (bits - 8)) & 0xff);
      bits -= 8;
    }
  }
  return new Uint8Array(out);
}

export { bytesToHex, hexToBytes };

/** Wire protocol: canonical JSON messages shared with the simulation server.
 *
 * Every message has a fixed key order and a deterministic number format so
 * both ends produce byte-identical text for the same logical message.  The
 * goldens in fixtures/protocol/ pin the format; the server test suite checks
 * the same files.
 *
 * Canonical form:
 *   - no whitespace, keys in the per-type order below, "type" first
 *   - strings escaped ASCII-only (non-ASCII as \uXXXX, lowercase hex)
 *   - integral numbers in plain decimal ("4", never "4.0")
 *   - other floats: shortest round-trip decimal, re-expanded positionally
 *     when toString would use an exponent ("1.5e-8" -> "0.0000000015")
 *   - float arrays (positions, mesh vertices) as base64 little-endian f32
 */

export type MessageType =
  | 'pin' | 'drag' | 'release' | 'reset' | 'pause' | 'resume'
  | 'mesh' | 'frame' | 'error';

// field order per message type, after the leading "type"
export const MESSAGE_FIELDS: Record<MessageType, readonly string[]> = {
  pin: ['vertices', 'target', 'stiffness'],
  drag: ['point', 'target', 'stiffness', 'id'],
  release: ['id'],
  reset: [],
  pause: [],
  resume: [],
  mesh: ['vertices', 'faces'],
  frame: ['step', 't', 'z', 'positions', 'objective', 'ms'],
  error: ['detail'],
};

const INT_FIELDS = new Set(['id', 'step', 'faces', 'vertices@pin']);
const F32_FIELDS = new Set(['positions', 'vertices@mesh']);

export class ProtocolError extends Error {}

type Wire = Record<string, unknown> & { type: MessageType };

export function canonicalNumber(v: number): string {
  if (!Number.isFinite(v)) {
    throw new ProtocolError(`non-finite number ${v} in message`);
  }
  if (Number.isInteger(v) && Math.abs(v) <= 2 ** 53) {
    return String(Math.trunc(v) + 0); // +0 folds -0 to "0"
  }
  const r = String(v); // shortest round-trip decimal
  const ei = r.indexOf('e');
  if (ei < 0) return r;
  // expand exponent notation positionally, keeping the shortest digits
  let mant = r.slice(0, ei);
  const exp = parseInt(r.slice(ei + 1), 10);
  const sign = mant.startsWith('-') ? '-' : '';
  mant = mant.replace('-', '');
  const dot = mant.indexOf('.');
  const whole = dot < 0 ? mant : mant.slice(0, dot);
  const frac = dot < 0 ? '' : mant.slice(dot + 1);
  let digits = (whole + frac).replace(/^0+/, '');
  if (digits === '') digits = '0';
  let point = whole.length - (whole.length + frac.length - digits.length);
  point += exp;
  if (point <= 0) return sign + '0.' + '0'.repeat(-point) + digits;
  if (point >= digits.length) return sign + digits + '0'.repeat(point - digits.length);
  return sign + digits.slice(0, point) + '.' + digits.slice(point);
}

const SHORT_ESCAPES: Record<string, string> = {
  '"': '\\"', '\\': '\\\\', '\b': '\\b', '\f': '\\f',
  '\n': '\\n', '\r': '\\r', '\t': '\\t',
};

/** JSON string literal, ASCII-only, matching Python's ensure_ascii output. */
export function canonicalString(s: string): string {
  let out = '"';
  for (let i = 0; i < s.length; i++) {
    const ch = s[i];
    const code = s.charCodeAt(i);
    const short = SHORT_ESCAPES[ch];
    if (short !== undefined) {
      out += short;
    } else if (code < 0x20 || code > 0x7e) {
      // surrogate halves pass through individually, matching json.dumps
      out += '\\u' + code.toString(16).padStart(4, '0');
    } else {
      out += ch;
    }
  }
  return out + '"';
}

function canonicalValue(v: unknown): string {
  if (typeof v === 'string') return canonicalString(v);
  if (typeof v === 'number') return canonicalNumber(v);
  if (Array.isArray(v)) return '[' + v.map(canonicalValue).join(',') + ']';
  if (v instanceof Float64Array || v instanceof Float32Array) {
    return '[' + Array.from(v, canonicalNumber).join(',') + ']';
  }
  throw new ProtocolError(`unsupported protocol value of type ${typeof v}`);
}

function asInt(v: unknown): number {
  if (typeof v !== 'number' || !Number.isInteger(v)) {
    throw new ProtocolError(`expected integer, got ${JSON.stringify(v)}`);
  }
  return v;
}

const B64 = 'ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/';

export function b64FromBytes(bytes: Uint8Array): string {
  let out = '';
  for (let i = 0; i < bytes.length; i += 3) {
    const a = bytes[i];
    const b = i + 1 < bytes.length ? bytes[i + 1] : 0;
    const c = i + 2 < bytes.length ? bytes[i + 2] : 0;
    out += B64[a >> 2] + B64[((a & 3) << 4) | (b >> 4)];
    out += i + 1 < bytes.length ? B64[((b & 15) << 2) | (c >> 6)] : '=';
    out += i + 2 < bytes.length ? B64[c & 63] : '=';
  }
  return out;
}

export function bytesFromB64(text: string): Uint8Array {
  if (!/^[A-Za-z0-9+/]*={0,2}$/.test(text) || text.length % 4 !== 0) {
    throw new ProtocolError('bad base64 payload');
  }
  const pad = text.endsWith('==') ? 2 : text.endsWith('=') ? 1 : 0;
  const n = (text.length / 4) * 3 - pad;
  const out = new Uint8Array(n);
  let o = 0;
  for (let i = 0; i < text.length; i += 4) {
    const bits =
      (B64.indexOf(text[i]) << 18) | (B64.indexOf(text[i + 1]) << 12) |
      ((text[i + 2] === '=' ? 0 : B64.indexOf(text[i + 2])) << 6) |
      (text[i + 3] === '=' ? 0 : B64.indexOf(text[i + 3]));
    if (o < n) out[o++] = bits >> 16;
    if (o < n) out[o++] = (bits >> 8) & 0xff;
    if (o < n) out[o++] = bits & 0xff;
  }
  return out;
}

/** Encode numbers as base64 little-endian float32, the wire array format. */
export function b64F32(values: ArrayLike<number>): string {
  const arr = new Float32Array(values.length);
  for (let i = 0; i < values.length; i++) arr[i] = values[i];
  const bytes = new Uint8Array(arr.buffer);
  if (!isLittleEndian()) byteSwap32(bytes);
  return b64FromBytes(bytes);
}

export function f32FromB64(text: string): Float32Array {
  const bytes = bytesFromB64(text);
  if (bytes.length % 4 !== 0) {
    throw new ProtocolError(`f32 payload length ${bytes.length} not a multiple of 4`);
  }
  const copy = new Uint8Array(bytes); // own the buffer before viewing it
  if (!isLittleEndian()) byteSwap32(copy);
  return new Float32Array(copy.buffer);
}

function isLittleEndian(): boolean {
  return new Uint8Array(new Uint16Array([1]).buffer)[0] === 1;
}

function byteSwap32(bytes: Uint8Array): void {
  for (let i = 0; i < bytes.length; i += 4) {
    let t = bytes[i]; bytes[i] = bytes[i + 3]; bytes[i + 3] = t;
    t = bytes[i + 1]; bytes[i + 1] = bytes[i + 2]; bytes[i + 2] = t;
  }
}

/** Render one message object to its canonical wire text. */
export function encodeMessage(msg: Wire): string {
  const fields = MESSAGE_FIELDS[msg.type];
  if (fields === undefined) {
    throw new ProtocolError(`unknown message type ${JSON.stringify(msg.type)}`);
  }
  for (const k of Object.keys(msg)) {
    if (k !== 'type' && !fields.includes(k)) {
      throw new ProtocolError(`unexpected field ${JSON.stringify(k)} for ${msg.type}`);
    }
  }
  const parts = ['"type":' + canonicalString(msg.type)];
  for (const key of fields) {
    const v = msg[key];
    if (v === undefined) {
      throw new ProtocolError(`${msg.type} message missing field ${JSON.stringify(key)}`);
    }
    const tagged = `${key}@${msg.type}`;
    let rendered: string;
    if (F32_FIELDS.has(key) || F32_FIELDS.has(tagged)) {
      rendered = canonicalString(
        typeof v === 'string' ? v : b64F32(v as ArrayLike<number>));
    } else if (INT_FIELDS.has(key) || INT_FIELDS.has(tagged)) {
      rendered = Array.isArray(v)
        ? '[' + v.map((x) => String(asInt(x))).join(',') + ']'
        : String(asInt(v));
    } else {
      rendered = canonicalValue(v);
    }
    parts.push(canonicalString(key) + ':' + rendered);
  }
  return '{' + parts.join(',') + '}';
}

/** Parse and validate one wire message. */
export function decodeMessage(text: string): Wire {
  let msg: unknown;
  try {
    msg = JSON.parse(text);
  } catch (e) {
    throw new ProtocolError(`not valid JSON: ${(e as Error).message}`);
  }
  if (msg === null || typeof msg !== 'object' || Array.isArray(msg)) {
    throw new ProtocolError('message must be a JSON object');
  }
  const m = msg as Record<string, unknown>;
  const fields = MESSAGE_FIELDS[m.type as MessageType];
  if (fields === undefined) {
    throw new ProtocolError(`unknown message type ${JSON.stringify(m.type)}`);
  }
  const missing = fields.filter((k) => !(k in m));
  if (missing.length) {
    throw new ProtocolError(`${m.type} message missing fields ${missing.join(',')}`);
  }
  for (const k of Object.keys(m)) {
    if (k !== 'type' && !fields.includes(k)) {
      throw new ProtocolError(`unexpected field ${JSON.stringify(k)} for ${m.type}`);
    }
  }
  return m as Wire;
}

// typed views over decoded server messages

export interface MeshData {
  positions: Float32Array; // 3 per vertex
  faces: Uint32Array;      // 3 per triangle
}

export function meshData(msg: Wire): MeshData {
  const positions = f32FromB64(msg.vertices as string);
  const faces = Uint32Array.from(msg.faces as number[]);
  if (positions.length % 3 !== 0 || faces.length % 3 !== 0) {
    throw new ProtocolError('mesh arrays must be multiples of 3');
  }
  return { positions, faces };
}

export interface FrameData {
  step: number;
  t: number;
  positions: Float32Array;
  objective: number;
  ms: number;
}

export function frameData(msg: Wire): FrameData {
  return {
    step: msg.step as number,
    t: msg.t as number,
    positions: f32FromB64(msg.positions as string),
    objective: msg.objective as number,
    ms: msg.ms as number,
  };
}

"""Wire protocol: canonical JSON messages shared with the browser viewer.

Every message has a fixed key order and a deterministic number format so
that the Python and TypeScript encoders produce byte-identical text for
the same logical message (goldens live in fixtures/protocol/).

Canonical form:
  - no whitespace, keys in the per-type order below, "type" first
  - strings escaped ASCII-only (non-ASCII as \\uXXXX, lowercase hex)
  - integers in plain decimal
  - floats: integral values print as integers ("4", not "4.0"); anything
    else uses the shortest round-trip decimal, re-expanded positionally
    when repr would use an exponent ("1.5e-08" -> "0.000000015")
  - float arrays (positions, mesh vertices) as base64 little-endian f32
"""

import base64
import json
import math

import numpy as np

# field order per message type, after the leading "type"
MESSAGE_FIELDS = {
    # client -> server
    "pin": ("vertices", "target", "stiffness"),
    "drag": ("point", "target", "stiffness", "id"),
    "release": ("id",),
    "reset": (),
    "pause": (),
    "resume": (),
    # server -> client
    "mesh": ("vertices", "faces"),
    "frame": ("step", "t", "z", "positions", "objective", "ms"),
    "error": ("detail",),
}

_INT_FIELDS = {"id", "step", "faces", "vertices@pin"}
_F32_FIELDS = {"positions", "vertices@mesh"}


class ProtocolError(ValueError):
    pass


def canonical_number(v) -> str:
    """Deterministic cross-language number rendering (see module docs)."""
    if isinstance(v, bool):
        raise ProtocolError("booleans are not protocol numbers")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        raise ProtocolError(f"non-finite number {v!r} in message")
    if v == int(v) and abs(v) <= 2 ** 53:
        return str(int(v))          # covers -0.0 -> "0" as well
    r = repr(v)
    if "e" not in r and "E" not in r:
        return r
    # expand exponent notation positionally, keeping the shortest digits
    mant, exp = r.lower().split("e")
    exp = int(exp)
    sign = "-" if mant.startswith("-") else ""
    mant = mant.lstrip("-")
    if "." in mant:
        whole, frac = mant.split(".")
    else:
        whole, frac = mant, ""
    digits = (whole + frac).lstrip("0") or "0"
    point = len(whole) - (len(whole + frac) - len(digits))  # after leading-0 strip
    point += exp
    if point <= 0:
        return sign + "0." + "0" * (-point) + digits
    if point >= len(digits):
        return sign + digits + "0" * (point - len(digits))
    return sign + digits[:point] + "." + digits[point:]


def _canonical_value(v):
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=True)
    if isinstance(v, bool) or v is None:
        raise ProtocolError(f"unsupported protocol value {v!r}")
    if isinstance(v, (int, float, np.integer, np.floating)):
        return canonical_number(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ",".join(_canonical_value(x) for x in v) + "]"
    raise ProtocolError(f"unsupported protocol value of type {type(v).__name__}")


def b64_f32(values) -> str:
    arr = np.asarray(values, dtype="<f4").ravel()
    return base64.b64encode(arr.tobytes()).decode("ascii")


def f32_from_b64(text: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except Exception as e:
        raise ProtocolError(f"bad base64 payload: {e}") from None
    if len(raw) % 4:
        raise ProtocolError(f"f32 payload length {len(raw)} not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def encode_message(msg: dict) -> str:
    """Render one message dict to its canonical wire text."""
    if "type" not in msg:
        raise ProtocolError("message lacks a type")
    mtype = msg["type"]
    fields = MESSAGE_FIELDS.get(mtype)
    if fields is None:
        raise ProtocolError(f"unknown message type {mtype!r}")
    extra = set(msg) - set(fields) - {"type"}
    if extra:
        raise ProtocolError(f"unexpected fields for {mtype!r}: {sorted(extra)}")
    parts = ['"type":' + json.dumps(mtype)]
    for key in fields:
        if key not in msg:
            raise ProtocolError(f"{mtype!r} message missing field {key!r}")
        v = msg[key]
        tagged = f"{key}@{mtype}"
        if key in _F32_FIELDS or tagged in _F32_FIELDS:
            if not isinstance(v, str):
                v = b64_f32(v)
            rendered = json.dumps(v)
        elif key in _INT_FIELDS or tagged in _INT_FIELDS:
            if isinstance(v, (list, tuple, np.ndarray)):
                rendered = "[" + ",".join(str(_as_int(x)) for x in v) + "]"
            else:
                rendered = str(_as_int(v))
        else:
            rendered = _canonical_value(v)
        parts.append(json.dumps(key) + ":" + rendered)
    return "{" + ",".join(parts) + "}"


def _as_int(v):
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        if isinstance(v, float) and v == int(v):
            return int(v)
        raise ProtocolError(f"expected integer, got {v!r}")
    return int(v)


def decode_message(text: str) -> dict:
    """Parse and validate one wire message into a plain dict."""
    try:
        msg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"not valid JSON: {e}") from None
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    mtype = msg.get("type")
    fields = MESSAGE_FIELDS.get(mtype)
    if fields is None:
        raise ProtocolError(f"unknown message type {mtype!r}")
    missing = [k for k in fields if k not in msg]
    if missing:
        raise ProtocolError(f"{mtype!r} message missing fields {missing}")
    extra = set(msg) - set(fields) - {"type"}
    if extra:
        raise ProtocolError(f"unexpected fields for {mtype!r}: {sorted(extra)}")
    return msg


# convenience builders used by the service (field order == wire order)


def frame_message(step, t, z, positions, objective, ms) -> str:
    return encode_message({
        "type": "frame", "step": step, "t": t,
        "z": [float(v) for v in np.asarray(z).ravel()],
        "positions": b64_f32(positions), "objective": objective, "ms": ms,
    })


def mesh_message(vertices, faces) -> str:
    return encode_message({
        "type": "mesh", "vertices": b64_f32(vertices),
        "faces": [int(i) for i in np.asarray(faces).ravel()],
    })


def error_message(detail: str) -> str:
    return encode_message({"type": "error", "detail": str(detail)})

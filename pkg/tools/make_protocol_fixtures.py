"""Regenerate the wire-protocol goldens in fixtures/protocol/.

The same logical messages are re-encoded by the Python and TypeScript
test suites and compared byte-for-byte against these files; edit the
message list here and in the suites together or not at all.
"""

from physkin import protocol as P

MESSAGES = {
    "pin": {"type": "pin", "vertices": [0, 5, 1243],
            "target": [-1.0, 0.25, 0.125], "stiffness": 100000.0},
    "drag": {"type": "drag", "point": [0.1, -0.2, 0.30000000000000004],
             "target": [1e-7, -9.8, 4.0], "stiffness": 12345.678, "id": 7},
    "release": {"type": "release", "id": 3},
    "reset": {"type": "reset"},
    "pause": {"type": "pause"},
    "resume": {"type": "resume"},
    "mesh": {"type": "mesh", "vertices": [0.0, 1.5, -2.25, 0.1, 0.2, 0.3],
             "faces": [0, 1, 2]},
    "frame": {"type": "frame", "step": 12, "t": 0.2,
              "z": [0.0, -0.000125, 2.5, 0.3333333333333333],
              "positions": [1.0, 2.5, -3.25],
              "objective": -12345.6789, "ms": 4.25},
    "error": {"type": "error", "detail": 'bad "json" \\ line\n bell\x07 café'},
}

if __name__ == "__main__":
    for name, msg in MESSAGES.items():
        with open(f"fixtures/protocol/{name}.txt", "wb") as fh:
            fh.write(P.encode_message(msg).encode("utf-8"))
        print(name)

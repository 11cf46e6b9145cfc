"""Regenerate assets/beam.obj: a welded box beam, 2 x 0.5 x 0.5, ~1.2k vertices.

The surface of an (nx, ny, nz) cell lattice is emitted with shared
vertices along edges and corners so the mesh is watertight, with outward
consistent winding.
"""

import os

NX, NY, NZ = 30, 9, 9
SIZE = (2.0, 0.5, 0.5)


def main(path):
    hx, hy, hz = SIZE[0] / 2, SIZE[1] / 2, SIZE[2] / 2
    steps = (NX, NY, NZ)
    lo = (-hx, -hy, -hz)
    span = SIZE

    verts = []
    index = {}

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(verts) + 1
            verts.append((lo[0] + span[0] * i / steps[0],
                          lo[1] + span[1] * j / steps[1],
                          lo[2] + span[2] * k / steps[2]))
        return index[key]

    faces = []

    def quad(a, b, c, d):
        faces.append((a, b, c))
        faces.append((a, c, d))

    # the two faces normal to each axis; winding chosen so normals point out
    for j in range(NY):
        for k in range(NZ):
            quad(vid(0, j, k), vid(0, j, k + 1), vid(0, j + 1, k + 1), vid(0, j + 1, k))
            quad(vid(NX, j, k), vid(NX, j + 1, k), vid(NX, j + 1, k + 1), vid(NX, j, k + 1))
    for i in range(NX):
        for k in range(NZ):
            quad(vid(i, 0, k), vid(i + 1, 0, k), vid(i + 1, 0, k + 1), vid(i, 0, k + 1))
            quad(vid(i, NY, k), vid(i, NY, k + 1), vid(i + 1, NY, k + 1), vid(i + 1, NY, k))
    for i in range(NX):
        for j in range(NY):
            quad(vid(i, j, 0), vid(i, j + 1, 0), vid(i + 1, j + 1, 0), vid(i + 1, j, 0))
            quad(vid(i, j, NZ), vid(i + 1, j, NZ), vid(i + 1, j + 1, NZ), vid(i, j + 1, NZ))

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# box beam {SIZE[0]} x {SIZE[1]} x {SIZE[2]}, "
                 f"{len(verts)} vertices / {len(faces)} triangles\n")
        for v in verts:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in faces:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    print(f"wrote {path}: {len(verts)} vertices, {len(faces)} triangles")


if __name__ == "__main__":
    here = os.path.dirname(os.path.abspath(__file__))
    main(os.path.join(here, "..", "assets", "beam.obj"))

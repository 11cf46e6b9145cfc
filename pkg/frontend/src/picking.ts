/** CPU picking: cast a ray through the mesh, report the nearest hit and the
 * closest vertex of the hit triangle.  Desk-scale meshes are a few thousand
 * triangles, so brute force beats any acceleration structure here.
 */

export type Vec3 = [number, number, number];

export interface Pick {
  vertex: number;   // index of the triangle corner nearest the hit
  point: Vec3;      // the ray-triangle intersection itself
  distance: number; // along the ray
}

const EPS = 1e-9;

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

function at(positions: ArrayLike<number>, i: number): Vec3 {
  return [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
}

/** Moller-Trumbore; returns the ray parameter t or null on a miss. */
export function rayTriangle(origin: Vec3, dir: Vec3,
                            a: Vec3, b: Vec3, c: Vec3): number | null {
  const e1 = sub(b, a);
  const e2 = sub(c, a);
  const p = cross(dir, e2);
  const det = dot(e1, p);
  if (Math.abs(det) < EPS) return null; // parallel
  const inv = 1 / det;
  const s = sub(origin, a);
  const u = dot(s, p) * inv;
  if (u < -EPS || u > 1 + EPS) return null;
  const q = cross(s, e1);
  const v = dot(dir, q) * inv;
  if (v < -EPS || u + v > 1 + EPS) return null;
  const t = dot(e2, q) * inv;
  return t > EPS ? t : null;
}

/** Nearest front hit over the whole mesh, or null for background clicks. */
export function pickVertex(origin: Vec3, dir: Vec3,
                           positions: ArrayLike<number>,
                           faces: ArrayLike<number>): Pick | null {
  let best: { t: number; i0: number; i1: number; i2: number } | null = null;
  for (let f = 0; f < faces.length; f += 3) {
    const i0 = faces[f], i1 = faces[f + 1], i2 = faces[f + 2];
    const t = rayTriangle(origin, dir,
                          at(positions, i0), at(positions, i1), at(positions, i2));
    if (t !== null && (best === null || t < best.t)) {
      best = { t, i0, i1, i2 };
    }
  }
  if (best === null) return null;
  const hit: Vec3 = [
    origin[0] + dir[0] * best.t,
    origin[1] + dir[1] * best.t,
    origin[2] + dir[2] * best.t,
  ];
  let vertex = best.i0;
  let dBest = Infinity;
  for (const i of [best.i0, best.i1, best.i2]) {
    const d = dot(sub(hit, at(positions, i)), sub(hit, at(positions, i)));
    if (d < dBest) {
      dBest = d;
      vertex = i;
    }
  }
  return { vertex, point: hit, distance: best.t };
}

export interface Camera {
  eye: Vec3;
  target: Vec3;
  up: Vec3;
  fovY: number; // radians
}

/** World-space ray through a canvas pixel. */
export function rayFromScreen(cam: Camera, x: number, y: number,
                              width: number, height: number): { origin: Vec3; dir: Vec3 } {
  const fwd = norm(sub(cam.target, cam.eye));
  const right = norm(cross(fwd, cam.up));
  const up = cross(right, fwd);
  const ndcX = (2 * x) / width - 1;
  const ndcY = 1 - (2 * y) / height;
  const tanF = Math.tan(cam.fovY / 2);
  const aspect = width / height;
  const dir = norm([
    fwd[0] + right[0] * ndcX * tanF * aspect + up[0] * ndcY * tanF,
    fwd[1] + right[1] * ndcX * tanF * aspect + up[1] * ndcY * tanF,
    fwd[2] + right[2] * ndcX * tanF * aspect + up[2] * ndcY * tanF,
  ]);
  return { origin: [...cam.eye], dir };
}

function norm(v: Vec3): Vec3 {
  const n = Math.hypot(v[0], v[1], v[2]) || 1;
  return [v[0] / n, v[1] / n, v[2] / n];
}

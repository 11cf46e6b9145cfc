/** Viewer entry point: one canvas, one socket, one render loop.
 *
 * Bindings: left press drags the surface point under the cursor (move the
 * pointer to steer the target, release to let go), shift+click pins the
 * nearest vertex where it currently sits, right-drag orbits, wheel zooms.
 */

import { Session } from './session.js';
import { Renderer, Hud } from './renderer.js';
import { pickVertex, rayFromScreen, Vec3 } from './picking.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>('view');
const banner = el<HTMLDivElement>('banner');
const bannerText = el<HTMLSpanElement>('banner-text');
const retryBtn = el<HTMLButtonElement>('retry');
const hud = new Hud(el<HTMLDivElement>('hud'));
const renderer = new Renderer(canvas);
const session = new Session();

// ?server=ws://host:port/ws overrides; default matches `physkin serve`
const wsUrl = new URLSearchParams(location.search).get('server')
  ?? `ws://${location.hostname || '127.0.0.1'}:8787/ws`;

const pins: number[] = []; // vertex indices, marker follows the live frame
interface PointerDrag {
  dragId: number;
  planePoint: Vec3; // drag moves in the view plane through the grab point
}
const pointerDrags = new Map<number, PointerDrag>();
let orbitFrom: { x: number; y: number } | null = null;

function currentPositions(): Float32Array | null {
  return session.frame?.positions ?? session.mesh?.positions ?? null;
}

function pickAt(x: number, y: number) {
  const pos = currentPositions();
  if (!pos || !session.mesh) return null;
  const r = rayFromScreen(renderer.camera, x, y, canvas.clientWidth,
                          canvas.clientHeight);
  return { ...r, hit: pickVertex(r.origin, r.dir, pos, session.mesh.faces) };
}

/** Where the pointer ray meets the camera-parallel plane through p. */
function dragTarget(x: number, y: number, p: Vec3): Vec3 {
  const { origin, dir } = rayFromScreen(renderer.camera, x, y,
                                        canvas.clientWidth, canvas.clientHeight);
  const cam = renderer.camera;
  const n: Vec3 = [
    cam.eye[0] - cam.target[0],
    cam.eye[1] - cam.target[1],
    cam.eye[2] - cam.target[2],
  ];
  const denom = n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2];
  if (Math.abs(denom) < 1e-12) return p;
  const t = (n[0] * (p[0] - origin[0]) + n[1] * (p[1] - origin[1])
    + n[2] * (p[2] - origin[2])) / denom;
  return [origin[0] + dir[0] * t, origin[1] + dir[1] * t, origin[2] + dir[2] * t];
}

canvas.addEventListener('pointerdown', (e) => {
  if (e.button === 2) {
    orbitFrom = { x: e.clientX, y: e.clientY };
    canvas.setPointerCapture(e.pointerId);
    return;
  }
  if (e.button !== 0) return;
  const picked = pickAt(e.offsetX, e.offsetY);
  if (!picked || !picked.hit) return; // background press is a no-op
  canvas.setPointerCapture(e.pointerId);
  if (e.shiftKey) {
    // pin the nearest vertex at its current position
    const pos = currentPositions()!;
    const v = picked.hit.vertex;
    const here: Vec3 = [pos[3 * v], pos[3 * v + 1], pos[3 * v + 2]];
    session.pin(v, here);
    if (!pins.includes(v)) pins.push(v);
    return;
  }
  const p = picked.hit.point;
  const dragId = session.startDrag(p, p);
  pointerDrags.set(e.pointerId, { dragId, planePoint: p });
});

canvas.addEventListener('pointermove', (e) => {
  if (orbitFrom) {
    renderer.orbit(e.clientX - orbitFrom.x, e.clientY - orbitFrom.y);
    orbitFrom = { x: e.clientX, y: e.clientY };
    return;
  }
  const d = pointerDrags.get(e.pointerId);
  if (d) {
    session.moveDrag(d.dragId, dragTarget(e.offsetX, e.offsetY, d.planePoint));
  }
});

function endPointer(e: PointerEvent) {
  if (orbitFrom && e.button === 2) orbitFrom = null;
  const d = pointerDrags.get(e.pointerId);
  if (d) {
    session.endDrag(d.dragId);
    pointerDrags.delete(e.pointerId);
  }
}
canvas.addEventListener('pointerup', endPointer);
canvas.addEventListener('pointercancel', endPointer);
canvas.addEventListener('contextmenu', (e) => e.preventDefault());
canvas.addEventListener('wheel', (e) => {
  e.preventDefault();
  renderer.zoom(e.deltaY > 0 ? 1.1 : 0.9);
}, { passive: false });

el<HTMLButtonElement>('reset').addEventListener('click', () => {
  pins.length = 0;
  session.reset();
});
el<HTMLButtonElement>('pause').addEventListener('click', () => session.pause());
el<HTMLButtonElement>('resume').addEventListener('click', () => session.resume());
retryBtn.addEventListener('click', () => session.connect());

function markers(): Vec3[] {
  const pos = currentPositions();
  if (!pos) return [];
  return pins.map((v) => [pos[3 * v], pos[3 * v + 1], pos[3 * v + 2]] as Vec3);
}

function loop() {
  const ev = session.tick();
  if (ev.meshChanged && session.mesh) {
    renderer.uploadMesh(session.mesh.positions, session.mesh.faces);
  }
  if (ev.frameChanged && session.frame) {
    renderer.updatePositions(session.frame.positions);
  }
  if (ev.statusChanged || ev.meshChanged) {
    const show = session.status === 'error' || session.status === 'closed';
    banner.style.display = show ? 'flex' : 'none';
    if (session.banner) bannerText.textContent = session.banner;
  }
  renderer.setMarkers(markers());
  if (session.frame) {
    hud.show(session.frame.step, session.frame.ms, session.frame.objective,
             session.droppedFrames);
  } else {
    hud.message(session.status === 'connected'
      ? 'waiting for frames' : session.status);
  }
  renderer.draw();
  requestAnimationFrame(loop);
}

session.connect(wsUrl);
requestAnimationFrame(loop);

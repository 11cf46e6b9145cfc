/** End-to-end against a real server process: spawn `physkin serve` on the
 * beam fixture, connect the viewer session over an actual websocket, and
 * check the two behaviors that only a live pipe can show: the mesh arrives
 * ready to render within 2 s of connect, and a scripted drag pulls the
 * grabbed region toward its target monotonically over 30 frames.
 */

import { afterAll, beforeAll, describe, expect, it } from 'vitest';
import { spawn, ChildProcess } from 'node:child_process';
import { join, dirname } from 'node:path';
import { fileURLToPath } from 'node:url';
import WebSocket from 'ws';

import { Session, SocketFactory, SocketLike } from '../src/session.js';

const ROOT = join(dirname(fileURLToPath(import.meta.url)), '..', '..');
const PORT = 8900 + (process.pid % 500);
const URL_WS = `ws://127.0.0.1:${PORT}/ws`;

const wsFactory: SocketFactory = (url) => {
  const ws = new WebSocket(url);
  const like: SocketLike = {
    send: (d) => ws.send(d),
    close: () => ws.close(),
    onopen: null, onmessage: null, onclose: null, onerror: null,
  };
  ws.on('open', () => like.onopen?.());
  ws.on('message', (data) => like.onmessage?.({ data: data.toString() }));
  ws.on('close', () => like.onclose?.());
  ws.on('error', () => like.onerror?.());
  return like;
};

let server: ChildProcess;
let stderr = '';

async function waitForHealth(timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const resp = await fetch(`http://127.0.0.1:${PORT}/api/health`);
      if (resp.ok) return;
    } catch {
      // not listening yet
    }
    if (server.exitCode !== null) {
      throw new Error(`server exited early (${server.exitCode}):\n${stderr}`);
    }
    await sleep(200);
  }
  throw new Error(`server not healthy after ${timeoutMs} ms:\n${stderr}`);
}

function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

/** Pump session.tick() until cond holds or the deadline passes. */
async function pump(session: Session, cond: () => boolean,
                    ms: number): Promise<boolean> {
  const deadline = Date.now() + ms;
  while (Date.now() < deadline) {
    session.tick();
    if (cond()) return true;
    await sleep(3);
  }
  return false;
}

beforeAll(async () => {
  server = spawn('python3', [
    '-m', 'physkin.cli', 'serve',
    '--config', 'fixtures/viewer/serve.json',
    '--checkpoint', 'fixtures/viewer/tiny.ckpt',
    '--port', String(PORT),
  ], { cwd: ROOT, stdio: ['ignore', 'ignore', 'pipe'] });
  server.stderr!.on('data', (d) => { stderr += d.toString(); });
  await waitForHealth(60_000);
}, 70_000);

afterAll(() => {
  server?.kill('SIGTERM');
});

describe('live server', () => {
  it('delivers a renderable mesh within 2 s of connect', async () => {
    const session = new Session({ socketFactory: wsFactory });
    const t0 = Date.now();
    session.connect(URL_WS);
    const ok = await pump(session, () => session.mesh !== null, 2000);
    const elapsed = Date.now() - t0;
    expect(ok, `no mesh after ${elapsed} ms`).toBe(true);
    expect(elapsed).toBeLessThan(2000);

    const mesh = session.mesh!;
    expect(mesh.positions.length % 3).toBe(0);
    expect(mesh.positions.length / 3).toBeGreaterThan(100);
    const nv = mesh.positions.length / 3;
    for (const f of mesh.faces) expect(f).toBeLessThan(nv);
    expect(Array.from(mesh.positions).every(Number.isFinite)).toBe(true);

    // frames follow on their own
    const framed = await pump(session, () => session.frame !== null, 3000);
    expect(framed).toBe(true);
  }, 20_000);

  it('moves a dragged region monotonically toward the target over 30 frames',
     async () => {
    // a soft spring keeps the approach inside the observation window
    const session = new Session({ socketFactory: wsFactory, dragStiffness: 500 });
    session.connect(URL_WS);
    await pump(session, () => session.frame !== null, 5000);
    expect(session.frame).not.toBeNull();

    // grab the +x beam tip where it currently sits
    const rest = session.mesh!.positions;
    let tip = 0;
    for (let v = 1; v < rest.length / 3; v++) {
      if (rest[3 * v] > rest[3 * tip]) tip = v;
    }
    const live = session.frame!.positions;
    const p0: [number, number, number] =
      [live[3 * tip], live[3 * tip + 1], live[3 * tip + 2]];
    const target: [number, number, number] = [p0[0], p0[1] + 0.3, p0[2]];
    const dist = (pos: Float32Array) => Math.hypot(
      pos[3 * tip] - target[0],
      pos[3 * tip + 1] - target[1],
      pos[3 * tip + 2] - target[2]);

    const id = session.startDrag(p0, target);

    // wait for the first frame where the pull is visible, then record 30
    const d0 = dist(session.frame!.positions);
    let lastStep = session.frame!.step;
    const dists: number[] = [];
    const done = await pump(session, () => {
      const f = session.frame!;
      if (f.step === lastStep) return false;
      lastStep = f.step;
      const d = dist(f.positions);
      if (dists.length === 0 && d > d0 - 1e-3) return false; // not engaged yet
      dists.push(d);
      return dists.length >= 30;
    }, 15_000);
    session.endDrag(id);
    expect(done, `only ${dists.length} frames observed`).toBe(true);

    for (let i = 1; i < dists.length; i++) {
      expect(dists[i], `frame ${i}: ${dists[i]} vs ${dists[i - 1]}`)
        .toBeLessThanOrEqual(dists[i - 1] + 1e-6);
    }
    expect(dists[29]).toBeLessThan(0.9 * dists[0]);
  }, 40_000);
});

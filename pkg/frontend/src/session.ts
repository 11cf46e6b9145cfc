/** Connection + simulation state for the viewer.
 *
 * Socket callbacks never touch the scene: they enqueue, and the render loop
 * calls tick() to apply whatever has arrived.  That keeps message handling
 * on one thread of control and makes the ordering rules testable without a
 * real socket or a real clock.
 */

import {
  decodeMessage, encodeMessage, frameData, meshData,
  FrameData, MeshData, ProtocolError,
} from './protocol.js';

export type Status = 'idle' | 'connecting' | 'connected' | 'error' | 'closed';

// minimal WebSocket surface, so tests can hand in a scripted fake
export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export const CONNECT_TIMEOUT_MS = 4000; // banner well inside the 5s budget
export const DRAG_MIN_INTERVAL_MS = 1000 / 30;
export const PIN_STIFFNESS = 100000;
export const DRAG_STIFFNESS = 20000;

interface ActiveDrag {
  id: number;
  lastSentAt: number;
  pending: [number, number, number] | null; // newest unsent target
}

export interface SessionEvents {
  meshChanged: boolean;  // topology (re)loaded, GPU buffers need an upload
  frameChanged: boolean;
  statusChanged: boolean;
}

export class Session {
  status: Status = 'idle';
  banner: string | null = null;
  mesh: MeshData | null = null;
  frame: FrameData | null = null;
  drags = new Map<number, ActiveDrag>();
  droppedFrames = 0; // stale or malformed, for the HUD

  private url = '';
  private sock: SocketLike | null = null;
  private inbox: string[] = [];
  private lastStep = -1;
  private nextDragId = 1;
  private connectDeadline = 0;
  private meshKey = '';
  private statusDirty = false;
  private now: () => number;
  private makeSocket: SocketFactory;
  private log: (msg: string) => void;
  private dragStiffness: number;

  constructor(opts?: {
    socketFactory?: SocketFactory;
    now?: () => number;
    log?: (msg: string) => void;
    dragStiffness?: number; // softer springs approach their target slower
  }) {
    this.makeSocket = opts?.socketFactory
      ?? ((url) => new WebSocket(url) as unknown as SocketLike);
    this.now = opts?.now ?? (() => performance.now());
    this.log = opts?.log ?? ((m) => console.warn(m));
    this.dragStiffness = opts?.dragStiffness ?? DRAG_STIFFNESS;
  }

  connect(url?: string): void {
    if (url) this.url = url;
    if (!this.url) throw new Error('no server url');
    this.closeSocket();
    this.setStatus('connecting');
    this.banner = null;
    this.connectDeadline = this.now() + CONNECT_TIMEOUT_MS;
    const sock = this.makeSocket(this.url);
    this.sock = sock;
    sock.onopen = () => {
      if (this.sock !== sock) return; // superseded by a newer connect
      this.connectDeadline = 0;
      this.setStatus('connected');
    };
    sock.onmessage = (ev) => {
      if (this.sock === sock && typeof ev.data === 'string') {
        this.inbox.push(ev.data);
      }
    };
    sock.onclose = () => {
      if (this.sock !== sock) return;
      this.sock = null;
      if (this.status === 'connecting') {
        this.fail('could not reach the server');
      } else {
        this.setStatus('closed');
        this.banner = 'connection closed';
      }
    };
    sock.onerror = () => {
      if (this.sock !== sock) return;
      if (this.status === 'connecting') this.fail('could not reach the server');
    };
  }

  /** Drain queued socket traffic and timers; called once per render tick. */
  tick(): SessionEvents {
    const ev: SessionEvents = {
      meshChanged: false, frameChanged: false, statusChanged: false,
    };
    if (this.connectDeadline && this.now() > this.connectDeadline) {
      this.connectDeadline = 0;
      this.closeSocket();
      this.fail('server did not answer in time');
    }
    const batch = this.inbox;
    this.inbox = [];
    for (const text of batch) this.applyIncoming(text, ev);
    this.flushDrags(false);
    if (this.statusDirty) {
      ev.statusChanged = true;
      this.statusDirty = false;
    }
    return ev;
  }

  private applyIncoming(text: string, ev: SessionEvents): void {
    let msg;
    try {
      msg = decodeMessage(text);
    } catch (e) {
      this.log(`dropped malformed message: ${(e as Error).message}`);
      this.droppedFrames++;
      return;
    }
    if (msg.type === 'mesh') {
      // reconnects replay the mesh; identical topology keeps the buffers
      const data = meshData(msg);
      const key = `${data.positions.length}/${data.faces.length}/`
        + data.faces.join(',');
      if (key !== this.meshKey) {
        this.mesh = data;
        this.meshKey = key;
        ev.meshChanged = true;
      }
    } else if (msg.type === 'frame') {
      if (this.mesh === null) {
        this.log('frame before mesh, dropped');
        this.droppedFrames++;
        return;
      }
      let frame;
      try {
        frame = frameData(msg);
        if (frame.positions.length !== this.mesh.positions.length) {
          throw new ProtocolError('frame positions do not match the mesh');
        }
      } catch (e) {
        this.log(`bad frame kept out of the scene: ${(e as Error).message}`);
        this.droppedFrames++;
        return;
      }
      if (frame.step <= this.lastStep) {
        this.droppedFrames++; // stale, never applied out of order
        return;
      }
      this.lastStep = frame.step;
      this.frame = frame;
      ev.frameChanged = true;
    } else if (msg.type === 'error') {
      this.log(`server: ${msg.detail}`);
      this.banner = String(msg.detail);
      this.statusDirty = true;
    } else {
      this.log(`unexpected ${msg.type} message from server`);
    }
  }

  // ---- user actions ------------------------------------------------

  pin(vertex: number, target: [number, number, number]): void {
    this.sendText(encodeMessage({
      type: 'pin', vertices: [vertex], target, stiffness: PIN_STIFFNESS,
    }));
  }

  /** Press: returns the drag id the caller keeps for move/release. */
  startDrag(point: [number, number, number],
            target: [number, number, number]): number {
    const id = this.nextDragId++;
    this.drags.set(id, { id, lastSentAt: this.now(), pending: null });
    this.sendText(encodeMessage({
      type: 'drag', point, target, stiffness: this.dragStiffness, id,
    }));
    return id;
  }

  moveDrag(id: number, target: [number, number, number]): void {
    const d = this.drags.get(id);
    if (!d) return;
    d.pending = target; // coalesce: only the newest target matters
    this.flushDrags(false);
  }

  endDrag(id: number): void {
    const d = this.drags.get(id);
    if (!d) return;
    if (d.pending) {
      // the final position always goes out, throttle or not
      this.sendDragTarget(d, d.pending);
    }
    this.drags.delete(id);
    this.sendText(encodeMessage({ type: 'release', id }));
  }

  reset(): void {
    this.drags.clear();
    this.lastStep = -1; // server restarts its step counter
    this.sendText(encodeMessage({ type: 'reset' }));
  }

  pause(): void { this.sendText(encodeMessage({ type: 'pause' })); }
  resume(): void { this.sendText(encodeMessage({ type: 'resume' })); }

  // ---- internals ---------------------------------------------------

  private flushDrags(force: boolean): void {
    const t = this.now();
    for (const d of this.drags.values()) {
      if (d.pending && (force || t - d.lastSentAt >= DRAG_MIN_INTERVAL_MS)) {
        this.sendDragTarget(d, d.pending);
      }
    }
  }

  private sendDragTarget(d: ActiveDrag, target: [number, number, number]): void {
    d.pending = null;
    d.lastSentAt = this.now();
    // move reuses the drag message; the server keys on the id
    this.sendText(encodeMessage({
      type: 'drag', point: target, target, stiffness: this.dragStiffness,
      id: d.id,
    }));
  }

  private sendText(text: string): void {
    if (this.sock && this.status === 'connected') {
      this.sock.send(text);
    } else {
      this.log('not connected, message dropped');
    }
  }

  private setStatus(s: Status): void {
    if (s !== this.status) {
      this.status = s;
      this.statusDirty = true;
    }
  }

  private fail(why: string): void {
    this.setStatus('error');
    this.banner = why;
    this.closeSocket();
  }

  private closeSocket(): void {
    if (this.sock) {
      const s = this.sock;
      this.sock = null;
      s.onopen = s.onmessage = s.onclose = s.onerror = null;
      try { s.close(); } catch { /* already gone */ }
    }
  }
}

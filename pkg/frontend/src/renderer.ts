/** WebGL2 mesh renderer with a small HUD.
 *
 * One dynamic vertex buffer holds the streamed positions; normals come from
 * screen-space derivatives in the fragment shader so per-frame updates are a
 * single bufferSubData.  Markers (pins, active drags) draw as point sprites.
 */

import { Camera, Vec3 } from './picking.js';

const VERT = `#version 300 es
uniform mat4 u_mvp;
in vec3 a_pos;
out vec3 v_world;
void main() {
  v_world = a_pos;
  gl_Position = u_mvp * vec4(a_pos, 1.0);
}`;

const FRAG = `#version 300 es
precision highp float;
uniform vec3 u_color;
uniform vec3 u_light;
in vec3 v_world;
out vec4 frag;
void main() {
  vec3 n = normalize(cross(dFdx(v_world), dFdy(v_world)));
  float d = abs(dot(n, normalize(u_light)));
  frag = vec4(u_color * (0.25 + 0.75 * d), 1.0);
}`;

const MARK_VERT = `#version 300 es
uniform mat4 u_mvp;
uniform float u_size;
in vec3 a_pos;
void main() {
  gl_Position = u_mvp * vec4(a_pos, 1.0);
  gl_PointSize = u_size;
}`;

const MARK_FRAG = `#version 300 es
precision highp float;
uniform vec3 u_color;
out vec4 frag;
void main() {
  vec2 c = gl_PointCoord * 2.0 - 1.0;
  if (dot(c, c) > 1.0) discard;
  frag = vec4(u_color, 1.0);
}`;

function compile(gl: WebGL2RenderingContext, kind: number, src: string): WebGLShader {
  const sh = gl.createShader(kind)!;
  gl.shaderSource(sh, src);
  gl.compileShader(sh);
  if (!gl.getShaderParameter(sh, gl.COMPILE_STATUS)) {
    throw new Error('shader: ' + gl.getShaderInfoLog(sh));
  }
  return sh;
}

function program(gl: WebGL2RenderingContext, vs: string, fs: string): WebGLProgram {
  const p = gl.createProgram()!;
  gl.attachShader(p, compile(gl, gl.VERTEX_SHADER, vs));
  gl.attachShader(p, compile(gl, gl.FRAGMENT_SHADER, fs));
  gl.linkProgram(p);
  if (!gl.getProgramParameter(p, gl.LINK_STATUS)) {
    throw new Error('link: ' + gl.getProgramInfoLog(p));
  }
  return p;
}

// column-major 4x4 helpers, just enough for one camera

function perspective(fovY: number, aspect: number, near: number, far: number): Float32Array {
  const f = 1 / Math.tan(fovY / 2);
  const out = new Float32Array(16);
  out[0] = f / aspect;
  out[5] = f;
  out[10] = (far + near) / (near - far);
  out[11] = -1;
  out[14] = (2 * far * near) / (near - far);
  return out;
}

function lookAt(eye: Vec3, target: Vec3, up: Vec3): Float32Array {
  const zx = eye[0] - target[0], zy = eye[1] - target[1], zz = eye[2] - target[2];
  let zl = Math.hypot(zx, zy, zz) || 1;
  const z = [zx / zl, zy / zl, zz / zl];
  const x = [
    up[1] * z[2] - up[2] * z[1],
    up[2] * z[0] - up[0] * z[2],
    up[0] * z[1] - up[1] * z[0],
  ];
  const xl = Math.hypot(x[0], x[1], x[2]) || 1;
  x[0] /= xl; x[1] /= xl; x[2] /= xl;
  const y = [
    z[1] * x[2] - z[2] * x[1],
    z[2] * x[0] - z[0] * x[2],
    z[0] * x[1] - z[1] * x[0],
  ];
  return new Float32Array([
    x[0], y[0], z[0], 0,
    x[1], y[1], z[1], 0,
    x[2], y[2], z[2], 0,
    -(x[0] * eye[0] + x[1] * eye[1] + x[2] * eye[2]),
    -(y[0] * eye[0] + y[1] * eye[1] + y[2] * eye[2]),
    -(z[0] * eye[0] + z[1] * eye[1] + z[2] * eye[2]),
    1,
  ]);
}

function mul4(a: Float32Array, b: Float32Array): Float32Array {
  const out = new Float32Array(16);
  for (let c = 0; c < 4; c++) {
    for (let r = 0; r < 4; r++) {
      out[c * 4 + r] =
        a[r] * b[c * 4] + a[4 + r] * b[c * 4 + 1] +
        a[8 + r] * b[c * 4 + 2] + a[12 + r] * b[c * 4 + 3];
    }
  }
  return out;
}

export class Renderer {
  camera: Camera;
  private gl: WebGL2RenderingContext;
  private meshProg: WebGLProgram;
  private markProg: WebGLProgram;
  private vao: WebGLVertexArrayObject;
  private posBuf: WebGLBuffer;
  private idxBuf: WebGLBuffer;
  private markVao: WebGLVertexArrayObject;
  private markBuf: WebGLBuffer;
  private indexCount = 0;
  private markCount = 0;
  private canvas: HTMLCanvasElement;

  constructor(canvas: HTMLCanvasElement) {
    const gl = canvas.getContext('webgl2');
    if (!gl) throw new Error('WebGL2 unavailable');
    this.gl = gl;
    this.canvas = canvas;
    this.meshProg = program(gl, VERT, FRAG);
    this.markProg = program(gl, MARK_VERT, MARK_FRAG);
    this.vao = gl.createVertexArray()!;
    this.posBuf = gl.createBuffer()!;
    this.idxBuf = gl.createBuffer()!;
    this.markVao = gl.createVertexArray()!;
    this.markBuf = gl.createBuffer()!;
    this.camera = {
      eye: [1.5, 1.2, 2.5], target: [0, 0, 0], up: [0, 1, 0],
      fovY: Math.PI / 4,
    };
    gl.enable(gl.DEPTH_TEST);
    gl.clearColor(0.08, 0.09, 0.11, 1);
  }

  /** Full topology upload; called once per mesh, not per frame. */
  uploadMesh(positions: Float32Array, faces: Uint32Array): void {
    const gl = this.gl;
    gl.bindVertexArray(this.vao);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.posBuf);
    gl.bufferData(gl.ARRAY_BUFFER, positions, gl.DYNAMIC_DRAW);
    gl.enableVertexAttribArray(0);
    gl.vertexAttribPointer(0, 3, gl.FLOAT, false, 0, 0);
    gl.bindBuffer(gl.ELEMENT_ARRAY_BUFFER, this.idxBuf);
    gl.bufferData(gl.ELEMENT_ARRAY_BUFFER, faces, gl.STATIC_DRAW);
    gl.bindVertexArray(null);
    this.indexCount = faces.length;
    this.frameCamera(positions);
  }

  /** Per-frame position update, topology untouched. */
  updatePositions(positions: Float32Array): void {
    const gl = this.gl;
    gl.bindBuffer(gl.ARRAY_BUFFER, this.posBuf);
    gl.bufferSubData(gl.ARRAY_BUFFER, 0, positions);
  }

  setMarkers(points: Vec3[]): void {
    const gl = this.gl;
    const flat = new Float32Array(points.length * 3);
    points.forEach((p, i) => flat.set(p, i * 3));
    gl.bindVertexArray(this.markVao);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.markBuf);
    gl.bufferData(gl.ARRAY_BUFFER, flat, gl.DYNAMIC_DRAW);
    gl.enableVertexAttribArray(0);
    gl.vertexAttribPointer(0, 3, gl.FLOAT, false, 0, 0);
    gl.bindVertexArray(null);
    this.markCount = points.length;
  }

  draw(): void {
    const gl = this.gl;
    const w = this.canvas.clientWidth || this.canvas.width;
    const h = this.canvas.clientHeight || this.canvas.height;
    if (this.canvas.width !== w || this.canvas.height !== h) {
      this.canvas.width = w;
      this.canvas.height = h;
    }
    gl.viewport(0, 0, w, h);
    gl.clear(gl.COLOR_BUFFER_BIT | gl.DEPTH_BUFFER_BIT);
    if (!this.indexCount) return;

    const mvp = mul4(
      perspective(this.camera.fovY, w / h, 0.01, 100),
      lookAt(this.camera.eye, this.camera.target, this.camera.up));

    gl.useProgram(this.meshProg);
    gl.uniformMatrix4fv(gl.getUniformLocation(this.meshProg, 'u_mvp'), false, mvp);
    gl.uniform3f(gl.getUniformLocation(this.meshProg, 'u_color'), 0.55, 0.66, 0.82);
    gl.uniform3f(gl.getUniformLocation(this.meshProg, 'u_light'), 0.4, 0.8, 0.5);
    gl.bindVertexArray(this.vao);
    gl.drawElements(gl.TRIANGLES, this.indexCount, gl.UNSIGNED_INT, 0);

    if (this.markCount) {
      gl.useProgram(this.markProg);
      gl.uniformMatrix4fv(gl.getUniformLocation(this.markProg, 'u_mvp'), false, mvp);
      gl.uniform3f(gl.getUniformLocation(this.markProg, 'u_color'), 0.95, 0.45, 0.25);
      gl.uniform1f(gl.getUniformLocation(this.markProg, 'u_size'), 12);
      gl.bindVertexArray(this.markVao);
      gl.drawArrays(gl.POINTS, 0, this.markCount);
    }
    gl.bindVertexArray(null);
  }

  /** Fit the orbit camera to the mesh bounds, keeping the view direction. */
  private frameCamera(positions: Float32Array): void {
    const lo: Vec3 = [Infinity, Infinity, Infinity];
    const hi: Vec3 = [-Infinity, -Infinity, -Infinity];
    for (let i = 0; i < positions.length; i += 3) {
      for (let k = 0; k < 3; k++) {
        lo[k] = Math.min(lo[k], positions[i + k]);
        hi[k] = Math.max(hi[k], positions[i + k]);
      }
    }
    const center: Vec3 = [
      (lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2,
    ];
    const radius = Math.max(
      Math.hypot(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]) / 2, 1e-3);
    const dist = radius / Math.tan(this.camera.fovY / 2) * 1.4;
    this.camera.target = center;
    this.camera.eye = [
      center[0] + dist * 0.55,
      center[1] + dist * 0.45,
      center[2] + dist * 0.75,
    ];
  }

  orbit(dx: number, dy: number): void {
    const c = this.camera;
    const off: Vec3 = [
      c.eye[0] - c.target[0], c.eye[1] - c.target[1], c.eye[2] - c.target[2],
    ];
    const r = Math.hypot(off[0], off[1], off[2]);
    let theta = Math.atan2(off[0], off[2]) - dx * 0.008;
    let phi = Math.acos(Math.min(1, Math.max(-1, off[1] / r))) + dy * 0.008;
    phi = Math.min(Math.PI - 0.05, Math.max(0.05, phi));
    c.eye = [
      c.target[0] + r * Math.sin(phi) * Math.sin(theta),
      c.target[1] + r * Math.cos(phi),
      c.target[2] + r * Math.sin(phi) * Math.cos(theta),
    ];
  }

  zoom(factor: number): void {
    const c = this.camera;
    for (let k = 0; k < 3; k++) {
      c.eye[k] = c.target[k] + (c.eye[k] - c.target[k]) * factor;
    }
  }
}

/** The step / timing / objective readout in the corner. */
export class Hud {
  private el: HTMLElement;

  constructor(el: HTMLElement) {
    this.el = el;
  }

  show(step: number, ms: number, objective: number, dropped: number): void {
    let text = `step ${step}   ${ms.toFixed(1)} ms/step   `
      + `objective ${objective.toExponential(3)}`;
    if (dropped) text += `   (${dropped} dropped)`;
    this.el.textContent = text;
  }

  message(text: string): void {
    this.el.textContent = text;
  }
}

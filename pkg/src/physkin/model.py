"""Neural skinning field: encoder, handle latents, point decoder, ONI layer.

The network maps a query point X to a signed weight vector W(X) in R^m:

    shape latents   F_s = SelfAttn^L( CrossAttn(Q_s, features(P)) )
    handle latents  F_h = CrossAttn(Q_h, SelfAttn(F_s))
    point feature   F_p = CrossAttn(gamma(X), F_h)
    weights         W(X) = MLP(F_p ++ gamma(X)) through an ONI-orthogonalized
                    final linear layer.

In per-object mode F_h is a learnable m x d parameter and the encoder path
is bypassed entirely.

Every forward runs on a Tape (see tensor.py); parameters live in an ordered
dict so the flat vector, the optimizer state, and the checkpoint layout all
agree on one manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T

CHECKPOINT_MAGIC = b"PSKN"
CHECKPOINT_VERSION = 1
FD_STEP_SPATIAL = 1e-4


@dataclass(frozen=True)
class ModelDims:
    m: int = 8            # handle count
    M: int = 16           # shape latent count
    d: int = 64           # latent width
    L_enc: int = 2        # encoder self-attention depth
    L_pe: int = 6         # positional encoding frequencies
    d_h: int = 64         # decoder hidden width
    mlp_depth: int = 3    # decoder residual blocks
    heads: int = 4

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least 2 handles")
        if self.d % self.heads != 0:
            raise ValueError(f"latent width {self.d} not divisible by {self.heads} heads")
        if self.d_h < self.m:
            raise ValueError("decoder hidden width must be >= handle count")

    @property
    def pe_len(self) -> int:
        return 3 + 6 * self.L_pe

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return ModelDims(**d)


def positional_encoding(X, L_pe: int):
    """[n,3] -> [n, 3 + 6 L_pe]: X ++ sin(2^k pi X) ++ cos(2^k pi X), k < L_pe."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[-1] != 3:
        raise ValueError(f"positional_encoding expects 3-vectors, got {X.shape}")
    parts = [X]
    for k in range(L_pe):
        w = (2.0 ** k) * np.pi
        parts.append(np.sin(w * X))
        parts.append(np.cos(w * X))
    out = np.concatenate(parts, axis=-1)
    return out[0] if single else out


@dataclass
class FieldEval:
    points: np.ndarray               # [n,3]
    weights: np.ndarray              # [n,m]
    gradients: np.ndarray | None     # [n,m,3] or None

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise FloatingPointError("non-finite weights in field evaluation")
        if self.gradients is not None and not np.all(np.isfinite(self.gradients)):
            raise FloatingPointError("non-finite gradients in field evaluation")


def _glorot(rng, fan_in, fan_out, shape=None):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out) if shape is None else shape)


class SkinningNet:
    """Parameter container plus tape-forward definitions.

    ``params`` is an ordered name -> float64 array dict; ``manifest`` fixes
    the flattening and checkpoint order.  Forward methods take the dict of
    tape leaves produced by ``leaves`` so one stored parameter set can
    drive many tapes.
    """

    def __init__(self, dims: ModelDims, per_object: bool = True, seed: int = 0):
        self.dims = dims
        self.per_object = bool(per_object)
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # ---- parameters ------------------------------------------------

    def _add(self, name, arr):
        self.params[name] = np.asarray(arr, dtype=np.float64)

    def _init_attention(self, rng, prefix, d_q_in, d_kv_in, d_out):
        dims = self.dims
        dh = d_out // dims.heads
        self._add(f"{prefix}.lnq.g", np.ones(d_q_in))
        self._add(f"{prefix}.lnq.b", np.zeros(d_q_in))
        if d_kv_in != 0:   # 0 marks self-attention (shared normalization)
            self._add(f"{prefix}.lnkv.g", np.ones(d_kv_in))
            self._add(f"{prefix}.lnkv.b", np.zeros(d_kv_in))
        kv = d_kv_in if d_kv_in != 0 else d_q_in
        for h in range(dims.heads):
            self._add(f"{prefix}.wq{h}", _glorot(rng, d_q_in, dh))
            self._add(f"{prefix}.wk{h}", _glorot(rng, kv, dh))
            self._add(f"{prefix}.wv{h}", _glorot(rng, kv, dh))
        self._add(f"{prefix}.wo", _glorot(rng, d_out, d_out))
        self._add(f"{prefix}.bo", np.zeros(d_out))
        self._add(f"{prefix}.lnf.g", np.ones(d_out))
        self._add(f"{prefix}.lnf.b", np.zeros(d_out))
        self._add(f"{prefix}.w1", _glorot(rng, d_out, 2 * d_out))
        self._add(f"{prefix}.b1", np.zeros(2 * d_out))
        self._add(f"{prefix}.w2", _glorot(rng, 2 * d_out, d_out))
        self._add(f"{prefix}.b2", np.zeros(d_out))

    def _init_params(self, rng):
        dims = self.dims
        pe = dims.pe_len
        if self.per_object:
            self._add("Fh", rng.normal(0.0, 0.02, (dims.m, dims.d)))
        else:
            self._add("enc.Qs", rng.normal(0.0, 0.02, (dims.M, dims.d)))
            self._init_attention(rng, "enc.cross", dims.d, pe + 3, dims.d)
            for i in range(dims.L_enc):
                self._init_attention(rng, f"enc.self{i}", dims.d, 0, dims.d)
            self._init_attention(rng, "hnd.self", dims.d, 0, dims.d)
            self._add("hnd.Qh", rng.normal(0.0, 0.02, (dims.m, dims.d)))
            self._init_attention(rng, "hnd.cross", dims.d, dims.d, dims.d)
        self._init_attention(rng, "pt.cross", pe, dims.d, dims.d)
        self._add("dec.win", _glorot(rng, dims.d + pe, dims.d_h))
        # damp high positional-encoding octaves at init (2^-k per octave) so
        # the initial field is spatially smooth; training re-amplifies bands
        # as needed.  Without this the first few hundred iterations are spent
        # just taming an oscillatory random field.
        att = np.ones(pe)
        for k in range(dims.L_pe):
            att[3 + 6 * k: 3 + 6 * (k + 1)] = 2.0 ** (-k)
        for h in range(dims.heads):
            self.params[f"pt.cross.wq{h}"] *= att[:, None]
        self.params["dec.win"][dims.d:] *= att[:, None]
        self._add("dec.bin", np.zeros(dims.d_h))
        for i in range(dims.mlp_depth):
            self._add(f"dec.blk{i}.w1", _glorot(rng, dims.d_h, dims.d_h))
            self._add(f"dec.blk{i}.b1", np.zeros(dims.d_h))
            self._add(f"dec.blk{i}.w2", _glorot(rng, dims.d_h, dims.d_h))
            self._add(f"dec.blk{i}.b2", np.zeros(dims.d_h))
        self._add("dec.V", _glorot(rng, dims.d_h, dims.m, shape=(dims.m, dims.d_h)))

    @property
    def manifest(self):
        return [(name, arr.shape) for name, arr in self.params.items()]

    @property
    def param_count(self):
        return sum(arr.size for arr in self.params.values())

    def flat(self):
        return np.concatenate([a.ravel() for a in self.params.values()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.param_count:
            raise ValueError(f"flat vector has {vec.size} entries, expected {self.param_count}")
        off = 0
        for name, arr in self.params.items():
            n = arr.size
            self.params[name] = vec[off:off + n].reshape(arr.shape).copy()
            off += n

    def leaves(self, tape):
        return {name: tape.leaf(arr) for name, arr in self.params.items()}

    def grads_flat(self, tape, grads, leaves):
        out = np.empty(self.param_count)
        off = 0
        for name, arr in self.params.items():
            n = arr.size
            out[off:off + n] = tape.grad(grads, leaves[name]).ravel()
            off += n
        return out

    # ---- forward ---------------------------------------------------

    def _attention(self, L, prefix, xq, xkv=None):
        """Pre-LN scaled dot-product attention block with feed-forward.

        xkv=None means self-attention (keys/values share the query stream
        and its normalization).  A residual on the query stream is applied
        when input and output widths agree.
        """
        dims = self.dims
        dh = dims.d // dims.heads
        nq = T.layer_norm(xq, L[f"{prefix}.lnq.g"], L[f"{prefix}.lnq.b"])
        if xkv is None:
            nkv = nq
        else:
            nkv = T.layer_norm(xkv, L[f"{prefix}.lnkv.g"], L[f"{prefix}.lnkv.b"])
        heads = []
        inv_sqrt = 1.0 / np.sqrt(dh)
        for h in range(dims.heads):
            q = T.matmul(nq, L[f"{prefix}.wq{h}"])
            k = T.matmul(nkv, L[f"{prefix}.wk{h}"])
            v = T.matmul(nkv, L[f"{prefix}.wv{h}"])
            att = T.softmax_last(T.scale(T.matmul(q, T.transpose(k)), inv_sqrt))
            heads.append(T.matmul(att, v))
        out = T.add_bias(T.matmul(T.concat_last(heads), L[f"{prefix}.wo"]), L[f"{prefix}.bo"])
        if xq.data.shape[-1] == dims.d:
            out = T.add(out, xq)
        f = T.layer_norm(out, L[f"{prefix}.lnf.g"], L[f"{prefix}.lnf.b"])
        f = T.elu(T.add_bias(T.matmul(f, L[f"{prefix}.w1"]), L[f"{prefix}.b1"]))
        f = T.add_bias(T.matmul(f, L[f"{prefix}.w2"]), L[f"{prefix}.b2"])
        return T.add(out, f)

    def encode_shape(self, L, P):
        """Surface points+normals [N,6] -> shape latents F_s [M,d]."""
        if self.per_object:
            raise RuntimeError("encode_shape is bypassed in per-object mode")
        P = np.asarray(P, dtype=np.float64)
        if P.ndim != 2 or P.shape[1] != 6:
            raise ValueError(f"encode_shape expects [N,6] points+normals, got {P.shape}")
        if P.shape[0] < self.dims.M:
            raise ValueError(f"need at least M={self.dims.M} input points, got {P.shape[0]}")
        feat = np.concatenate([positional_encoding(P[:, :3], self.dims.L_pe), P[:, 3:]], axis=1)
        x = self._attention(L, "enc.cross", L["enc.Qs"], T.constant(feat))
        for i in range(self.dims.L_enc):
            x = self._attention(L, f"enc.self{i}", x)
        return x

    def handle_latents(self, L, F_s):
        """Shape latents -> handle latents F_h [m,d]."""
        if self.per_object:
            raise RuntimeError("handle_latents is bypassed in per-object mode")
        x = self._attention(L, "hnd.self", F_s)
        return self._attention(L, "hnd.cross", L["hnd.Qh"], x)

    def handle_root(self, L, P=None):
        """The F_h tensor this net decodes from (mode-dependent)."""
        if self.per_object:
            return L["Fh"]
        if P is None:
            raise ValueError("full mode requires surface points to encode")
        return self.handle_latents(L, self.encode_shape(L, P))

    def oni(self, L):
        """Orthogonalized final layer ONI(V), computed once per tape."""
        return oni_orthogonalize(L["dec.V"])

    def point_features(self, L, X, F_h):
        """Query points [n,3] -> point features [n,d] via cross-attention."""
        X = np.asarray(X, dtype=np.float64)
        gamma = positional_encoding(X, self.dims.L_pe)
        return self._attention(L, "pt.cross", T.constant(gamma), F_h), gamma

    def decode(self, L, F_p, gamma, W_layer):
        """Point features ++ gamma -> signed weights [n,m]."""
        h = T.concat_last([F_p, T.constant(gamma)])
        h = T.elu(T.add_bias(T.matmul(h, L["dec.win"]), L["dec.bin"]))
        for i in range(self.dims.mlp_depth):
            f = T.elu(T.add_bias(T.matmul(h, L[f"dec.blk{i}.w1"]), L[f"dec.blk{i}.b1"]))
            f = T.add_bias(T.matmul(f, L[f"dec.blk{i}.w2"]), L[f"dec.blk{i}.b2"])
            h = T.add(h, f)
        return T.matmul(h, T.transpose(W_layer))

    def weights_at(self, L, X, F_h, W_layer=None):
        if W_layer is None:
            W_layer = self.oni(L)
        F_p, gamma = self.point_features(L, X, F_h)
        return self.decode(L, F_p, gamma, W_layer)


def oni_orthogonalize(V):
    """Orthogonalization by Newton's iteration, differentiable throughout.

    V' = V/||V||_F, S = V'V'^T, B_0 = I, B_{k+1} = (3 B_k - B_k^3 S)/2 for
    T=8 iterations; the result B_T V' is rescaled by sqrt(m)/||B_T V'||_F
    so rows have unit norm on average.  Rank-deficient input (smallest
    singular value below 1e-8 of the largest) is rejected.
    """
    m, d_h = V.data.shape
    if m > d_h:
        raise ValueError(f"ONI needs m <= d_h, got {V.data.shape}")
    sv = np.sqrt(np.maximum(np.linalg.eigvalsh(V.data @ V.data.T), 0.0))
    if sv[0] < 1e-8 * sv[-1]:
        raise ValueError("ONI input is rank deficient "
                         f"(sigma_min/sigma_max = {sv[0] / max(sv[-1], 1e-300):.2e})")
    fro = T.sqrt(T.sum_all(T.square(V)))
    Vn = T.scale(V, T.reciprocal(fro))
    S = T.matmul(Vn, T.transpose(Vn))
    # first Newton step from B_0 = I collapses to (3I - S)/2
    B = T.scale(T.sub(T.constant(3.0 * np.eye(m)), S), 0.5)
    for _ in range(7):
        B3 = T.matmul(T.matmul(B, B), B)
        B = T.scale(T.sub(T.scale(B, 3.0), T.matmul(B3, S)), 0.5)
    W = T.matmul(B, Vn)
    wfro = T.sqrt(T.sum_all(T.square(W)))
    return T.scale(T.scale(W, T.reciprocal(wfro)), float(np.sqrt(m)))


def eval_field(net: SkinningNet, points, surface=None, with_grads=False,
               h_fd=FD_STEP_SPATIAL) -> FieldEval:
    """Frozen-parameter field evaluation (optionally with FD gradients).

    Gradients use a central difference stencil of 6 extra evaluations per
    point, batched into a single forward pass.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        return FieldEval(points, np.zeros((0, net.dims.m)),
                         np.zeros((0, net.dims.m, 3)) if with_grads else None)
    tape = T.Tape()
    L = net.leaves(tape)
    F_h = net.handle_root(L, surface)
    W_layer = net.oni(L)
    if not with_grads:
        w = net.weights_at(L, points, F_h, W_layer)
        return FieldEval(points, w.data.copy(), None)
    stack = stencil_points(points, h_fd)
    w = net.weights_at(L, stack, F_h, W_layer)
    weights, grads = stencil_combine_data(w.data, n, h_fd)
    return FieldEval(points, weights, grads)


def stencil_points(points, h_fd=FD_STEP_SPATIAL):
    """[n,3] -> [7n,3] stack: center, then +/- h along each axis."""
    n = len(points)
    stack = [points]
    for a in range(3):
        e = np.zeros(3)
        e[a] = h_fd
        stack.append(points + e)
        stack.append(points - e)
    return np.concatenate(stack, axis=0)


def stencil_combine_data(w_stack, n, h_fd=FD_STEP_SPATIAL):
    """Split a [7n,m] stencil evaluation into weights [n,m] and grads [n,m,3]."""
    m = w_stack.shape[1]
    weights = w_stack[:n].copy()
    grads = np.empty((n, m, 3))
    for a in range(3):
        plus = w_stack[(1 + 2 * a) * n:(2 + 2 * a) * n]
        minus = w_stack[(2 + 2 * a) * n:(3 + 2 * a) * n]
        grads[:, :, a] = (plus - minus) / (2.0 * h_fd)
    return weights, grads


# ---- checkpoint format ---------------------------------------------


def save_checkpoint(path, net: SkinningNet, normalization=None, extra=None):
    """magic 'PSKN' | version u32 LE | header length u32 LE | JSON header |
    parameters as float32 LE in manifest order."""
    header = {
        "dims": net.dims.to_dict(),
        "per_object": net.per_object,
        "manifest": [[name, list(shape)] for name, shape in net.manifest],
        "normalization": normalization,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in net.params.values():
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (net, header).  Raises on bad magic, version, or truncation."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        version, = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        hlen, = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        net = SkinningNet(ModelDims.from_dict(header["dims"]),
                          per_object=header["per_object"])
        expected = [[name, list(shape)] for name, shape in net.manifest]
        if expected != header["manifest"]:
            raise ValueError(f"{path}: parameter manifest does not match ModelDims")
        for name, arr in net.params.items():
            raw = fh.read(arr.size * 4)
            if len(raw) != arr.size * 4:
                raise ValueError(f"{path}: truncated at parameter {name}")
            net.params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(arr.shape)
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after parameters")
    return net, header

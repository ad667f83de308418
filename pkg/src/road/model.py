"""The octree latent network and its fusion modes.

One sine encoder maps a latent to a hidden state. From that hidden state a
*children* head regresses eight child latents (latent subdivision) and a
*surface* head predicts occupancy logits, a normalized signed distance and a
unit normal for the latent's own cell. With ``head_layout="split"`` the
surface outputs come from three separate heads instead of one.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass

import numpy as np

from road.diffcore import ParamStore, Tape, Tensor
from road.errors import ConfigError, InferenceError
from road.geometry import VoxelKey

OMEGA0 = 30.0
FUSIONS = ("direct", "add", "concat")
HEAD_LAYOUTS = ("shared", "split")
CONCAT_MAX_LOD = 6
OCCUPIED = 1  # column of the occupancy logits that means "occupied"


@dataclass
class NodeEval:
    children: np.ndarray  # (B, 8, child_dim)
    occ_logits: np.ndarray  # (B, 2)
    occ_prob: np.ndarray  # (B,)
    sdf: np.ndarray  # (B,)
    normal: np.ndarray  # (B, 3)


class RoadModel:
    def __init__(
        self,
        latent_dim: int,
        max_lod: int,
        hidden: int = 512,
        fusion: str = "direct",
        head_layout: str = "shared",
        omega0: float = OMEGA0,
        concat_max_lod: int = CONCAT_MAX_LOD,
        seed: int = 0,
        dtype=np.float32,
        init: bool = True,
    ):
        if latent_dim <= 0 or hidden <= 0:
            raise ConfigError("latent_dim and hidden must be positive")
        if fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
        if head_layout not in HEAD_LAYOUTS:
            raise ConfigError(f"head_layout must be one of {HEAD_LAYOUTS}, got {head_layout!r}")
        if max_lod < 0:
            raise ConfigError("max_lod must be non-negative")
        if fusion == "concat" and max_lod > concat_max_lod:
            raise ConfigError(f"concat fusion supports max_lod <= {concat_max_lod}, got {max_lod}")
        self.latent_dim = latent_dim
        self.max_lod = max_lod
        self.hidden = hidden
        self.fusion = fusion
        self.head_layout = head_layout
        self.omega0 = float(omega0)
        self.concat_max_lod = concat_max_lod
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self.codebook: dict[str, Tensor] = {}
        if init:
            self._init_params(np.random.default_rng(seed))

    # -- construction -----------------------------------------------------

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in archive (manifest) order."""
        D, H = self.latent_dim, self.hidden
        out = []
        if self.fusion == "concat":
            for m in range(self.max_lod + 1):
                out += [(f"encoder.{m}.W", (self.latent_dim_at(m), H)), (f"encoder.{m}.b", (H,))]
        else:
            out += [("encoder.W", (D, H)), ("encoder.b", (H,))]
        heads = [("children", 8 * D)]
        if self.head_layout == "shared":
            heads.append(("surface", 6))
        else:
            heads += [("occ", 2), ("sdf", 1), ("normal", 3)]
        for name, width in heads:
            out += [(f"{name}.0.W", (H, H)), (f"{name}.0.b", (H,)), (f"{name}.1.W", (H, width)), (f"{name}.1.b", (width,))]
        return out

    def _init_params(self, rng: np.random.Generator) -> None:
        for name, shape in self.layer_shapes():
            fan_in = shape[0] if len(shape) == 2 else None
            if name.endswith(".W"):
                if name.startswith("encoder"):
                    bound = 1.0 / fan_in
                else:
                    bound = np.sqrt(6.0 / fan_in) / self.omega0
                value = rng.uniform(-bound, bound, size=shape)
            else:
                w_shape = dict(self.layer_shapes())[name[:-2] + ".W"]
                bound = 1.0 / np.sqrt(w_shape[0])
                value = rng.uniform(-bound, bound, size=shape)
            self.params.add(name, value.astype(self.dtype))

    def config(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "max_lod": self.max_lod,
            "hidden": self.hidden,
            "fusion": self.fusion,
            "head_layout": self.head_layout,
            "omega0": self.omega0,
            "concat_max_lod": self.concat_max_lod,
        }

    def latent_dim_at(self, lod: int) -> int:
        if self.fusion == "concat":
            return (lod + 1) * self.latent_dim
        return self.latent_dim

    def astype(self, dtype) -> "RoadModel":
        """Copy of the model (weights and codebook) in another float precision."""
        other = RoadModel(**self.config(), dtype=dtype, init=False)
        for name, t in self.params.params.items():
            other.params.add(name, t.data.astype(dtype))
        for sid, z in self.codebook.items():
            other.codebook[sid] = Tensor(z.data.astype(dtype), requires_grad=True, name=f"latent/{sid}")
        return other

    # -- codebook ---------------------------------------------------------

    def set_latent(self, shape_id: str, values) -> None:
        values = np.asarray(values, dtype=self.dtype).reshape(-1)
        if values.shape != (self.latent_dim,):
            raise ConfigError(f"latent for {shape_id!r} must have {self.latent_dim} entries")
        if not np.all(np.isfinite(values)):
            raise ConfigError(f"latent for {shape_id!r} is not finite")
        self.codebook[shape_id] = Tensor(values.copy(), requires_grad=True, name=f"latent/{shape_id}")

    def latent(self, shape_id: str) -> np.ndarray:
        try:
            return self.codebook[shape_id].data
        except KeyError:
            known = ", ".join(sorted(self.codebook)) or "<empty>"
            raise ConfigError(f"unknown shape id {shape_id!r}; known ids: {known}") from None

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, _ in self.layer_shapes():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    @contextlib.contextmanager
    def frozen(self):
        """Stop gradients from reaching the network weights inside the block."""
        flags = {n: t.requires_grad for n, t in self.params.params.items()}
        for t in self.params.params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for n, t in self.params.params.items():
                t.requires_grad = flags[n]

    # -- network pieces (all take a tape) -----------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def encode(self, tape: Tape, z: Tensor, lod: int) -> Tensor:
        if self.fusion == "concat":
            if lod > self.max_lod:
                raise ConfigError(f"concat model has no encoder for lod {lod} (max {self.max_lod})")
            W, b = self._p(f"encoder.{lod}.W"), self._p(f"encoder.{lod}.b")
        else:
            W, b = self._p("encoder.W"), self._p("encoder.b")
        if z.shape[1] != W.shape[0]:
            raise ConfigError(f"latent width {z.shape[1]} does not match encoder input {W.shape[0]} at lod {lod}")
        return tape.sine(tape.linear(z, W, b), self.omega0)

    def _head(self, tape: Tape, h: Tensor, name: str) -> Tensor:
        hid = tape.sine(tape.linear(h, self._p(f"{name}.0.W"), self._p(f"{name}.0.b")), self.omega0)
        return tape.linear(hid, self._p(f"{name}.1.W"), self._p(f"{name}.1.b"))

    def occupancy_logits(self, tape: Tape, h: Tensor) -> Tensor:
        if self.head_layout == "shared":
            return tape.slice_cols(self._head(tape, h, "surface"), 0, 2)
        return self._head(tape, h, "occ")

    def surface(self, tape: Tape, h: Tensor, rows: np.ndarray | None = None):
        """Occupancy logits for every row; SDF and normal for ``rows`` (all if None)."""
        if self.head_layout == "shared":
            out = self._head(tape, h, "surface")
            logits = tape.slice_cols(out, 0, 2)
            geo = out if rows is None else tape.gather_rows(out, rows, unique=True)
            s = tape.tanh(tape.slice_cols(geo, 2, 3))
            n = tape.normalize(tape.slice_cols(geo, 3, 6))
            return logits, s, n
        logits = self._head(tape, h, "occ")
        hs = h if rows is None else tape.gather_rows(h, rows, unique=True)
        s = tape.tanh(self._head(tape, hs, "sdf"))
        n = tape.normalize(self._head(tape, hs, "normal"))
        return logits, s, n

    def children(self, tape: Tape, z: Tensor, h: Tensor, lod: int) -> Tensor:
        """Child latents of rows (z, h) at ``lod``: (B*8, child_dim), child-major per parent."""
        if self.fusion == "concat" and lod + 1 > self.max_lod:
            raise ConfigError(f"concat model cannot subdivide beyond lod {self.max_lod}")
        reg = tape.reshape(self._head(tape, h, "children"), (h.shape[0] * 8, self.latent_dim))
        if self.fusion == "direct":
            return reg
        parent = tape.repeat_rows(z, 8)
        if self.fusion == "add":
            return tape.add(parent, reg)
        return tape.concat(parent, reg)

    # -- convenience entry points ------------------------------------------

    def _as_batch(self, z) -> Tensor:
        if isinstance(z, Tensor):
            return z if z.data.ndim == 2 else Tensor(z.data[None], z.requires_grad)
        arr = np.asarray(z, dtype=self.dtype)
        return Tensor(arr[None] if arr.ndim == 1 else arr)

    def forward(self, z, lod: int, tape: Tape | None = None) -> NodeEval:
        """Both subdivision and surface decoding of latent(s) ``z`` at ``lod``."""
        if lod > self.max_lod:
            raise ConfigError(f"lod {lod} exceeds model max_lod {self.max_lod}")
        tape = tape or Tape(record=False)
        zt = self._as_batch(z)
        h = self.encode(tape, zt, lod)
        logits, s, n = self.surface(tape, h)
        if self.fusion == "concat" and lod >= self.max_lod:
            kids = np.zeros((zt.shape[0], 8, 0), dtype=self.dtype)
        else:
            kids = self.children(tape, zt, h, lod).data.reshape(zt.shape[0], 8, -1)
        prob = _softmax2(logits.data)[:, OCCUPIED]
        out = NodeEval(kids, logits.data, prob, s.data[:, 0], n.data)
        if not (np.all(np.isfinite(out.occ_logits)) and np.all(np.isfinite(out.sdf)) and np.all(np.isfinite(out.children))):
            raise InferenceError(f"non-finite network output at lod {lod}")
        return out

    def subdivide(self, z, lod: int, tape: Tape | None = None) -> np.ndarray:
        """The eight child latents of ``z`` at ``lod``: (B, 8, child_dim)."""
        tape = tape or Tape(record=False)
        zt = self._as_batch(z)
        h = self.encode(tape, zt, lod)
        return self.children(tape, zt, h, lod).data.reshape(zt.shape[0], 8, -1)


def _softmax2(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def child_key(parent: VoxelKey, i: int) -> VoxelKey:
    return parent.child(i)


def storage_bytes(model: RoadModel) -> int:
    """Exact size in bytes of the serialized model archive."""
    from road.formats import serialize_model

    return len(serialize_model(model))

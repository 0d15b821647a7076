"""Down-scalable RNN transducer: stacked-frame LSTM encoder with projection,
label-sequence LSTM encoder, and a single-hidden-layer joint network.

Layer indexing is 0-based. `mid_stack_layer` counts the encoder layers that
run before the mid-network frame stack, i.e. it is the index of the first
layer that consumes stacked (stride * proj wide) frames. The full-scale
config puts it at 2, which is what makes layer 2 the 17M-parameter layer in
the published per-part counts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (add, add_rows, apply_op, leaf, log_softmax, matmul, mul,
                       outer_add, reshape, row, sigmoid, stack, stack_frames, tanh)
from .rnnt_loss import rnnt_loss_node
from .tensor import DTYPES, Tensor

CHECKPOINT_MAGIC = b"ODPCKPT1"
_DTYPE_CODES = {"f32": 0, "f64": 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 240          # feature dim after input stacking
    enc_layers: int = 8
    lm_layers: int = 2
    lstm_hidden: int = 2048
    lstm_proj: int = 640
    mid_stack_layer: int = 2      # layers run before the mid-network stack
    mid_stack_stride: int = 2     # 1 disables the mid-network stack
    vocab: int = 75               # graphemes; output dim is vocab+1 (blank last)
    joint_hidden: int = 640
    input_stack: int = 3
    input_stack_stride: int = 3

    def __post_init__(self):
        ints = asdict(self)
        for name, v in ints.items():
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive int, got {v!r}")
        if not 1 <= self.mid_stack_layer < self.enc_layers:
            raise ValueError("mid_stack_layer must lie strictly inside the encoder stack")
        if self.input_dim % self.input_stack != 0:
            raise ValueError("input_dim must be divisible by input_stack")

    @property
    def blank(self) -> int:
        return self.vocab

    @property
    def n_outputs(self) -> int:
        return self.vocab + 1

    @property
    def raw_feature_dim(self) -> int:
        return self.input_dim // self.input_stack

    def enc_input_dim(self, layer: int) -> int:
        if layer == 0:
            return self.input_dim
        if layer == self.mid_stack_layer and self.mid_stack_stride > 1:
            return self.mid_stack_stride * self.lstm_proj
        return self.lstm_proj

    def lm_input_dim(self, layer: int) -> int:
        return self.n_outputs if layer == 0 else self.lstm_proj

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(input_dim=12, enc_layers=4, lm_layers=2, lstm_hidden=32,
                   lstm_proj=16, mid_stack_layer=2, mid_stack_stride=2, vocab=8,
                   joint_hidden=16)

    @classmethod
    def tiny_wide(cls) -> "ModelConfig":
        return cls(input_dim=24, enc_layers=8, lm_layers=2, lstm_hidden=64,
                   lstm_proj=32, mid_stack_layer=2, mid_stack_stride=2, vocab=16,
                   joint_hidden=32)


PRESETS = {
    "paper": ModelConfig.paper_scale,
    "tiny": ModelConfig.tiny,
    "tiny-wide": ModelConfig.tiny_wide,
}


# --- parameter groups ---------------------------------------------------------


@dataclass(frozen=True)
class ParamGroup:
    name: str
    param_names: tuple[str, ...]


def _normalize_group(name: str) -> str:
    return name.replace("–", "-").replace("..", "-").strip()


def _parse_group(name: str, enc_layers: int):
    """Returns (joint, lm, encoder layer indices) for a group name."""
    norm = _normalize_group(name)
    last = enc_layers - 1
    if norm == "All":
        return True, True, tuple(range(enc_layers))
    if norm == "Joint":
        return True, False, ()
    if norm == "LM":
        return False, True, ()
    if norm == "Decoder":
        return True, True, ()
    if norm.startswith("Encoder "):
        spec = norm[len("Encoder "):].strip()
        lo, dash, hi = spec.partition("-")
        try:
            i = int(lo)
            if not dash:
                j = i
            elif hi.strip() == "end":
                j = last
            else:
                j = int(hi)
        except ValueError:
            raise ValueError(f"cannot parse encoder range {spec!r} in group {name!r}") from None
        if not (0 <= i <= j <= last):
            raise ValueError(f"encoder range {spec!r} outside layers 0..{last}")
        return False, False, tuple(range(i, j + 1))
    raise ValueError(
        f"unknown parameter group {name!r}; valid: All, Joint, LM, Decoder, "
        f"'Encoder <k>', 'Encoder <i>-<j>' (j may be 'end') for layers 0..{last}"
    )


def group_param_names(config: ModelConfig, name: str) -> tuple[str, ...]:
    joint, lm, enc = _parse_group(name, config.enc_layers)
    names: list[str] = []
    for l in enc:
        names += [f"enc.{l}.{w}" for w in ("wx", "wh", "b", "wp")]
    if lm:
        for l in range(config.lm_layers):
            names += [f"lm.{l}.{w}" for w in ("wx", "wh", "b", "wp")]
    if joint:
        names += ["joint.w_enc", "joint.w_lm", "joint.b", "joint.w_out", "joint.b_out"]
    return tuple(names)


def select_trainable(config: ModelConfig, name: str) -> ParamGroup:
    """Parameters to update for a named group; the complement stays frozen."""
    return ParamGroup(name, group_param_names(config, name))


def frozen_prefix_layers(config: ModelConfig, group: str) -> int:
    """Encoder layers whose outputs are static features under `group`.

    Groups that train encoder layer 0 (e.g. "All") have no frozen prefix.
    Groups without encoder layers freeze the whole acoustic stack.
    """
    _, _, enc = _parse_group(group, config.enc_layers)
    if not enc:
        return config.enc_layers
    if min(enc) == 0:
        raise ValueError(f"group {group!r} trains encoder layer 0; no frozen prefix to cache")
    return min(enc)


# --- analytic parameter counting ----------------------------------------------


def lstm_param_count(input_dim: int, hidden: int, proj: int) -> int:
    # four gates on (input + recurrent projection + bias), plus the projection
    return 4 * hidden * (input_dim + proj + 1) + hidden * proj


def joint_param_count(config: ModelConfig) -> int:
    p, j, o = config.lstm_proj, config.joint_hidden, config.n_outputs
    return 2 * p * j + j + j * o + o


def count_params(config: ModelConfig, group: str = "All") -> int:
    joint, lm, enc = _parse_group(group, config.enc_layers)
    total = 0
    for l in enc:
        total += lstm_param_count(config.enc_input_dim(l), config.lstm_hidden, config.lstm_proj)
    if lm:
        for l in range(config.lm_layers):
            total += lstm_param_count(config.lm_input_dim(l), config.lstm_hidden, config.lstm_proj)
    if joint:
        total += joint_param_count(config)
    return total


def param_breakdown(config: ModelConfig) -> list[tuple[str, int, float]]:
    """(group, count, percent-of-all) rows in the conventional report order."""
    last = config.enc_layers - 1
    names = ["Joint", "LM", "Decoder", f"Encoder {last}"]
    names += [f"Encoder {k}-{last}" for k in range(last - 1, -1, -1)]
    names += ["All"]
    total = count_params(config, "All")
    return [(n, count_params(config, n), 100.0 * count_params(config, n) / total) for n in names]


# --- quantization ---------------------------------------------------------------


def quantize_int8(values) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8: scale = max|x| / 127, zeros stay exact."""
    arr = np.asarray(values)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    if peak == 0.0:
        return np.zeros(arr.shape, dtype=np.int8), 0.0
    scale = peak / 127.0
    q = np.clip(np.round(arr / scale), -127, 127).astype(np.int8)
    return q, scale


def dequantize_int8(q: np.ndarray, scale: float, dtype="f32") -> np.ndarray:
    return (q.astype(np.float64) * scale).astype(DTYPES[dtype])


# --- the model -------------------------------------------------------------------


def init_params(config: ModelConfig, seed: int = 0, dtype: str = "f32") -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    h, p = config.lstm_hidden, config.lstm_proj

    def uniform(shape, fan_in, gain=1.0):
        s = gain * np.sqrt(3.0 / fan_in)
        return Tensor(rng.uniform(-s, s, size=shape), dtype, is_param=True)

    def lstm_block(prefix, input_dim):
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0  # forget gate starts open
        return {
            f"{prefix}.wx": uniform((input_dim, 4 * h), input_dim),
            f"{prefix}.wh": uniform((p, 4 * h), p),
            f"{prefix}.b": Tensor(bias, dtype, is_param=True),
            # gated cells shrink signal ~4x per layer; the projection gain
            # compensates so depth does not mute the acoustic pathway
            f"{prefix}.wp": uniform((h, p), h, gain=4.0),
        }

    params: dict[str, Tensor] = {}
    for l in range(config.enc_layers):
        params.update(lstm_block(f"enc.{l}", config.enc_input_dim(l)))
    for l in range(config.lm_layers):
        params.update(lstm_block(f"lm.{l}", config.lm_input_dim(l)))
    j = config.joint_hidden
    params["joint.w_enc"] = uniform((p, j), p)
    params["joint.w_lm"] = uniform((p, j), p)
    params["joint.b"] = Tensor(np.zeros(j), dtype, is_param=True)
    params["joint.w_out"] = uniform((j, config.n_outputs), j)
    params["joint.b_out"] = Tensor(np.zeros(config.n_outputs), dtype, is_param=True)
    return params


class RnnTransducer:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 *, seed: int = 0, dtype: str = "f32"):
        self.config = config
        self.dtype = dtype
        self.params = params if params is not None else init_params(config, seed, dtype)

    def clone(self) -> "RnnTransducer":
        copied = {n: Tensor(p.data.copy(), is_param=True) for n, p in self.params.items()}
        return RnnTransducer(self.config, copied, dtype=self.dtype)

    def param_bytes(self) -> int:
        return sum(p.nbytes for p in self.params.values())

    # -- forward pieces (work identically with or without an active tape) --

    def _zeros(self, n: int) -> Tensor:
        return leaf(np.zeros(n, dtype=DTYPES[self.dtype]))

    def lstm_cell(self, prefix: str, x_gates: Tensor, c: Tensor, h: Tensor):
        """One step given x_gates = x_t @ wx + b; returns (c_new, h_new)."""
        p = self.params
        hidden = self.config.lstm_hidden
        gates = add(x_gates, matmul(h, p[f"{prefix}.wh"]))
        i_g = sigmoid(_seg(gates, 0, hidden))
        f_g = sigmoid(_seg(gates, hidden, 2 * hidden))
        g_g = tanh(_seg(gates, 2 * hidden, 3 * hidden))
        o_g = sigmoid(_seg(gates, 3 * hidden, 4 * hidden))
        c_new = add(mul(f_g, c), mul(i_g, g_g))
        h_new = matmul(mul(o_g, tanh(c_new)), p[f"{prefix}.wp"])
        return c_new, h_new

    def _lstm_layer(self, prefix: str, x: Tensor) -> Tensor:
        xw = add_rows(matmul(x, self.params[f"{prefix}.wx"]), self.params[f"{prefix}.b"])
        c = self._zeros(self.config.lstm_hidden)
        h = self._zeros(self.config.lstm_proj)
        outs = []
        for t in range(x.shape[0]):
            c, h = self.lstm_cell(prefix, row(xw, t), c, h)
            outs.append(h)
        return stack(*outs)

    def _maybe_mid_stack(self, x: Tensor) -> Tensor:
        cfg = self.config
        if cfg.mid_stack_stride > 1:
            x = stack_frames(x, k=cfg.mid_stack_stride, stride=cfg.mid_stack_stride)
        return x

    def encoder_prefix(self, raw_features: Tensor, n_layers: int) -> Tensor:
        """Input stacking plus encoder layers [0, n_layers); the boundary
        tensor is post-stack when the mid-network stack sits at the boundary."""
        cfg = self.config
        if not 1 <= n_layers <= cfg.enc_layers:
            raise ValueError(f"prefix length {n_layers} outside 1..{cfg.enc_layers}")
        x = stack_frames(raw_features, k=cfg.input_stack, stride=cfg.input_stack_stride)
        for l in range(n_layers):
            if l == cfg.mid_stack_layer and l > 0:
                x = self._maybe_mid_stack(x)
            x = self._lstm_layer(f"enc.{l}", x)
        if cfg.mid_stack_layer == n_layers:
            x = self._maybe_mid_stack(x)
        return x

    def encoder_suffix(self, x: Tensor, from_layer: int) -> Tensor:
        """Encoder layers [from_layer, end) given the boundary tensor
        (raw features when from_layer == 0)."""
        cfg = self.config
        if from_layer == 0:
            x = stack_frames(x, k=cfg.input_stack, stride=cfg.input_stack_stride)
        for l in range(from_layer, cfg.enc_layers):
            if l == cfg.mid_stack_layer and l > from_layer:
                x = self._maybe_mid_stack(x)
            x = self._lstm_layer(f"enc.{l}", x)
        return x

    def acoustic_states(self, raw_features: Tensor) -> Tensor:
        return self.encoder_suffix(raw_features, 0)

    def _one_hots(self, labels) -> Tensor:
        cfg = self.config
        for y in labels:
            if not 0 <= y < cfg.vocab:
                raise ValueError(f"label id {y} outside vocab 0..{cfg.vocab - 1}")
        eye = np.zeros((len(labels) + 1, cfg.n_outputs), dtype=DTYPES[self.dtype])
        eye[0, cfg.blank] = 1.0  # start symbol
        for u, y in enumerate(labels):
            eye[u + 1, y] = 1.0
        return leaf(eye)

    def label_states(self, labels) -> Tensor:
        """[U+1, proj] prefix encodings: row 0 is the start-symbol state."""
        x = self._one_hots(labels)
        for l in range(self.config.lm_layers):
            x = self._lstm_layer(f"lm.{l}", x)
        return x

    def joint_logits(self, enc_vec: Tensor, lm_vec: Tensor) -> Tensor:
        # same association as the fused lattice path: enc + (lm + bias)
        p = self.params
        h = tanh(add(matmul(enc_vec, p["joint.w_enc"]),
                     add(matmul(lm_vec, p["joint.w_lm"]), p["joint.b"])))
        return add(matmul(h, p["joint.w_out"]), p["joint.b_out"])

    def log_prob_lattice(self, enc: Tensor, lms: Tensor) -> Tensor:
        """[T, U+1, V+1] log-softmax grid from encoder and label states.

        The joint runs fused over all (t, u) pairs; per-pair `joint_logits`
        is the same map and serves the decoder.
        """
        p = self.params
        t_len, u_rows = enc.shape[0], lms.shape[0]
        enc_proj = matmul(enc, p["joint.w_enc"])
        lm_proj = add_rows(matmul(lms, p["joint.w_lm"]), p["joint.b"])
        hidden = tanh(outer_add(enc_proj, lm_proj))
        flat = reshape(hidden, (t_len * u_rows, self.config.joint_hidden))
        logits = add_rows(matmul(flat, p["joint.w_out"]), p["joint.b_out"])
        return reshape(log_softmax(logits), (t_len, u_rows, self.config.n_outputs))

    def lattice_from_boundary(self, boundary: Tensor, from_layer: int, labels) -> Tensor:
        enc = self.encoder_suffix(boundary, from_layer)
        lms = self.label_states(labels)
        return self.log_prob_lattice(enc, lms)

    def utterance_loss(self, raw_features: Tensor, labels) -> Tensor:
        """Scalar transducer NLL node for one utterance."""
        lattice = self.lattice_from_boundary(raw_features, 0, labels)
        return rnnt_loss_node(lattice, labels, self.config.blank)

    def greedy_decode(self, raw_features, max_symbols_per_frame: int = 10) -> list[int]:
        """Frame-synchronous argmax decoding; blank advances time."""
        cfg = self.config
        feats = raw_features if isinstance(raw_features, Tensor) else Tensor(raw_features, self.dtype)
        enc = self.acoustic_states(feats)
        states = [(self._zeros(cfg.lstm_hidden), self._zeros(cfg.lstm_proj))
                  for _ in range(cfg.lm_layers)]

        def lm_step(symbol: int) -> Tensor:
            x = np.zeros(cfg.n_outputs, dtype=DTYPES[self.dtype])
            x[symbol] = 1.0
            vec = leaf(x)
            for l in range(cfg.lm_layers):
                x_gates = add(matmul(vec, self.params[f"lm.{l}.wx"]),
                              self.params[f"lm.{l}.b"])
                states[l] = self.lstm_cell(f"lm.{l}", x_gates, *states[l])
                vec = states[l][1]
            return vec

        lm_vec = lm_step(cfg.blank)
        hyp: list[int] = []
        for t in range(enc.shape[0]):
            enc_t = row(enc, t)
            for _ in range(max_symbols_per_frame):
                logits = self.joint_logits(enc_t, lm_vec)
                k = int(np.argmax(logits.data))
                if k == cfg.blank:
                    break
                hyp.append(k)
                lm_vec = lm_step(k)
        return hyp


def _seg(x: Tensor, start: int, stop: int) -> Tensor:
    return apply_op("slice", x, start=start, stop=stop)


# --- checkpoint format -----------------------------------------------------------
#
# magic | u32 json_len | config json | u32 n_tensors |
# per tensor: u16 name_len | name | u8 dtype | u8 ndim | ndim*u32 dims | raw LE data


def save_checkpoint(model: RnnTransducer, path) -> None:
    blob = bytearray(CHECKPOINT_MAGIC)
    cfg = model.config.to_json().encode()
    blob += struct.pack("<I", len(cfg)) + cfg
    names = sorted(model.params)
    blob += struct.pack("<I", len(names))
    for name in names:
        tensor = model.params[name]
        enc_name = name.encode()
        blob += struct.pack("<H", len(enc_name)) + enc_name
        blob += struct.pack("<BB", _DTYPE_CODES[tensor.dtype_name], tensor.data.ndim)
        blob += struct.pack(f"<{tensor.data.ndim}I", *tensor.shape)
        little = tensor.data.astype(tensor.data.dtype.newbyteorder("<"), copy=False)
        blob += little.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> RnnTransducer:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 8
    (json_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = ModelConfig.from_json(blob[off:off + json_len].decode())
    off += json_len
    (n_tensors,) = struct.unpack_from("<I", blob, off)
    off += 4
    params: dict[str, Tensor] = {}
    dtype_name = "f32"
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        dtype_code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dtype_name = _CODE_DTYPES[dtype_code]
        np_dtype = np.dtype(DTYPES[dtype_name]).newbyteorder("<")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(blob, dtype=np_dtype, count=count, offset=off)
        off += data.nbytes
        params[name] = Tensor(data.reshape(dims).astype(DTYPES[dtype_name]), is_param=True)
    model = RnnTransducer(config, _reorder(params, config), dtype=dtype_name)
    return model


def _reorder(params: dict[str, Tensor], config: ModelConfig) -> dict[str, Tensor]:
    """Restore construction order so downstream iteration is deterministic."""
    reference = list(init_params(config, seed=0))
    missing = [n for n in reference if n not in params]
    extra = [n for n in params if n not in reference]
    if missing or extra:
        raise ValueError(f"checkpoint params mismatch config (missing {missing}, extra {extra})")
    return {n: params[n] for n in reference}

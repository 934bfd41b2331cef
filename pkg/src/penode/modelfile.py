"""Binary model files (``PEN1``), little-endian throughout.

See ``docs/model_file_format.md`` for the byte layout. Float models
round-trip bit for bit; quantized files additionally carry a ``QMET``
section with the integer tensors.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .automaton import TransitionMap
from .deploy import QuantizedModel, QuantLayer, QuantNet
from .dynamics import CompositionLayout, HybridModel, PhysParams, make_template
from .errors import BadMagic, CrcMismatch, FileFormatError, VersionUnsupported
from .mlp import ResidualNet

MAGIC = b"PEN1"
VERSION = 1
KIND_FLOAT = 0
KIND_QUANT = 1
_HEADER = struct.Struct("<4sHBBHH")   # magic, version, kind, reserved, n_sections, reserved
_ENTRY = struct.Struct("<4sI")


class _W:
    def __init__(self):
        self.buf = io.BytesIO()

    def u8(self, v):
        self.buf.write(struct.pack("<B", v))

    def i8(self, v):
        self.buf.write(struct.pack("<b", v))

    def u16(self, v):
        self.buf.write(struct.pack("<H", v))

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def i64(self, v):
        self.buf.write(struct.pack("<q", v))

    def f64(self, v):
        self.buf.write(struct.pack("<d", v))

    def arr(self, a, dtype):
        a = np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<"))
        self.u32(a.size)
        self.buf.write(a.tobytes())

    def bytes(self):
        return self.buf.getvalue()


class _R:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise FileFormatError("section ends early")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def _unpack(self, fmt):
        return struct.unpack(fmt, self._take(struct.calcsize(fmt)))[0]

    def u8(self):
        return self._unpack("<B")

    def i8(self):
        return self._unpack("<b")

    def u16(self):
        return self._unpack("<H")

    def u32(self):
        return self._unpack("<I")

    def i64(self):
        return self._unpack("<q")

    def f64(self):
        return self._unpack("<d")

    def arr(self, dtype):
        n = self.u32()
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self._take(n * dt.itemsize), dtype=dt).astype(np.dtype(dtype))


# -- sections ----------------------------------------------------------------------------

def _head(model: HybridModel) -> bytes:
    tpl = model.template
    head = {
        "template": tpl.name,
        "template_options": dict(tpl.options),
        "state_names": list(tpl.state_names),
        "input_names": list(tpl.input_names),
        "param_names": list(model.phys.names),
        "param_positive": [bool(v) for v in model.phys.positive],
        "param_units": list(model.phys.units),
        "layouts": [[list(l.phys), list(l.nn)] for l in model.layouts],
        "net_of_mode": list(model.net_of_mode),
        "use_input": model.use_input,
        "time_period": model.time_period,
    }
    return json.dumps(head, sort_keys=True, separators=(",", ":")).encode()


def _auto(model: HybridModel) -> bytes:
    w = _W()
    tmap = model.transition_map
    entries = sorted(tmap.table.items()) if tmap is not None else []
    width = len(entries[0][0][1]) if entries else 0
    w.u32(len(entries))
    w.u16(width)
    for (z, word), nxt in entries:
        w.u16(z)
        w.u16(nxt)
        for b in word:
            w.u8(b)
    return w.bytes()


def _phys(model: HybridModel) -> bytes:
    w = _W()
    w.arr(model.phys.values, np.float64)
    w.arr(model.phys.nominal, np.float64)
    mf = model.mode_features
    w.u16(0 if mf is None else mf.shape[1])
    if mf is not None:
        w.arr(mf.ravel(), np.float64)
    return w.bytes()


def _nets(model: HybridModel) -> bytes:
    w = _W()
    w.u16(len(model.nets))
    for net in model.nets:
        w.arr(np.array(net.sizes), np.uint32)
        w.arr(net.in_center, np.float64)
        w.arr(net.in_scale, np.float64)
        w.arr(net.out_scale, np.float64)
        w.arr(net.theta, np.float64)
    return w.bytes()


def _qmet(qm: QuantizedModel) -> bytes:
    w = _W()
    w.u16(len(qm.A_q))
    for A, B, sa, sb in zip(qm.A_q, qm.B_q, qm.a_shift, qm.b_shift):
        w.arr(A.ravel(), np.int32)
        w.arr(B.ravel(), np.int32)
        w.arr(sa, np.int8)
        w.arr(sb, np.int8)
    w.u16(len(qm.nets))
    for qn in qm.nets:
        w.arr(np.array(qn.sizes), np.uint32)
        w.arr(qn.in_center, np.float64)
        w.arr(qn.in_norm, np.float64)
        w.u16(len(qn.layers))
        for L in qn.layers:
            w.arr(L.w.ravel(), np.int8)
            w.f64(L.w_scale)
            w.arr(L.b, np.int32)
            w.f64(L.in_scale)
            w.f64(L.out_scale)
            w.i64(L.m0)
            w.u8(L.shift)
        w.arr(qn.w_out.ravel(), np.float16)
        w.arr(qn.b_out, np.float16)
        w.arr(qn.y_scale, np.float64)
    return w.bytes()


def to_bytes(obj) -> bytes:
    """Serialize a :class:`HybridModel` or :class:`QuantizedModel`."""
    if isinstance(obj, QuantizedModel):
        model, kind = obj.model, KIND_QUANT
    elif isinstance(obj, HybridModel):
        model, kind = obj, KIND_FLOAT
    else:
        raise TypeError(f"cannot export {type(obj).__name__}")
    sections = [(b"HEAD", _head(model)), (b"AUTO", _auto(model)), (b"PHYS", _phys(model)),
                (b"NETS", _nets(model))]
    if kind == KIND_QUANT:
        sections.append((b"QMET", _qmet(obj)))
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, VERSION, kind, 0, len(sections), 0))
    for tag, body in sections:
        out.write(_ENTRY.pack(tag, len(body)))
    for _, body in sections:
        out.write(body)
    data = out.getvalue()
    return data + struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


def export_model(obj, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(obj))
    return path


# -- reading ------------------------------------------------------------------------------

def _parse(data: bytes):
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise BadMagic("not a model file (bad magic)")
    if len(data) < _HEADER.size + 4:
        raise CrcMismatch("file truncated")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcMismatch("checksum mismatch (file truncated or corrupted)")
    magic, version, kind, _, n_sections, _ = _HEADER.unpack_from(body, 0)
    if version != VERSION:
        raise VersionUnsupported(f"model file version {version} is not supported (expected {VERSION})")
    pos = _HEADER.size
    table = []
    for _ in range(n_sections):
        tag, length = _ENTRY.unpack_from(body, pos)
        table.append((tag, length))
        pos += _ENTRY.size
    sections = {}
    for tag, length in table:
        sections[tag] = body[pos:pos + length]
        pos += length
    if pos != len(body):
        raise FileFormatError("section lengths do not match the file size")
    return kind, sections


def _model_from(sections) -> HybridModel:
    head = json.loads(sections[b"HEAD"].decode())
    r = _R(sections[b"AUTO"])
    n, width = r.u32(), r.u16()
    table = {}
    for _ in range(n):
        z, nxt = r.u16(), r.u16()
        word = tuple(r.u8() for _ in range(width))
        table[(z, word)] = nxt
    tmap = TransitionMap(table) if table else None
    opts = head["template_options"]
    tpl = make_template(head["template"], opts.get("n_states"), opts.get("n_inputs"),
                        opts.get("n_modes"), tmap)
    r = _R(sections[b"PHYS"])
    values = r.arr(np.float64)
    nominal = r.arr(np.float64)
    q = r.u16()
    mf = r.arr(np.float64).reshape(-1, q) if q else None
    phys = PhysParams(head["param_names"], values, head["param_positive"], nominal,
                      tuple(head["param_units"]))
    r = _R(sections[b"NETS"])
    nets = []
    for _ in range(r.u16()):
        sizes = r.arr(np.uint32).tolist()
        c, s, o, th = (r.arr(np.float64) for _ in range(4))
        nets.append(ResidualNet(sizes, th, c, s, o))
    layouts = [CompositionLayout(tuple(p), tuple(nn)) for p, nn in head["layouts"]]
    return HybridModel(tpl, phys, layouts, nets, head["net_of_mode"], tmap, None,
                       head["use_input"], head["time_period"], mf)


def _quant_from(model: HybridModel, data: bytes) -> QuantizedModel:
    r = _R(data)
    d, m = model.n_states, model.n_inputs
    A_q, B_q, a_sh, b_sh = [], [], [], []
    for _ in range(r.u16()):
        A_q.append(r.arr(np.int32).reshape(d, d))
        B_q.append(r.arr(np.int32).reshape(d, m))
        a_sh.append(r.arr(np.int8).astype(int))
        b_sh.append(r.arr(np.int8).astype(int))
    nets = []
    for _ in range(r.u16()):
        sizes = r.arr(np.uint32).tolist()
        center = r.arr(np.float64)
        norm = r.arr(np.float64)
        layers = []
        for j in range(r.u16()):
            wq = r.arr(np.int8).reshape(sizes[j + 1], sizes[j])
            ws = r.f64()
            b = r.arr(np.int32)
            si, so = r.f64(), r.f64()
            m0, sh = r.i64(), r.u8()
            layers.append(QuantLayer(wq, ws, b, si, so, int(m0), int(sh)))
        w_out = r.arr(np.float16).reshape(sizes[-1], sizes[-2])
        b_out = r.arr(np.float16)
        y_scale = r.arr(np.float64)
        nets.append(QuantNet(center, norm, layers, w_out, b_out, y_scale, sizes))
    return QuantizedModel(model, A_q, B_q, a_sh, b_sh, nets)


def from_bytes(data: bytes):
    kind, sections = _parse(data)
    for tag in (b"HEAD", b"AUTO", b"PHYS", b"NETS"):
        if tag not in sections:
            raise FileFormatError(f"missing section {tag.decode()}")
    model = _model_from(sections)
    if kind == KIND_QUANT:
        if b"QMET" not in sections:
            raise FileFormatError("quantized file without QMET section")
        return _quant_from(model, sections[b"QMET"])
    return model


def import_model(path):
    return from_bytes(Path(path).read_bytes())

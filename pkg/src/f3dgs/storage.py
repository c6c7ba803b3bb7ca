"""Model file format, JSON debug dump and storage accounting.

Binary layout (little-endian), version 1::

    magic      4s   b"F3GS"
    version    u16
    scheme     u8   0 = CP, 1 = VM
    vm_mode    u8   0 = per-term, 1 = shared
    B          u32  number of blocks
    d          u32  feature width
    n_layers   u8   decoder layers (0 = no decoder)
    widths     u32 x n_layers   output width of each layer
    mask_state u8   0 = none, 1 = packed bits, 2 = float32 values
    tau        f32
    N_b        u32 x B
    mask_bits  u64 x B          bits per block (0 when no masks)

followed by every block's factor arrays as float32 in declaration order,
then the decoder weights and biases (``W0, b0, W1, b1, ...``) as float32,
then the masks (packed bytes, or float32 values) block by block.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .decoder import OUT_WIDTH, DecoderParams
from .factors import FactorSetCP, FactorSetVM
from .masking import MaskSet, packed_size
from .model import F3DGSModel

__all__ = [
    "MAGIC",
    "VERSION",
    "serialize",
    "deserialize",
    "save_model",
    "load_model",
    "to_json",
    "from_json",
    "storage_report",
    "header_size",
]

MAGIC = b"F3GS"
VERSION = 1
_SCHEMES = {"CP": 0, "VM": 1}
_MODES = {"per-term": 0, "shared": 1}


def _block_shapes(scheme, n, d):
    cp = {"p_x": (n,), "p_y": (n,), "p_z": (n,), "s_x": (n, 3), "s_y": (n, 3), "s_z": (n, 3),
          "q_x": (n, 4), "q_y": (n, 4), "q_z": (n, 4), "f_x": (n, d), "f_y": (n, d), "f_z": (n, d)}
    if scheme == "CP":
        return cp
    out = {"p_xy": (n, n, 2), "p_yz": (n, n, 2), "p_xz": (n, n, 2)}
    out.update(cp)
    out.update({"f_xy": (n, n, d), "f_yz": (n, n, d), "f_xz": (n, n, d)})
    return out


def header_size(num_blocks, num_layers) -> int:
    return 4 + 2 + 1 + 1 + 4 + 4 + 1 + 4 * num_layers + 1 + 4 + 4 * num_blocks + 8 * num_blocks


def _mask_state(model):
    if model.masks is None:
        return 0
    return 1 if model.masks.frozen else 2


def serialize(model: F3DGSModel) -> bytes:
    layers = [] if model.decoder is None else model.decoder.weights
    state = _mask_state(model)
    tau = 0.0 if model.masks is None else model.masks.tau
    parts = [struct.pack("<4sHBBIIB", MAGIC, VERSION, _SCHEMES[model.scheme],
                         _MODES[model.vm_mode], len(model.blocks), model.d, len(layers))]
    parts.append(struct.pack(f"<{len(layers)}I", *[w.shape[1] for w in layers]))
    parts.append(struct.pack("<Bf", state, tau))
    parts.append(struct.pack(f"<{len(model.blocks)}I", *[b.n for b in model.blocks]))
    bits = [0 if state == 0 else model.terms * b.n**3 for b in model.blocks]
    parts.append(struct.pack(f"<{len(model.blocks)}Q", *bits))
    for blk in model.blocks:
        for arr in blk.arrays().values():
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if model.decoder is not None:
        for w, b in zip(model.decoder.weights, model.decoder.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    if state == 1:
        parts.extend(model.masks.bits)
    elif state == 2:
        parts.extend(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in model.masks.values)
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ValueError("model file is truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self, shape):
        count = int(np.prod(shape))
        nbytes = 4 * count
        if self.pos + nbytes > len(self.data):
            raise ValueError("model file is truncated")
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos)
        self.pos += nbytes
        return arr.astype(np.float32).reshape(shape)

    def raw(self, nbytes):
        if self.pos + nbytes > len(self.data):
            raise ValueError("model file is truncated")
        out = bytes(self.data[self.pos:self.pos + nbytes])
        self.pos += nbytes
        return out


def deserialize(data: bytes) -> F3DGSModel:
    r = _Reader(data)
    magic, version, scheme_id, mode_id, nblocks, d, nlayers = r.unpack("<4sHBBIIB")
    if magic != MAGIC:
        raise ValueError("not an F3GS model file")
    if version != VERSION:
        raise ValueError(f"unsupported model file version {version}")
    scheme = {v: k for k, v in _SCHEMES.items()}[scheme_id]
    mode = {v: k for k, v in _MODES.items()}[mode_id]
    widths = r.unpack(f"<{nlayers}I")
    state, tau = r.unpack("<Bf")
    ns = r.unpack(f"<{nblocks}I")
    bits = r.unpack(f"<{nblocks}Q")
    cls = FactorSetCP if scheme == "CP" else FactorSetVM
    blocks = []
    for n in ns:
        blocks.append(cls(**{name: r.array(shape) for name, shape in _block_shapes(scheme, n, d).items()}))
    decoder = None
    if nlayers:
        ws, bs = [], []
        fan_in = d
        for w in widths:
            ws.append(r.array((fan_in, w)))
            bs.append(r.array((w,)))
            fan_in = w
        decoder = DecoderParams(ws, bs)
    terms = 3 if (scheme == "VM" and mode == "per-term") else 1
    masks = None
    if state == 1:
        masks = MaskSet(bits=[r.raw(packed_size(c)) for c in bits], resolutions=list(ns),
                        terms=terms, tau=tau)
    elif state == 2:
        shape = (lambda n: (n, n, n)) if terms == 1 else (lambda n: (terms, n, n, n))
        masks = MaskSet(values=[r.array(shape(n)) for n in ns], terms=terms, tau=tau)
    if r.pos != len(r.data):
        raise ValueError("trailing bytes after model payload")
    return F3DGSModel(blocks, decoder, masks, scheme, mode)


def save_model(model: F3DGSModel, path) -> int:
    data = serialize(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path) -> F3DGSModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


# --- JSON dump -------------------------------------------------------------------------


def _arr_json(arr):
    arr = np.asarray(arr, dtype=np.float32)
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _arr_from_json(obj):
    return np.asarray(obj["data"], dtype=np.float64).astype(np.float32).reshape(obj["shape"])


def to_json(model: F3DGSModel) -> str:
    """Lossless JSON rendering of the model (float32 values kept exactly)."""
    doc = {
        "format": "F3GS-json", "version": VERSION, "scheme": model.scheme,
        "vm_mode": model.vm_mode, "d": model.d,
        "blocks": [{k: _arr_json(v) for k, v in b.arrays().items()} for b in model.blocks],
        "decoder": None if model.decoder is None else
        {k: _arr_json(v) for k, v in model.decoder.arrays().items()},
        "masks": None,
    }
    if model.masks is not None:
        m = model.masks
        doc["masks"] = {"tau": float(np.float32(m.tau)), "terms": m.terms,
                        "resolutions": m.resolutions}
        if m.frozen:
            doc["masks"]["bits"] = [b.hex() for b in m.bits]
        else:
            doc["masks"]["values"] = [_arr_json(v) for v in m.values]
    return json.dumps(doc)


def from_json(text: str) -> F3DGSModel:
    doc = json.loads(text)
    cls = FactorSetCP if doc["scheme"] == "CP" else FactorSetVM
    blocks = [cls(**{k: _arr_from_json(v) for k, v in b.items()}) for b in doc["blocks"]]
    decoder = None
    if doc["decoder"] is not None:
        decoder = DecoderParams.from_arrays({k: _arr_from_json(v) for k, v in doc["decoder"].items()})
    masks = None
    if doc["masks"] is not None:
        m = doc["masks"]
        if "bits" in m:
            masks = MaskSet(bits=[bytes.fromhex(h) for h in m["bits"]],
                            resolutions=m["resolutions"], terms=m["terms"], tau=m["tau"])
        else:
            masks = MaskSet(values=[_arr_from_json(v) for v in m["values"]],
                            terms=m["terms"], tau=m["tau"])
    return F3DGSModel(blocks, decoder, masks, doc["scheme"], doc["vm_mode"])


# --- accounting ---------------------------------------------------------------------------


def storage_report(model) -> dict:
    """Parameter and byte accounting without expanding any block.

    ``compression_ratio`` compares stored coordinate scalars with the
    ``3 x representable`` scalars a dense point list would need.
    ``bytes_on_disk`` equals ``len(serialize(model))``.
    """
    if not isinstance(model, F3DGSModel):
        model = F3DGSModel(list(model), None)
    coord = 0
    factor = 0
    for blk in model.blocks:
        for name, arr in blk.arrays().items():
            factor += arr.size
            if name.startswith("p_"):
                coord += arr.size
    representable = model.num_gaussians()
    dec = 0 if model.decoder is None else model.decoder.num_params()
    nlayers = 0 if model.decoder is None else len(model.decoder.weights)
    state = _mask_state(model)
    mask_count = [model.terms * b.n**3 for b in model.blocks] if state else []
    if state == 1:
        mask_bytes = sum(packed_size(c) for c in mask_count)
    elif state == 2:
        mask_bytes = 4 * sum(mask_count)
    else:
        mask_bytes = 0
    nbytes = header_size(len(model.blocks), nlayers) + 4 * (factor + dec) + mask_bytes
    return {
        "blocks": len(model.blocks),
        "stored_coordinate_scalars": int(coord),
        "stored_scalars": int(factor + dec),
        "factor_scalars": int(factor),
        "decoder_scalars": int(dec),
        "mask_bits": int(sum(mask_count)),
        "representable_gaussians": int(representable),
        "compression_ratio": coord / (3.0 * representable),
        "bytes_on_disk": int(nbytes),
        "decoder_out_width": OUT_WIDTH if model.decoder is not None else 0,
    }

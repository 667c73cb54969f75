"""Binary volume, mask and checkpoint files, plus the ``key = value`` config format.

All integers and floats are little-endian.

PVOL (float volume)::

    b"PVOL1\\0"  u32 X  u32 Y  u32 Z  u32 C  f32[C*Z*Y*X]

The payload is C-order over (c, z, y, x), so an array of shape
[C, Z, Y, X] is written as is. A 2x2x2 single-channel volume takes
6 + 16 + 32 = 54 bytes. PMSK is identical with magic ``b"PMSK1\\0"`` and
one byte per voxel, each 0 or 1.

SGCK (checkpoint)::

    b"SGCK1\\0"  u32 version
    u32 n_params      then n_params tensor entries
    u32 n_optimizer   then n_optimizer tensor entries
    u32 phase_index  u32 epoch  u32 global_epoch  u64 seed
    u32 n_bytes       then UTF-8 metadata text

    tensor entry: u32 name_len, name bytes, u32 rank, u32 dims[rank], f32 data
"""

from __future__ import annotations

import dataclasses
import os
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .errors import ConfigError, FormatError

PVOL_MAGIC = b"PVOL1\0"
PMSK_MAGIC = b"PMSK1\0"
CKPT_MAGIC = b"SGCK1\0"
CKPT_VERSION = 1

_HEADER = struct.Struct("<4I")


def _write_atomic(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _as_czyx(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        return arr[None]
    if arr.ndim == 4:
        return arr
    raise ValueError(f"volumes must be [Z,Y,X] or [C,Z,Y,X], got shape {arr.shape}")


def _encode_grid(magic: bytes, arr: np.ndarray, dtype: str) -> bytes:
    arr = _as_czyx(arr)
    c, z, y, x = arr.shape
    return magic + _HEADER.pack(x, y, z, c) + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _decode_grid(blob: bytes, magic: bytes, itemsize: int, kind: str):
    if len(blob) < len(magic) or blob[:len(magic)] != magic:
        raise FormatError(f"bad {kind} magic", 0)
    start = len(magic)
    if len(blob) < start + _HEADER.size:
        raise FormatError(f"truncated {kind} header", len(blob))
    x, y, z, c = _HEADER.unpack_from(blob, start)
    if min(x, y, z, c) == 0:
        raise FormatError(f"{kind} header has a zero extent", start)
    body = start + _HEADER.size
    expected = body + itemsize * x * y * z * c
    if len(blob) < expected:
        raise FormatError(f"truncated {kind} payload: need {expected} bytes, have {len(blob)}", len(blob))
    if len(blob) > expected:
        raise FormatError(f"{kind} has {len(blob) - expected} trailing bytes", expected)
    return (c, z, y, x), body


def encode_volume(arr: np.ndarray) -> bytes:
    return _encode_grid(PVOL_MAGIC, arr, "<f4")


def decode_volume(blob: bytes) -> np.ndarray:
    """[C, Z, Y, X] float32 array."""
    shape, body = _decode_grid(blob, PVOL_MAGIC, 4, "PVOL")
    return np.frombuffer(blob, dtype="<f4", offset=body).reshape(shape).astype(np.float32)


def encode_mask(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return _encode_grid(PMSK_MAGIC, arr, "u1")


def decode_mask(blob: bytes) -> np.ndarray:
    """[C, Z, Y, X] uint8 array of zeros and ones."""
    shape, body = _decode_grid(blob, PMSK_MAGIC, 1, "PMSK")
    data = np.frombuffer(blob, dtype=np.uint8, offset=body)
    bad = np.flatnonzero(data > 1)
    if bad.size:
        raise FormatError(f"PMSK voxel value {data[bad[0]]} is not 0 or 1", body + int(bad[0]))
    return data.reshape(shape).copy()


def write_volume(path, arr: np.ndarray) -> None:
    _write_atomic(path, encode_volume(arr))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


def write_mask(path, arr: np.ndarray) -> None:
    _write_atomic(path, encode_mask(arr))


def read_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    phase_index: int = 0
    epoch: int = 0
    global_epoch: int = 0
    seed: int = 0
    meta: str = ""


def _encode_entries(entries: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def entries(self, section: str) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32(f"{section} count")):
            at = self.pos
            try:
                name = self.take(self.u32("name length"), "name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"{section} entry name is not UTF-8", at) from exc
            rank = self.u32("rank")
            dims = tuple(self.u32("dim") for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(self.take(4 * count, f"data of {name}"), dtype="<f4")
            if name in out:
                raise FormatError(f"duplicate {section} entry {name!r}", at)
            out[name] = data.reshape(dims).astype(np.float32)
        return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = ckpt.meta.encode("utf-8")
    return b"".join([
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        _encode_entries(ckpt.params),
        _encode_entries(ckpt.optimizer),
        struct.pack("<3IQ", ckpt.phase_index, ckpt.epoch, ckpt.global_epoch, ckpt.seed),
        struct.pack("<I", len(meta)),
        meta,
    ])


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    r = _Reader(blob)
    r.pos = len(CKPT_MAGIC)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})", len(CKPT_MAGIC))
    params = r.entries("parameter")
    optimizer = r.entries("optimizer")
    phase_index, epoch, global_epoch = (r.u32(w) for w in ("phase index", "epoch", "global epoch"))
    seed = r.u64("seed")
    at = r.pos
    try:
        meta = r.take(r.u32("metadata length"), "metadata").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("checkpoint metadata is not UTF-8", at) from exc
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes after checkpoint", r.pos)
    return Checkpoint(params, optimizer, phase_index, epoch, global_epoch, seed, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    _write_atomic(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------- config

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}

_FIELD_NOTES = {
    "phantom.size": "grid edge in voxels; multiple of 16",
    "phantom.drf": "dose reduction factor for the low-dose simulation",
    "phantom.rescale": "multiply thinned counts by drf so x and y share a scale",
    "phantom.lowdose_per_case": "independent low-dose samples per phantom",
    "phantom.test_fraction": "fraction of phantoms (not samples) held out",
    "phantom.smoothing": "boxcar width applied after sampling",
    "model.backbone": "dcitn | unet",
    "model.plain_norm": "none | instance; used only when use_adain is false",
    "model.growth": "channels added by each dense layer",
    "model.style_dim": "width of the style code",
    "model.sigma_z": "std of the injected noise field",
    "model.eps_sigma": "floor on the instance std in normalisation",
    "loss.lambda1": "content (L1) weight",
    "loss.lambda2": "segmentation weight in guided GAN phases",
    "loss.clip_c": "critic weight clipping bound",
    "train.schedule": "ordered KIND:epochs phases, KIND in GAN | S",
    "train.scale": "divisor applied to every phase length",
    "train.sg_rois": "ROI channels whose loss reaches the generator",
    "train.intensity_scale": "counts are divided by this before entering the networks",
    "train.checkpoint_every": "extra checkpoint every N epochs (0: phase ends only)",
    "eval.harness_epochs": "training epochs of the Unet-score segmenter",
}


def _hints(section_obj) -> dict[str, typing.Any]:
    return typing.get_type_hints(type(section_obj))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{k}:{n}" for k, n in value)
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_value(raw: str, hint, where: str):
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        args = typing.get_args(hint)
        if args and typing.get_origin(args[0]) is tuple:
            phases = []
            for item in filter(None, (p.strip() for p in raw.split(","))):
                kind, _, n = item.partition(":")
                phases.append((kind.strip(), int(n)))
            return tuple(phases)
        return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _field_index(cfg: Config) -> dict[str, list[str]]:
    index: dict[str, list[str]] = {}
    for sname, section in cfg.sections().items():
        for f in dataclasses.fields(section):
            index.setdefault(f.name, []).append(sname)
    return index


def parse_config_text(text: str, base: Config | None = None, source: str = "<config>") -> Config:
    """Apply ``key = value`` lines onto ``base`` (defaults if omitted) and validate.

    Keys live under ``[section]`` headers; before any header a key may be
    written ``section.key`` or, when the field name is unique, bare.
    """
    cfg = base if base is not None else Config()
    updates: dict[str, dict[str, typing.Any]] = {name: {} for name in cfg.sections()}
    index = _field_index(cfg)
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in updates:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key = key.strip()
        if section is not None:
            sname, fname = section, key
        elif "." in key:
            sname, fname = key.split(".", 1)
        else:
            owners = index.get(key, [])
            if len(owners) != 1:
                raise ConfigError(f"{where}: unknown key {key!r}" if not owners
                                  else f"{where}: ambiguous key {key!r}; use a [section]")
            sname, fname = owners[0], key
        target = getattr(cfg, sname, None) if sname in updates else None
        if target is None or fname not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"{where}: unknown key {key!r}" + (f" in [{sname}]" if section else ""))
        updates[sname][fname] = _parse_value(value, _hints(target)[fname], f"{where} ({sname}.{fname})")
    sections = {
        name: dataclasses.replace(getattr(cfg, name), **changes) if changes else getattr(cfg, name)
        for name, changes in updates.items()
    }
    return Config(**sections).validate()


def parse_config(path, base: Config | None = None) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base, str(path))


def format_config(cfg: Config, notes: bool = False) -> str:
    """Serialise ``cfg`` in the format ``parse_config_text`` reads back."""
    lines = []
    for sname, section in cfg.sections().items():
        if lines:
            lines.append("")
        lines.append(f"[{sname}]")
        for f in dataclasses.fields(section):
            entry = f"{f.name} = {_format_value(getattr(section, f.name))}"
            note = _FIELD_NOTES.get(f"{sname}.{f.name}") if notes else None
            lines.append(f"{entry}  # {note}" if note else entry)
    return "\n".join(lines) + "\n"


def defaults_reference() -> str:
    """Every config key with its default value."""
    header = "# Default configuration. Every key below may be overridden in a config file.\n\n"
    return header + format_config(Config(), notes=True)

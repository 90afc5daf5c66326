"""Model file storage.

Layout (little-endian)::

    magic    4s  b"NAGM"
    version  u32 1
    config   K u32, d_prime u32, d_m u32, L u32, heads u32, c u32,
             readout u8, use_structural u8, head_hidden u8, reserved 1x
    manifest leaf_count u32, then per leaf:
             name_len u16, name utf-8, ndim u8, dims u32 * ndim, offset u64
    payload  value_count u64, then fp64 values (offsets count values)
"""
import logging
import os
import struct
from typing import List, Tuple

import numpy as np

from src.models.hop_transformer import ModelConfig, ModelParams, Readout, leaf_shapes
from src.models.layers import ParamLeaf
from src.utils.errors import (ConfigError, ManifestMismatch, ModelNotFound, ModelVersionError, NotAModelFile,
                              TruncatedModelFile)

logger = logging.getLogger(__name__)

MODEL_MAGIC = b'NAGM'
MODEL_VERSION = 1
PREAMBLE = struct.Struct('<4sI')
CONFIG_BLOCK = struct.Struct('<IIIIIIBBBx')


class _Reader:
    """Bounds-checked cursor over the file bytes."""

    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, fmt: struct.Struct):
        if self.pos + fmt.size > len(self.raw):
            raise TruncatedModelFile(f"{self.path}: truncated model file")
        out = fmt.unpack_from(self.raw, self.pos)
        self.pos += fmt.size
        return out

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedModelFile(f"{self.path}: truncated model file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


class ModelStore:
    """Saves and loads (ModelParams, ModelConfig) pairs."""

    def encode(self, params: ModelParams, config: ModelConfig) -> bytes:
        parts = [PREAMBLE.pack(MODEL_MAGIC, MODEL_VERSION),
                 CONFIG_BLOCK.pack(config.K, config.d_prime, config.d_m, config.L, config.heads,
                                   config.c, config.readout.code, int(config.use_structural),
                                   int(config.head_hidden)),
                 struct.pack('<I', len(params))]
        offset = 0
        for leaf in params:
            name = leaf.name.encode('utf-8')
            parts.append(struct.pack('<H', len(name)) + name)
            parts.append(struct.pack('<B', leaf.value.ndim))
            parts.append(struct.pack(f"<{leaf.value.ndim}I", *leaf.shape))
            parts.append(struct.pack('<Q', offset))
            offset += leaf.size
        parts.append(struct.pack('<Q', offset))
        for leaf in params:
            parts.append(np.ascontiguousarray(leaf.value, dtype='<f8').tobytes())
        return b''.join(parts)

    def save(self, params: ModelParams, config: ModelConfig, path: str):
        tmp = f"{path}.tmp"
        with open(tmp, 'wb') as f:
            f.write(self.encode(params, config))
        os.replace(tmp, path)
        logger.info(f"Saved model to {path} ({params.num_scalars()} parameters)")

    def decode(self, raw: bytes, path: str = '<bytes>') -> Tuple[ModelParams, ModelConfig]:
        if len(raw) < 4 or raw[:4] != MODEL_MAGIC:
            raise NotAModelFile(f"{path}: not a model file")
        r = _Reader(raw, path)
        _, version = r.take(PREAMBLE)
        if version != MODEL_VERSION:
            raise ModelVersionError(f"{path}: model file version {version}, expected {MODEL_VERSION}")
        K, d_prime, d_m, L, heads, c, readout, use_structural, head_hidden = r.take(CONFIG_BLOCK)
        if readout >= len(Readout):
            raise ManifestMismatch(f"{path}: unknown readout code {readout}")
        try:
            config = ModelConfig(K=K, d_prime=d_prime, d_m=d_m, L=L, heads=heads, c=c,
                                 readout=Readout.from_code(readout), use_structural=bool(use_structural),
                                 head_hidden=bool(head_hidden))
        except ConfigError as e:
            raise ManifestMismatch(f"{path}: invalid model config ({e})")

        (count,) = r.take(struct.Struct('<I'))
        manifest: List[Tuple[str, Tuple[int, ...], int]] = []
        for _ in range(count):
            (name_len,) = r.take(struct.Struct('<H'))
            name = r.take_bytes(name_len).decode('utf-8')
            (ndim,) = r.take(struct.Struct('<B'))
            shape = r.take(struct.Struct(f"<{ndim}I"))
            (offset,) = r.take(struct.Struct('<Q'))
            manifest.append((name, tuple(shape), offset))

        expected = [(name, shape) for name, shape, _ in leaf_shapes(config)]
        found = [(name, shape) for name, shape, _ in manifest]
        if found != expected:
            diff = next(((e, f) for e, f in zip(expected, found) if e != f), None)
            detail = f"expected {diff[0]}, found {diff[1]}" if diff else \
                f"expected {len(expected)} leaves, found {len(found)}"
            raise ManifestMismatch(f"{path}: leaf manifest does not match config ({detail})")

        (total,) = r.take(struct.Struct('<Q'))
        body = r.take_bytes(total * 8)
        if r.pos != len(raw):
            raise ManifestMismatch(f"{path}: {len(raw) - r.pos} trailing bytes after payload")
        values = np.frombuffer(body, dtype='<f8').astype(np.float64)

        decays = {name: init == 'xavier' for name, _, init in leaf_shapes(config)}
        params = ModelParams()
        for name, shape, offset in manifest:
            size = int(np.prod(shape, dtype=np.int64))
            if offset + size > total:
                raise ManifestMismatch(f"{path}: leaf {name} extends past the payload")
            params.add(ParamLeaf(name, values[offset:offset + size].reshape(shape), decay=decays[name]))
        return params, config

    def load(self, path: str) -> Tuple[ModelParams, ModelConfig]:
        if not os.path.exists(path):
            raise ModelNotFound(f"model file not found: {path}")
        with open(path, 'rb') as f:
            raw = f.read()
        params, config = self.decode(raw, path)
        logger.info(f"Loaded model {path} (K={config.K}, d'={config.d_prime}, d_m={config.d_m}, L={config.L})")
        return params, config


model_store = ModelStore()


def save_model(params: ModelParams, config: ModelConfig, path: str):
    model_store.save(params, config, path)


def load_model(path: str) -> Tuple[ModelParams, ModelConfig]:
    return model_store.load(path)

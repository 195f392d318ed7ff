"""
Formato binario dei checkpoint.

    magic "FASD" | u32 versione | u8 precisione (4 o 8 byte) | u32 numero tensori
    per tensore: u16 lunghezza nome + nome UTF-8 | u8 rango | u32 per dimensione |
                 payload IEEE-754 little-endian
    blocco slot degli ottimizzatori, stesso schema, nomi opt/<ottimizzatore>/<slot>/<param>
    u32 lunghezza + JSON UTF-8: configurazione, contatori, stato dei generatori
    casuali, metadati degli ottimizzatori

Interi little-endian. La scrittura passa da un file temporaneo rinominato.
"""

import json
import os
import struct

import numpy as np

from . import autodiff as ad
from .config import validate_config
from .errors import CheckpointError, ConfigError
from .optim import Optimizer
from .trainer import MetricsLog, TrainState

MAGIC = b'FASD'
VERSION = 1
_PRECISION_CODES = {'float32': 4, 'float64': 8}
_PAYLOAD_DTYPES = {4: np.dtype('<f4'), 8: np.dtype('<f8')}


def _pack_tensor(out, name, array, payload_dtype):
    encoded = name.encode('utf-8')
    out.append(struct.pack('<H', len(encoded)))
    out.append(encoded)
    out.append(struct.pack('<B', array.ndim))
    out.append(struct.pack(f'<{array.ndim}I', *array.shape))
    out.append(np.ascontiguousarray(array, dtype=payload_dtype).tobytes())


def _pack_block(out, tensors, payload_dtype):
    out.append(struct.pack('<I', len(tensors)))
    for name, array in tensors:
        _pack_tensor(out, name, array, payload_dtype)


def _optimizer_slots(state):
    tensors = []
    for opt_name in sorted(state.optimizers):
        opt = state.optimizers[opt_name]
        for slot in sorted(opt.slots):
            for param in sorted(opt.slots[slot]):
                tensors.append((f"opt/{opt_name}/{slot}/{param}", opt.slots[slot][param]))
    return tensors


def checkpoint_bytes(state):
    precision = _PRECISION_CODES[state.cfg['precision']]
    payload_dtype = _PAYLOAD_DTYPES[precision]
    out = [MAGIC, struct.pack('<IB', VERSION, precision)]
    _pack_block(out, [(name, tensor.data) for name, tensor in state.params.items()], payload_dtype)
    _pack_block(out, _optimizer_slots(state), payload_dtype)
    meta = {
        'config': state.cfg,
        'counters': state.counters,
        'rngs': {name: rng.bit_generator.state for name, rng in state.rngs.items()},
        'optimizers': {name: opt.state_dict() for name, opt in state.optimizers.items()},
    }
    encoded = json.dumps(meta, sort_keys=True).encode('utf-8')
    out.append(struct.pack('<I', len(encoded)))
    out.append(encoded)
    return b''.join(out)


def save_checkpoint(state, path):
    """Scrive il checkpoint in modo atomico (file temporaneo + rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as f:
        f.write(checkpoint_bytes(state))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.path = path
        self.offset = 0

    def fail(self, message):
        raise CheckpointError(f"{self.path}: {message} (offset {self.offset})")

    def read(self, n, what):
        if self.offset + n > len(self.buf):
            self.fail(f"file troncato leggendo {what}")
        chunk = self.buf[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.read(size, what))

    def tensor(self, payload_dtype, native_dtype):
        (length,) = self.unpack('<H', 'lunghezza del nome')
        try:
            name = self.read(length, 'nome del tensore').decode('utf-8')
        except UnicodeDecodeError:
            self.fail('nome del tensore non UTF-8')
        (rank,) = self.unpack('<B', f'rango di {name}')
        shape = self.unpack(f'<{rank}I', f'dimensioni di {name}')
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.read(count * payload_dtype.itemsize, f'payload di {name}')
        array = np.frombuffer(raw, dtype=payload_dtype).reshape(shape).astype(native_dtype)
        return name, array

    def block(self, payload_dtype, native_dtype, what):
        (count,) = self.unpack('<I', f'numero di {what}')
        return [self.tensor(payload_dtype, native_dtype) for _ in range(count)]


def parse_checkpoint(buf, path='<memoria>'):
    """Decodifica i byte di un checkpoint in un TrainState."""
    reader = _Reader(buf, path)
    magic = reader.read(4, 'magic')
    if magic != MAGIC:
        reader.offset = 0
        reader.fail(f"magic non valido {magic!r}, atteso \"FASD\"")
    (version,) = reader.unpack('<I', 'versione')
    if version != VERSION:
        reader.fail(f"versione {version} non supportata (supportata: {VERSION})")
    (precision,) = reader.unpack('<B', 'precisione')
    if precision not in _PAYLOAD_DTYPES:
        reader.fail(f"codice di precisione non valido: {precision}")
    payload_dtype = _PAYLOAD_DTYPES[precision]
    native = payload_dtype.newbyteorder('=')

    tensors = reader.block(payload_dtype, native, 'parametri')
    slots = reader.block(payload_dtype, native, 'slot')
    (length,) = reader.unpack('<I', 'lunghezza dei metadati')
    raw = reader.read(length, 'metadati')
    try:
        meta = json.loads(raw.decode('utf-8'))
        cfg = validate_config(meta['config'])
    except (UnicodeDecodeError, ValueError, KeyError, ConfigError) as e:
        reader.fail(f"metadati non validi ({e})")
    if reader.offset != len(buf):
        reader.fail(f"{len(buf) - reader.offset} byte in eccesso dopo i metadati")

    params = ad.ParamSet({name: ad.Tensor(array) for name, array in tensors})
    opt_slots = {}
    for name, array in slots:
        parts = name.split('/', 3)
        if len(parts) != 4 or parts[0] != 'opt':
            reader.fail(f"nome di slot non valido: {name!r}")
        _, opt_name, slot, param = parts
        opt_slots.setdefault(opt_name, {}).setdefault(slot, {})[param] = array

    optimizers = {}
    for opt_name, opt_meta in meta.get('optimizers', {}).items():
        optimizers[opt_name] = Optimizer.from_state(opt_meta, opt_slots.get(opt_name, {}))

    rngs = {}
    for name, rng_state in meta.get('rngs', {}).items():
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        rngs[name] = rng

    return TrainState(params=params, cfg=cfg, optimizers=optimizers, rngs=rngs,
                      counters=dict(meta.get('counters', {})), log=MetricsLog())


def load_checkpoint(path):
    """Legge un checkpoint; solleva CheckpointError con l'offset del problema."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint non trovato: {path}")
    with open(path, 'rb') as f:
        buf = f.read()
    return parse_checkpoint(buf, path)

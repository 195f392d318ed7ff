import os
import struct

import numpy as np
import pytest

from conftest import make_cfg
from functions.checkpoint import VERSION, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from functions.errors import CheckpointError
from functions.trainer import adapt, adversarial_round, init_state, pretrain_attention


@pytest.fixture
def trained(tiny_cfg, source_ds, target_ds):
    state = pretrain_attention(init_state(tiny_cfg), source_ds)
    return adapt(state, source_ds, target_ds, rounds=1, mcd_steps=1)


def test_round_trip_resumes_bit_exactly(tmp_path, trained, source_ds, target_ds):
    path = tmp_path / 'model.ckpt'
    save_checkpoint(trained, path)
    assert not os.path.exists(f"{path}.tmp")
    loaded = load_checkpoint(path)
    assert checkpoint_bytes(loaded) == checkpoint_bytes(trained)
    assert loaded.counters == trained.counters

    adversarial_round(trained, source_ds, target_ds)
    adversarial_round(loaded, source_ds, target_ds)
    for name, tensor in trained.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, tensor.data, err_msg=name)
    assert checkpoint_bytes(loaded) == checkpoint_bytes(trained)


def test_float32_round_trip(tmp_path, source_ds):
    state = pretrain_attention(init_state(make_cfg(precision='float32')), source_ds, steps=2)
    assert state.params['dec.U'].dtype == np.float32
    loaded = parse_checkpoint(checkpoint_bytes(state))
    assert loaded.params['dec.U'].dtype == np.float32
    for name, tensor in state.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, tensor.data)
    assert checkpoint_bytes(state)[8] == 4


def test_bad_magic_is_reported(trained):
    buf = b'XXXX' + checkpoint_bytes(trained)[4:]
    with pytest.raises(CheckpointError, match='FASD'):
        parse_checkpoint(buf)


def test_unsupported_version_is_reported(trained):
    buf = checkpoint_bytes(trained)
    buf = buf[:4] + struct.pack('<I', VERSION + 1) + buf[8:]
    with pytest.raises(CheckpointError, match=f'versione {VERSION + 1}'):
        parse_checkpoint(buf)


@pytest.mark.parametrize('cut', [6, 40, 1000, -3])
def test_truncation_reports_offset(trained, cut):
    buf = checkpoint_bytes(trained)[:cut]
    with pytest.raises(CheckpointError, match=r'troncato.*offset \d+'):
        parse_checkpoint(buf)


def test_trailing_bytes_are_rejected(trained):
    with pytest.raises(CheckpointError, match='eccesso'):
        parse_checkpoint(checkpoint_bytes(trained) + b'\x00')


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match='non trovato'):
        load_checkpoint(tmp_path / 'nessuno.ckpt')

""" The tensor archive shared by checkpoints and sample dumps.

Layout::

    EEXLAB-ARCHIVE\n
    <8-byte little-endian header length>
    <JSON header: format_version, metadata, tensor index, sha256 of payload>
    <payload: every tensor's little-endian raw values, back to back>

Writes go to a temporary file that replaces the target only once complete,
so a reader never sees half an archive under the final name.
"""
import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict

import numpy as np
import torch

from earlyexit_lab.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'EEXLAB-ARCHIVE\n'
FORMAT_VERSION = 1

DTYPES = {
    'float32': (torch.float32, '<f4'),
    'float64': (torch.float64, '<f8'),
    'int64': (torch.int64, '<i8'),
    'int32': (torch.int32, '<i4'),
    'uint8': (torch.uint8, '|u1'),
    'bool': (torch.bool, '|b1'),
}
NAMES_BY_DTYPE = dict((torch_dtype, name)
                      for name, (torch_dtype, _) in DTYPES.items())


def _encode(tensor):
    name = NAMES_BY_DTYPE.get(tensor.dtype)
    if name is None:
        raise CheckpointError("cannot archive dtype %s" % tensor.dtype)
    array = tensor.detach().cpu().contiguous().numpy()
    return name, array.astype(DTYPES[name][1], copy=False).tobytes()


def write_archive(path, tensors, metadata=None):
    """ Writes an ordered mapping of name -> tensor plus JSON metadata.
    """
    index = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        dtype, raw = _encode(tensor)
        index.append({
            'name': name,
            'dtype': dtype,
            'shape': list(tensor.shape),
            'offset': offset,
            'nbytes': len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b''.join(chunks)
    header = json.dumps({
        'format_version': FORMAT_VERSION,
        'metadata': metadata or {},
        'tensors': index,
        'sha256': hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True).encode('utf-8')

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    partial = path + '.partial'
    with open(partial, 'wb') as handle:
        handle.write(MAGIC)
        handle.write(struct.pack('<Q', len(header)))
        handle.write(header)
        handle.write(payload)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(partial, path)
    logger.info("Wrote archive %s (%s tensors, %s bytes)",
                path, len(index), len(payload))
    return path


def read_archive(path):
    """ Returns (metadata, OrderedDict of tensors). Any damage raises
    CheckpointError before a single tensor is handed out.
    """
    if not os.path.exists(path):
        raise CheckpointError("no archive at %s" % path)
    with open(path, 'rb') as handle:
        blob = handle.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError("%s is not a tensor archive" % path)
    start = len(MAGIC)
    if len(blob) < start + 8:
        raise CheckpointError("%s is truncated (no header)" % path)
    (header_length,) = struct.unpack('<Q', blob[start:start + 8])
    start += 8
    if len(blob) < start + header_length:
        raise CheckpointError("%s is truncated (partial header)" % path)
    try:
        header = json.loads(blob[start:start + header_length].decode('utf-8'))
    except ValueError as exc:
        raise CheckpointError("%s has an unreadable header: %s" % (path, exc))
    if header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError("%s has unsupported format version %r" % (
            path, header.get('format_version')))

    payload = blob[start + header_length:]
    expected = sum(entry['nbytes'] for entry in header['tensors'])
    if len(payload) != expected:
        raise CheckpointError("%s is truncated: %s of %s payload bytes" % (
            path, len(payload), expected))
    if hashlib.sha256(payload).hexdigest() != header['sha256']:
        raise CheckpointError("%s failed its checksum" % path)

    tensors = OrderedDict()
    for entry in header['tensors']:
        torch_dtype, numpy_dtype = DTYPES[entry['dtype']]
        raw = payload[entry['offset']:entry['offset'] + entry['nbytes']]
        array = np.frombuffer(raw, dtype=numpy_dtype).reshape(entry['shape'])
        tensors[entry['name']] = torch.from_numpy(
            array.astype(array.dtype.newbyteorder('='))).to(torch_dtype)
    return header['metadata'], tensors

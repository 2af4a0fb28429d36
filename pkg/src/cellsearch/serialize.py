"""Binary checkpoint container.

Layout (all integers little-endian u32, values float64 little-endian):

    magic   4 bytes  "NMLG"
    version u32      currently 1
    config  u32 length + UTF-8 JSON record (kind, network config, extras)
    count   u32      number of tensors
    tensor  u32 name length, name bytes, u32 rank, u32 dims..., raw values

Round-trips exactly: reading back a written file reproduces every byte of
every tensor and the config record.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"NMLG"
VERSION = 1


def write_container(path, config, tensors):
    """config: JSON-serializable dict; tensors: name -> float64 ndarray."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = json.dumps(config, sort_keys=True).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def read_container(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        (clen,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(clen).decode())
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            tensors[name] = np.ascontiguousarray(data)
        return config, tensors


def model_state(net):
    state = {name: p.data for name, p in net.parameters_dict().items()}
    state.update(net.buffers_dict())
    return state


def save_model(net, path, extra=None):
    from .genotype import genotypes_to_json

    config = {"kind": "model", "network": net.cfg.to_dict()}
    if net.genotypes is not None:
        config["genotypes"] = json.loads(genotypes_to_json(net.genotypes))
    if extra:
        config["extra"] = extra
    write_container(path, config, model_state(net))


def load_model(path):
    from .genotype import Genotype
    from .network import NetworkConfig, build_network

    config, tensors = read_container(path)
    if config.get("kind") != "model":
        raise FormatError(f"not a model checkpoint: kind={config.get('kind')!r}")
    cfg = NetworkConfig.from_dict(config["network"])
    genotypes = None
    if "genotypes" in config:
        genotypes = [Genotype.from_dict(c) for c in config["genotypes"]["cells"]]
    net = build_network(cfg, genotypes=genotypes)
    restore_model_state(net, tensors)
    return net


def restore_model_state(net, tensors):
    params = net.parameters_dict()
    buffers = net.buffers_dict()
    for name, p in params.items():
        if name not in tensors:
            raise FormatError(f"checkpoint is missing parameter {name}")
        if tensors[name].shape != p.data.shape:
            raise FormatError(f"shape mismatch for {name}")
        p.data[:] = tensors[name]
    for name, buf in buffers.items():
        if name not in tensors:
            raise FormatError(f"checkpoint is missing buffer {name}")
        buf[:] = tensors[name]

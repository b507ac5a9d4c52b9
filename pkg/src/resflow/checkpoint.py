"""On-disk model checkpoints.

A checkpoint is a directory holding three files:

- ``manifest.txt``: magic/version header, the run configuration, the dataset
  schema, task list and fitted bucket boundaries, all as plain text;
- ``params.bin``: tower parameters in layer order, little-endian float32;
- ``embeddings.bin``: the embedding section (see ``EmbeddingTable.to_bytes``).
"""

from __future__ import annotations

import configparser
import io
import os
import struct

import numpy as np

from .config import RunConfig, parse_config
from .data import Bucketizer, Manifest
from .embedding import EmbeddingTable
from .errors import CheckpointError, ConfigError
from .model import MultiTaskModel

MAGIC = b"RFLW"
VERSION = 1
MANIFEST_HEADER = "resflow-checkpoint"


def _params_bytes(model: MultiTaskModel) -> bytes:
    buf = io.BytesIO()
    params = model.tower_parameters()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(params)))
    for p in params:
        name = p.name.encode()
        buf.write(struct.pack("<I", len(name)) + name)
        buf.write(struct.pack("<I", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return buf.getvalue()


def _load_params(data: bytes, model: MultiTaskModel) -> None:
    buf = io.BytesIO(data)

    def read(n):
        raw = buf.read(n)
        if len(raw) != n:
            raise CheckpointError("params.bin is truncated")
        return raw

    if read(4) != MAGIC:
        raise CheckpointError("params.bin: bad magic (not a checkpoint parameter blob)")
    version, count = struct.unpack("<II", read(8))
    if version != VERSION:
        raise CheckpointError(f"params.bin: version {version} is not supported (expected {VERSION})")
    params = model.tower_parameters()
    if count != len(params):
        raise CheckpointError(f"params.bin holds {count} tensors, the model expects {len(params)}")
    for p in params:
        (n,) = struct.unpack("<I", read(4))
        name = read(n).decode("utf-8", errors="replace")
        if name != p.name:
            raise CheckpointError(f"params.bin: found {name!r} where {p.name!r} was expected")
        (ndim,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        if tuple(shape) != p.value.shape:
            raise CheckpointError(f"params.bin: {name} has shape {shape}, expected {p.value.shape}")
        size = int(np.prod(shape)) if ndim else 1
        p.value = np.frombuffer(read(4 * size), dtype="<f4").reshape(shape).astype(model.dtype)
    if buf.read(1):
        raise CheckpointError("params.bin: trailing bytes")


def save(path: str, model: MultiTaskModel, config: RunConfig, manifest: Manifest, tasks, task_kinds: dict,
         bucketizers: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    lines = [f"# {MANIFEST_HEADER}", "[checkpoint]", f"format = {MANIFEST_HEADER}", f"version = {VERSION}",
             f"tasks = {', '.join(tasks)}",
             f"kinds = {', '.join(task_kinds[t] for t in tasks)}", ""]
    lines.append("[manifest]")
    lines.append(manifest.dumps().replace("delimiter = ,", "delimiter = comma").rstrip("\n"))
    lines.append("")
    lines.append("[buckets]")
    for name, b in (bucketizers or {}).items():
        lines.append(f"{name} = {', '.join(repr(float(x)) for x in b.boundaries)}")
    lines.append("")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    # the run configuration lives in its own file so it can be reused verbatim
    with open(os.path.join(path, "config.ini"), "w") as fh:
        fh.write(config.dumps())
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(_params_bytes(model))
    with open(os.path.join(path, "embeddings.bin"), "wb") as fh:
        fh.write(model.table.to_bytes())


class Loaded:
    def __init__(self, model, config, manifest, tasks, task_kinds, bucketizers):
        self.model = model
        self.config = config
        self.manifest = manifest
        self.tasks = tasks
        self.task_kinds = task_kinds
        self.bucketizers = bucketizers


def load(path: str) -> Loaded:
    files = {k: os.path.join(path, k) for k in ("manifest.txt", "config.ini", "params.bin", "embeddings.bin")}
    for name, p in files.items():
        if not os.path.isfile(p):
            raise CheckpointError(f"checkpoint {path} is missing {name}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(files["manifest.txt"]) as fh:
            cp.read_string(fh.read())
        head = cp["checkpoint"]
        if head.get("format") != MANIFEST_HEADER:
            raise CheckpointError(f"{files['manifest.txt']}: not a checkpoint manifest")
        version = int(head.get("version", "-1"))
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
        tasks = [t.strip() for t in head["tasks"].split(",") if t.strip()]
        kinds = [k.strip() for k in head["kinds"].split(",") if k.strip()]
        man = cp["manifest"]
        split = lambda key: [t.strip() for t in man.get(key, "").split(",") if t.strip()]
        delim = man.get("delimiter", "comma")
        manifest = Manifest(
            fields=split("fields"), multi_value=split("multi_value"), enumerated=split("enumerated"),
            item_fields=split("item_fields"), numeric=split("numeric"), labels=split("labels"),
            timestamp=man.get("timestamp"), target=man.get("target"), list_id=man.get("list_id"),
            order_count=man.get("order_count"), extra_labels=split("extra_labels"),
            delimiter={"comma": ",", "tab": "\t"}.get(delim, delim), buckets=int(man.get("buckets", "100")),
        )
        bucketizers = {
            k: Bucketizer(np.array([float(x) for x in v.split(",") if x.strip()]))
            for k, v in (cp["buckets"].items() if cp.has_section("buckets") else [])
        }
    except (configparser.Error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint manifest {files['manifest.txt']}: {exc}") from None
    try:
        with open(files["config.ini"]) as fh:
            config = parse_config(fh.read(), files["config.ini"])
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint config unreadable: {exc}") from None
    with open(files["embeddings.bin"], "rb") as fh:
        table = EmbeddingTable.from_bytes(fh.read(), manifest.schema(), min_count=config.min_count)
    task_kinds = dict(zip(tasks, kinds))
    try:
        model = MultiTaskModel(table, config.graph(tasks), config.tower(), mode=config.mode,
                               task_kinds=task_kinds, seed=config.seed)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint describes an invalid model: {exc}") from None
    with open(files["params.bin"], "rb") as fh:
        _load_params(fh.read(), model)
    return Loaded(model, config, manifest, tasks, task_kinds, bucketizers)

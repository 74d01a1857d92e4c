"""
Versioned binary parameter files.

Layout: magic b"PXDF", little-endian uint32 format version, uint32 header length, a
UTF-8 JSON header, then every block as little-endian float64 in header order. The
header names each block with its shape and carries the network config, the corpus
seed and any training state.
"""
import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from ..core.errors import ArtifactError
from .network import NetworkConfig, Params, ReversePredictor, ScaleEstimator
from .optim import Adam

logger = logging.getLogger(__name__)

MAGIC = b"PXDF"
FORMAT_VERSION = 1
BLOCK_DTYPE = np.dtype("<f8")

Component = Union[ScaleEstimator, ReversePredictor]
COMPONENTS = {cls.kind: cls for cls in (ScaleEstimator, ReversePredictor)}


def write_blocks(path: str, header: Dict[str, Any], blocks: Dict[str, np.ndarray]) -> None:
    header = dict(header, blocks=[{"name": name, "shape": list(block.shape)} for name, block in blocks.items()])
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(encoded)))
        f.write(encoded)
        for block in blocks.values():
            f.write(np.ascontiguousarray(block, dtype=BLOCK_DTYPE).tobytes())


def read_blocks(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if not os.path.isfile(path):
        raise ArtifactError(f"parameter file not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ArtifactError(f"{path} is not a pixdiff parameter file")
    if len(data) < 12:
        raise ArtifactError(f"{path} is truncated")
    version, header_length = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path} has format version {version}, this build reads version {FORMAT_VERSION}")
    try:
        header = json.loads(data[12 : 12 + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"{path} has a corrupt header: {e}") from e
    stream = io.BytesIO(data[12 + header_length :])
    blocks: Dict[str, np.ndarray] = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        raw = stream.read(count * BLOCK_DTYPE.itemsize)
        if len(raw) != count * BLOCK_DTYPE.itemsize:
            raise ArtifactError(f"{path} is truncated inside block {entry['name']}")
        blocks[entry["name"]] = np.frombuffer(raw, dtype=BLOCK_DTYPE).astype(np.float64).reshape(shape)
    if stream.read(1):
        raise ArtifactError(f"{path} has trailing bytes after its last block")
    return header, blocks


def _component_header(component: Component, corpus_seed: Optional[int]) -> Dict[str, Any]:
    return {"kind": component.kind, "config": component.config.to_dict(), "corpus_seed": corpus_seed}


def _build(header: Dict[str, Any], params: Params, path: str) -> Component:
    kind = header.get("kind")
    if kind not in COMPONENTS:
        raise ArtifactError(f"{path} holds an unknown component kind {kind!r}")
    return COMPONENTS[kind](config=NetworkConfig.from_dict(header["config"]), params=params)


def save_component(path: str, component: Component, corpus_seed: Optional[int] = None) -> None:
    write_blocks(path, _component_header(component, corpus_seed), component.params)
    logger.info(f"Wrote {component.kind} ({component.parameter_count()} parameters) to {path}")


def load_component(path: str, kind: Optional[str] = None) -> Component:
    header, blocks = read_blocks(path)
    component = _build(header, blocks, path)
    if kind is not None and component.kind != kind:
        raise ArtifactError(f"{path} holds a {component.kind}, expected a {kind}")
    return component


@dataclass(eq=False)
class Checkpoint:
    """Everything needed to continue a training run exactly where it stopped."""

    component: Component
    optimizer: Adam
    iteration: int
    loss_curve: List[float]
    train_config: Dict[str, Any]
    corpus_seed: Optional[int] = None


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    header = _component_header(checkpoint.component, checkpoint.corpus_seed)
    opt = checkpoint.optimizer
    header.update(
        iteration=checkpoint.iteration,
        loss_curve=list(checkpoint.loss_curve),
        train_config=checkpoint.train_config,
        optimizer={k: v for k, v in asdict(opt).items() if k not in ("m", "v")},
    )
    blocks = {f"param.{name}": block for name, block in checkpoint.component.params.items()}
    blocks.update(opt.state_blocks())
    write_blocks(path, header, blocks)
    logger.debug(f"Checkpoint at iteration {checkpoint.iteration} written to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    header, blocks = read_blocks(path)
    if "iteration" not in header:
        raise ArtifactError(f"{path} holds parameters only, not a training checkpoint")
    params = {name[len("param.") :]: block for name, block in blocks.items() if name.startswith("param.")}
    optimizer = Adam(**header["optimizer"])
    optimizer.load_blocks(blocks)
    return Checkpoint(
        component=_build(header, params, path),
        optimizer=optimizer,
        iteration=int(header["iteration"]),
        loss_curve=[float(v) for v in header["loss_curve"]],
        train_config=header["train_config"],
        corpus_seed=header.get("corpus_seed"),
    )


def loss_curve_csv(curve: List[float], start: int = 0) -> str:
    out = io.StringIO()
    out.write("iteration,loss\n")
    for k, loss in enumerate(curve, start=start):
        out.write(f"{k},{loss!r}\n")
    return out.getvalue()

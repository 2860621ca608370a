"""Versioned plain-text parameter files.

A file holds one :class:`~latentchoice.parameters.ParameterSet`::

    latentchoice-params 1
    kind crbm
    metadata {"alternatives": ["car", "bus"], ...}
    block D 2 2 3
    labels ["D[car,h1]", ...]
    fixed 1 1 1 0 0 0
    reference 1 1 1 0 0 0
    values 0.0 0.0 0.0 0.013 -0.2 1.5
    end

Dimensions and masks sit in the header of each block and values are written
row-major with ``repr`` so that reloading is bit-exact.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Type

import numpy as np

from .errors import ParameterFileError
from .iclv import ICLVParams
from .mnl import ChoiceModelParams
from .parameters import Block, ParameterSet
from .services.crbm import CRBMParams

logger = logging.getLogger(__name__)

MAGIC = "latentchoice-params"
VERSION = 1

KINDS: Dict[str, Type[ParameterSet]] = {
    ParameterSet.kind: ParameterSet,
    ChoiceModelParams.kind: ChoiceModelParams,
    ICLVParams.kind: ICLVParams,
    CRBMParams.kind: CRBMParams,
}


def _flags(mask: np.ndarray) -> str:
    return " ".join("1" if v else "0" for v in mask.ravel())


def dumps(params: ParameterSet) -> str:
    lines = [
        f"{MAGIC} {VERSION}",
        f"kind {params.kind}",
        f"metadata {json.dumps(params.metadata(), sort_keys=True)}",
    ]
    for block in params.values():
        dims = " ".join(str(d) for d in block.values.shape)
        lines.append(f"block {block.name} {block.values.ndim} {dims}".rstrip())
        lines.append(f"labels {json.dumps(list(block.labels))}")
        lines.append(f"fixed {_flags(block.fixed)}".rstrip())
        lines.append(f"reference {_flags(block.reference)}".rstrip())
        lines.append(f"values {' '.join(repr(float(v)) for v in block.values.ravel())}".rstrip())
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_params(params: ParameterSet, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps(params), encoding="utf-8")
    logger.debug(f"Wrote {params.kind} parameters to {path}")
    return path


def _field(line: str, key: str, lineno: int) -> str:
    head, _, rest = line.partition(" ")
    if head != key:
        raise ParameterFileError(f"line {lineno}: expected '{key}', found '{head}'")
    return rest


def _parse_block(lines: List[str], start: int) -> Block:
    header = _field(lines[start], "block", start + 1).split()
    try:
        name, ndim = header[0], int(header[1])
        shape = tuple(int(d) for d in header[2:2 + ndim])
    except (IndexError, ValueError) as exc:
        raise ParameterFileError(f"line {start + 1}: malformed block header") from exc
    if len(shape) != ndim:
        raise ParameterFileError(f"line {start + 1}: block '{name}' declares {ndim} dimensions")
    size = int(np.prod(shape)) if shape else 1
    try:
        labels = json.loads(_field(lines[start + 1], "labels", start + 2))
        fixed = [tok == "1" for tok in _field(lines[start + 2], "fixed", start + 3).split()]
        reference = [tok == "1" for tok in _field(lines[start + 3], "reference", start + 4).split()]
        values = [float(tok) for tok in _field(lines[start + 4], "values", start + 5).split()]
    except (IndexError, ValueError) as exc:
        raise ParameterFileError(f"block '{name}': {exc}") from exc
    if not (len(labels) == len(fixed) == len(reference) == len(values) == size):
        raise ParameterFileError(f"block '{name}': expected {size} entries")
    return Block.build(
        name,
        np.array(values).reshape(shape),
        labels,
        np.array(fixed).reshape(shape),
        np.array(reference).reshape(shape),
    )


def loads(text: str) -> ParameterSet:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ParameterFileError("empty parameter file")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise ParameterFileError("not a latentchoice parameter file")
    if magic[1] != str(VERSION):
        raise ParameterFileError(f"unsupported parameter file version {magic[1]}")
    if len(lines) < 3:
        raise ParameterFileError("truncated parameter file")
    kind = _field(lines[1], "kind", 2)
    if kind not in KINDS:
        raise ParameterFileError(f"unknown parameter kind '{kind}'")
    try:
        metadata = json.loads(_field(lines[2], "metadata", 3))
    except json.JSONDecodeError as exc:
        raise ParameterFileError(f"line 3: invalid metadata: {exc}") from exc
    blocks: List[Block] = []
    pos = 3
    while pos < len(lines) and lines[pos] != "end":
        blocks.append(_parse_block(lines, pos))
        pos += 5
    if pos >= len(lines):
        raise ParameterFileError("missing 'end' marker")
    return KINDS[kind].from_blocks(blocks, metadata)


def load_params(path: str | Path) -> ParameterSet:
    """Read a parameter file written by :func:`save_params`.

    Raises
    ------
    ParameterFileError
        If the file is missing, of another version or malformed.
    """
    path = Path(path)
    if not path.is_file():
        raise ParameterFileError(f"parameter file not found: {path}")
    return loads(path.read_text(encoding="utf-8"))

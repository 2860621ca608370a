"""Named parameter blocks with trainability masks.

Estimators work on flat vectors of *free* parameters while the models read
structured arrays.  :class:`ParameterSet` keeps both views in one place: an
ordered collection of :class:`Block` objects (values, fixed mask, labels)
that can be flattened, updated from a free vector and rebuilt, without
mutating the original.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class Block:
    """One named parameter array.

    Attributes
    ----------
    name: str
        Block identifier, e.g. ``"asc"``.
    values: np.ndarray
        Parameter values (float64, read-only).
    fixed: np.ndarray
        Boolean array of the same shape; ``True`` freezes the entry.
    labels: Tuple[str, ...]
        One display label per entry, in row-major order.
    reference: np.ndarray
        Boolean array flagging entries fixed for identification (rendered as
        ``0 (ref.)`` in reports).
    """

    name: str
    values: np.ndarray
    fixed: np.ndarray
    labels: Tuple[str, ...]
    reference: np.ndarray

    @classmethod
    def build(
        cls,
        name: str,
        values: np.ndarray,
        labels: Sequence[str],
        fixed: Optional[np.ndarray] = None,
        reference: Optional[np.ndarray] = None,
    ) -> "Block":
        values = np.array(values, dtype=np.float64)
        fixed = np.zeros(values.shape, dtype=bool) if fixed is None else np.array(fixed, dtype=bool)
        reference = np.zeros(values.shape, dtype=bool) if reference is None else np.array(reference, dtype=bool)
        if fixed.shape != values.shape or reference.shape != values.shape:
            raise DimensionError(f"mask shape mismatch in block '{name}'")
        if len(labels) != values.size:
            raise DimensionError(f"block '{name}' has {values.size} entries but {len(labels)} labels")
        fixed = fixed | reference
        for arr in (values, fixed, reference):
            arr.setflags(write=False)
        return cls(name, values, fixed, tuple(labels), reference)

    def with_values(self, values: np.ndarray) -> "Block":
        values = np.asarray(values, dtype=np.float64).reshape(self.values.shape)
        return Block.build(self.name, values, self.labels, self.fixed, self.reference)

    def with_fixed(self, fixed: np.ndarray) -> "Block":
        return Block.build(self.name, self.values, self.labels, fixed, self.reference)


class ParameterSet(Mapping[str, Block]):
    """Ordered, immutable collection of parameter blocks.

    Subclasses that carry model structure beyond the blocks override
    ``kind``, :meth:`metadata` and :meth:`from_blocks` so that parameter
    files can rebuild them.
    """

    kind = "parameters"

    def __init__(self, blocks: Iterable[Block]) -> None:
        self._blocks: Dict[str, Block] = {}
        for block in blocks:
            if block.name in self._blocks:
                raise DimensionError(f"duplicate block '{block.name}'")
            self._blocks[block.name] = block

    # Mapping protocol
    def __getitem__(self, name: str) -> Block:
        return self._blocks[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{b.name}{tuple(b.values.shape)}" for b in self._blocks.values())
        return f"{type(self).__name__}({shapes})"

    def metadata(self) -> Dict[str, Any]:
        """JSON-serialisable structure needed to rebuild this set."""
        return {}

    @classmethod
    def from_blocks(cls, blocks: Iterable[Block], metadata: Dict[str, Any]) -> "ParameterSet":
        return cls(blocks)

    def _rebuild(self, blocks: Iterable[Block]) -> "ParameterSet":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        ParameterSet.__init__(clone, blocks)
        return clone

    def value(self, name: str) -> np.ndarray:
        return self._blocks[name].values

    @property
    def size(self) -> int:
        return sum(b.values.size for b in self._blocks.values())

    def vector(self) -> np.ndarray:
        if not self._blocks:
            return np.zeros(0)
        return np.concatenate([b.values.ravel() for b in self._blocks.values()])

    def free_mask(self) -> np.ndarray:
        if not self._blocks:
            return np.zeros(0, dtype=bool)
        return ~np.concatenate([b.fixed.ravel() for b in self._blocks.values()])

    def reference_mask(self) -> np.ndarray:
        if not self._blocks:
            return np.zeros(0, dtype=bool)
        return np.concatenate([b.reference.ravel() for b in self._blocks.values()])

    @property
    def n_free(self) -> int:
        return int(self.free_mask().sum())

    def labels(self) -> List[str]:
        out: List[str] = []
        for block in self._blocks.values():
            out.extend(block.labels)
        return out

    def free_vector(self) -> np.ndarray:
        return self.vector()[self.free_mask()]

    def with_vector(self, vector: np.ndarray) -> "ParameterSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise DimensionError(f"expected a vector of length {self.size}, got {vector.shape}")
        blocks = []
        offset = 0
        for block in self._blocks.values():
            n = block.values.size
            blocks.append(block.with_values(vector[offset:offset + n]))
            offset += n
        return self._rebuild(blocks)

    def with_free_vector(self, free: np.ndarray) -> "ParameterSet":
        free = np.asarray(free, dtype=np.float64)
        mask = self.free_mask()
        if free.shape != (int(mask.sum()),):
            raise DimensionError(f"expected {int(mask.sum())} free values, got {free.shape}")
        full = self.vector().copy()
        full[mask] = free
        return self.with_vector(full)

    def with_block(self, name: str, values: np.ndarray) -> "ParameterSet":
        return self._rebuild(
            b.with_values(values) if b.name == name else b for b in self._blocks.values()
        )

    def with_fixed(self, name: str, fixed: np.ndarray) -> "ParameterSet":
        return self._rebuild(
            b.with_fixed(fixed) if b.name == name else b for b in self._blocks.values()
        )

    def zero_fixed(self, gradient: np.ndarray) -> np.ndarray:
        """Return ``gradient`` (full length) with fixed entries set to 0."""
        gradient = np.array(gradient, dtype=np.float64)
        gradient[~self.free_mask()] = 0.0
        return gradient

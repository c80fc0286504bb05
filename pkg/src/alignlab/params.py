"""Named parameter collection with a flat global coordinate space.

Every parameter added to a :class:`ParameterStore` occupies a contiguous
range of coordinate ids in [0, store.size), assigned in insertion order.
Subspace masks, perturbations and curvature probes all address parameters
through these ids, so insertion order is part of a model's identity and is
preserved by cloning and checkpointing.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, parameter


class ParameterStore:
    def __init__(self):
        self._names: list[str] = []
        self._tensors: dict[str, Tensor] = {}
        self._starts: dict[str, int] = {}
        self._size = 0
        self._bounds = np.zeros(1, dtype=np.int64)  # cumulative coord offsets

    def add(self, name: str, array) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = parameter(array)
        self._names.append(name)
        self._tensors[name] = t
        self._starts[name] = self._size
        self._size += t.data.size
        self._bounds = np.append(self._bounds, self._size)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._names)

    def names(self) -> list[str]:
        return list(self._names)

    def items(self):
        for n in self._names:
            yield n, self._tensors[n]

    @property
    def size(self) -> int:
        """Total number of scalar coordinates."""
        return self._size

    def offset(self, name: str) -> int:
        """First coordinate id of the named parameter."""
        return self._starts[name]

    def locate(self, coord: int) -> tuple[str, int]:
        """Map a global coordinate id to (parameter name, flat index)."""
        if coord < 0 or coord >= self._size:
            raise IndexError(f"coordinate {coord} outside [0, {self._size})")
        i = int(np.searchsorted(self._bounds, coord, side="right")) - 1
        name = self._names[i]
        return name, int(coord - self._bounds[i])

    def zero_grad(self) -> None:
        for n in self._names:
            self._tensors[n].zero_grad()

    def clone(self) -> "ParameterStore":
        """Deep copy with the same names, order and values; grads start at zero."""
        out = ParameterStore()
        for n in self._names:
            out.add(n, self._tensors[n].data.copy())
        return out

    def copy_from(self, other: "ParameterStore") -> None:
        """Overwrite values in place from a layout-identical store."""
        if other._names != self._names:
            raise ValueError("parameter layouts differ")
        for n in self._names:
            src, dst = other._tensors[n].data, self._tensors[n].data
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {n!r}: {src.shape} vs {dst.shape}")
            dst[...] = src

    def flatten(self) -> np.ndarray:
        """Copy of all values as one vector ordered by coordinate id."""
        return np.concatenate([self._tensors[n].data.reshape(-1) for n in self._names])

    def grad_vector(self) -> np.ndarray:
        return np.concatenate([self._tensors[n].grad.reshape(-1) for n in self._names])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self._size,):
            raise ValueError(f"expected flat vector of length {self._size}, got {vec.shape}")
        for n in self._names:
            t = self._tensors[n]
            lo = self._starts[n]
            t.data[...] = vec[lo:lo + t.data.size].reshape(t.data.shape)

    def checksum(self) -> str:
        """SHA-256 over raw parameter bytes, for bit-exactness assertions."""
        h = hashlib.sha256()
        for n in self._names:
            h.update(np.ascontiguousarray(self._tensors[n].data).tobytes())
        return h.hexdigest()

    def coord_view(self, coords: np.ndarray) -> "CoordView":
        return CoordView(self, coords)


class CoordView:
    """Vectorized read/write access to an arbitrary set of coordinates.

    The view groups coordinates by owning parameter once at construction;
    subsequent get/set/add calls are a handful of fancy-indexing operations.
    Mutation happens in place on the underlying parameter arrays.
    """

    def __init__(self, store: ParameterStore, coords):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim != 1:
            raise ValueError("coords must be a 1-d integer array")
        if coords.size:
            if coords.min() < 0 or coords.max() >= store.size:
                raise IndexError(f"coordinates outside [0, {store.size})")
            if np.any(np.diff(np.sort(coords)) == 0):
                raise ValueError("duplicate coordinates in view")
        self.store = store
        self.coords = coords
        self._groups: list[tuple[Tensor, np.ndarray, slice]] = []
        param_idx = np.searchsorted(store._bounds, coords, side="right") - 1
        order = np.argsort(param_idx, kind="stable")
        self._order = order
        self._inverse = np.empty_like(order)
        self._inverse[order] = np.arange(order.size)
        sorted_pidx = param_idx[order]
        cut = np.flatnonzero(np.diff(sorted_pidx)) + 1
        starts = np.concatenate(([0], cut, [coords.size])) if coords.size else np.array([0, 0])
        for lo, hi in zip(starts[:-1], starts[1:]):
            if lo == hi:
                continue
            pi = int(sorted_pidx[lo])
            name = store._names[pi]
            local = coords[order[lo:hi]] - store._bounds[pi]
            self._groups.append((store._tensors[name], local, slice(int(lo), int(hi))))

    @property
    def n(self) -> int:
        return int(self.coords.size)

    def get(self) -> np.ndarray:
        out = np.empty(self.coords.size, dtype=np.float64)
        for t, local, sl in self._groups:
            out[sl] = t.data.reshape(-1)[local]
        return out[self._inverse]

    def set(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        v = values[self._order]
        for t, local, sl in self._groups:
            t.data.reshape(-1)[local] = v[sl]

    def add(self, delta: np.ndarray) -> None:
        delta = np.asarray(delta, dtype=np.float64)
        d = delta[self._order]
        for t, local, sl in self._groups:
            t.data.reshape(-1)[local] += d[sl]

    def get_grad(self) -> np.ndarray:
        out = np.empty(self.coords.size, dtype=np.float64)
        for t, local, sl in self._groups:
            out[sl] = t.grad.reshape(-1)[local]
        return out[self._inverse]

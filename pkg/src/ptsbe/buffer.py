"""Transition records and a column-store replay buffer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    state: np.ndarray        # encoded observation
    action: np.ndarray       # action as the environment received it
    action_enc: np.ndarray   # action as model input
    reward: float            # extrinsic reward
    next_state: np.ndarray
    done: bool


_FIELDS = ("s", "a", "a_enc", "r", "s2", "done")


class TransitionBuffer:
    """Column store with amortised-doubling growth.

    With ``capacity`` set it becomes a FIFO ring: once full, the oldest
    transition is overwritten. Column views are returned in insertion order.
    """

    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self._cols: dict[str, np.ndarray] | None = None
        self._n = 0          # valid rows
        self._head = 0       # next write slot (ring mode)

    def __len__(self) -> int:
        return self._n

    def _alloc(self, tr: Transition, size: int) -> None:
        s = np.asarray(tr.state, dtype=np.float64)
        a = np.atleast_1d(np.asarray(tr.action, dtype=np.float64))
        ae = np.atleast_1d(np.asarray(tr.action_enc, dtype=np.float64))
        self._cols = {
            "s": np.empty((size,) + s.shape),
            "a": np.empty((size,) + a.shape),
            "a_enc": np.empty((size,) + ae.shape),
            "r": np.empty(size),
            "s2": np.empty((size,) + s.shape),
            "done": np.empty(size, dtype=bool),
        }

    def _grow(self) -> None:
        cols = self._cols
        size = len(cols["r"])
        new = 2 * size if self.capacity is None else min(2 * size, self.capacity)
        for k in _FIELDS:
            arr = np.empty((new,) + cols[k].shape[1:], dtype=cols[k].dtype)
            arr[:size] = cols[k]
            cols[k] = arr

    def add(self, tr: Transition) -> None:
        self.add_batch(
            np.asarray(tr.state)[None], np.atleast_1d(np.asarray(tr.action, dtype=np.float64))[None],
            np.atleast_1d(np.asarray(tr.action_enc, dtype=np.float64))[None],
            np.array([tr.reward]), np.asarray(tr.next_state)[None], np.array([tr.done]),
        )

    def add_batch(self, s, a, a_enc, r, s2, done) -> None:
        n = len(r)
        if n == 0:
            return
        if self._cols is None:
            first = Transition(s[0], a[0], a_enc[0], float(r[0]), s2[0], bool(done[0]))
            start = max(64, n) if self.capacity is None else min(max(64, n), self.capacity)
            self._alloc(first, start)
        data = {"s": s, "a": a, "a_enc": a_enc, "r": r, "s2": s2, "done": done}
        for i in range(n):
            if self.capacity is not None and self._n == self.capacity:
                slot = self._head
                self._head = (self._head + 1) % self.capacity
            else:
                if self._n == len(self._cols["r"]):
                    self._grow()
                slot = self._n
                self._n += 1
            for k in _FIELDS:
                self._cols[k][slot] = data[k][i]

    def extend(self, rows) -> None:
        for tr in rows:
            self.add(tr)

    def _col(self, key: str) -> np.ndarray:
        if self._cols is None:
            raise ValueError("buffer is empty")
        col = self._cols[key][: self._n]
        if self._head:
            col = np.concatenate([col[self._head:], col[: self._head]])
        return col

    def sample_indices(self, rng, size: int) -> np.ndarray:
        return rng.integers(0, self._n, size=size)

    def gather(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        """Rows by physical slot index (order-free use such as minibatches)."""
        return {k: self._cols[k][idx] for k in _FIELDS}

    def __getitem__(self, i: int) -> Transition:
        c = {k: self._col(k)[i] for k in _FIELDS}
        return Transition(c["s"], c["a"], c["a_enc"], float(c["r"]), c["s2"], bool(c["done"]))

    @property
    def states(self) -> np.ndarray:
        return self._col("s")

    @property
    def actions(self) -> np.ndarray:
        return self._col("a")

    @property
    def actions_enc(self) -> np.ndarray:
        return self._col("a_enc")

    @property
    def rewards(self) -> np.ndarray:
        return self._col("r")

    @property
    def next_states(self) -> np.ndarray:
        return self._col("s2")

    @property
    def dones(self) -> np.ndarray:
        return self._col("done")

    def set_rewards(self, r: np.ndarray) -> None:
        """Overwrite rewards (insertion order), e.g. for retrospective augmentation."""
        if self._head:
            r = np.concatenate([r[self.capacity - self._head:], r[: self.capacity - self._head]])
        self._cols["r"][: self._n] = r

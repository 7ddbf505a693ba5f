"""Byte-budgeted, class-balanced store of generated replay samples.

The buffer only ever holds generator output (the exemplar-free rule:
real task data is never stored). Accounting is exact: every item costs
H*W*C*4 bytes of raw float32 payload, and the running total never
exceeds the budget. Eviction removes the oldest item of the currently
most-populated class, breaking count ties by lowest task id then lowest
class id, which keeps classes balanced while preferring recent samples.

File format (little-endian):
  32-byte header: magic ``FNRB`` | u32 version | u64 budget | u64 count
  | 8 reserved bytes; then per item: u32 h, w, c | i64 label | i64
  task_id | raw float32 payload.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError, FormatError

MAGIC = b"FNRB"
VERSION = 1
_UNLIMITED = 0xFFFFFFFFFFFFFFFF


@dataclass
class ReplayItem:
    image: np.ndarray      # [H, W, C] float32
    label: int
    task_id: int

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        if self.image.ndim != 3:
            raise ContractError("replay items store single [H,W,C] images")
        self.label = int(self.label)
        self.task_id = int(self.task_id)

    @property
    def nbytes(self):
        h, w, c = self.image.shape
        return h * w * c * 4


@dataclass
class ReplayBuffer:
    budget_bytes: int = None          # None = unlimited
    items: list = field(default_factory=list)

    @property
    def total_bytes(self):
        return sum(item.nbytes for item in self.items)

    @property
    def per_class_counts(self):
        counts = {}
        for item in self.items:
            counts[item.label] = counts.get(item.label, 0) + 1
        return counts

    def __len__(self):
        return len(self.items)

    def classes(self):
        return sorted(self.per_class_counts)

    def _evict_one(self):
        counts = self.per_class_counts
        top = max(counts.values())
        # candidate classes at the top count; lowest task id, then class id
        def key(label):
            task = min(it.task_id for it in self.items if it.label == label)
            return (task, label)
        victim_class = min((lab for lab, n in counts.items() if n == top), key=key)
        for pos, item in enumerate(self.items):
            if item.label == victim_class:
                del self.items[pos]
                return

    def add_task_samples(self, images, labels, task_id):
        """Append generated samples, then evict until within budget."""
        if len(images) != len(labels):
            raise ContractError("images and labels disagree on length")
        for image, label in zip(images, labels):
            item = ReplayItem(image, label, task_id)
            if self.budget_bytes is not None and item.nbytes > self.budget_bytes:
                raise CapacityError(
                    f"one {item.nbytes}-byte item exceeds the {self.budget_bytes}-byte budget")
            self.items.append(item)
            if self.budget_bytes is not None:
                while self.total_bytes > self.budget_bytes:
                    self._evict_one()
        return self

    def sample_balanced(self, n, rng):
        """Draw n items, round-robin over present classes, seeded."""
        if not self.items:
            raise ContractError("cannot sample from an empty buffer")
        by_class = {}
        for item in self.items:
            by_class.setdefault(item.label, []).append(item)
        order = [self.classes()[i] for i in rng.permutation(len(by_class))]
        quota = {lab: n // len(order) for lab in order}
        for lab in order[: n % len(order)]:
            quota[lab] += 1
        chosen = []
        for lab in order:
            pool = by_class[lab]
            q = quota[lab]
            if q == 0:
                continue
            replace = len(pool) < q
            idx = rng.choice(len(pool), size=q, replace=replace)
            chosen.extend(pool[i] for i in idx)
        final = [chosen[i] for i in rng.permutation(len(chosen))]
        images = np.stack([it.image for it in final])
        labels = np.asarray([it.label for it in final], dtype=np.int64)
        return images, labels

    # ------------------------------------------------------------------
    def to_bytes(self):
        budget = _UNLIMITED if self.budget_bytes is None else int(self.budget_bytes)
        out = [struct.pack("<4sIQQ8x", MAGIC, VERSION, budget, len(self.items))]
        for item in self.items:
            h, w, c = item.image.shape
            out.append(struct.pack("<IIIqq", h, w, c, item.label, item.task_id))
            out.append(item.image.astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < 32:
            raise FormatError("file shorter than the 32-byte header", offset=len(blob))
        magic, version, budget, count = struct.unpack_from("<4sIQQ", blob, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        buf = cls(budget_bytes=None if budget == _UNLIMITED else int(budget))
        offset = 32
        for _ in range(count):
            if offset + 28 > len(blob):
                raise FormatError("truncated item record", offset=offset)
            h, w, c, label, task_id = struct.unpack_from("<IIIqq", blob, offset)
            offset += 28
            nbytes = h * w * c * 4
            if offset + nbytes > len(blob):
                raise FormatError("truncated image payload", offset=offset)
            image = np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=offset)
            offset += nbytes
            buf.items.append(ReplayItem(image.reshape(h, w, c).copy(), label, task_id))
        if offset != len(blob):
            raise FormatError("trailing bytes after final item", offset=offset)
        return buf

    def serialize(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def deserialize(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def summary(self):
        return {
            "items": len(self.items),
            "total_bytes": self.total_bytes,
            "budget_bytes": self.budget_bytes,
            "per_class_counts": {str(k): v for k, v in sorted(self.per_class_counts.items())},
            "tasks": sorted({it.task_id for it in self.items}),
        }

"""
Timestamped camera trajectories, TUM text IO and timestamp association.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DatasetError
from .geometry import Pose

TUM_COLUMNS = ['timestamp', 'tx', 'ty', 'tz', 'qx', 'qy', 'qz', 'qw']


@dataclass
class Trajectory:
    """Ordered (timestamp, Pose) pairs with strictly increasing timestamps."""
    timestamps: List[float] = field(default_factory=list)
    poses: List[Pose] = field(default_factory=list)

    def __post_init__(self):
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses must have the same length")
        if np.any(np.diff(np.asarray(self.timestamps, dtype=np.float64)) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[Tuple[float, Pose]]:
        return iter(zip(self.timestamps, self.poses))

    def append(self, timestamp: float, pose: Pose):
        if self.timestamps and timestamp <= self.timestamps[-1]:
            raise ValueError(f"timestamp {timestamp} is not after {self.timestamps[-1]}")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([pose.translation for pose in self.poses])

    def to_frame(self) -> pd.DataFrame:
        rows = [[t, *pose.translation, *pose.quaternion()] for t, pose in self]
        return pd.DataFrame(rows, columns=TUM_COLUMNS)

    def save(self, path: Union[str, Path]) -> Path:
        """Write ``timestamp tx ty tz qx qy qz qw`` lines with 6 decimals."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, sep=' ', header=False, index=False, float_format='%.6f')
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Trajectory':
        trajectory = cls()
        for line_number, values in read_table(path, len(TUM_COLUMNS)):
            try:
                numbers = [float(v) for v in values[:len(TUM_COLUMNS)]]
            except ValueError as e:
                raise DatasetError(f"malformed trajectory entry in {path}: {e}", line_number=line_number) from e
            quat = np.asarray(numbers[4:8])
            if not np.all(np.isfinite(numbers)) or np.linalg.norm(quat) < 1e-12:
                raise DatasetError(f"invalid pose in {path}", line_number=line_number)
            try:
                trajectory.append(numbers[0], Pose.from_quaternion(quat, numbers[1:4]))
            except ValueError as e:
                raise DatasetError(f"{e} in {path}", line_number=line_number) from e
        return trajectory


def read_table(path: Union[str, Path], min_fields: int) -> List[Tuple[int, List[str]]]:
    """
    Whitespace- or comma-separated rows of a TUM-style text file, skipping ``#`` comments and blanks.

    Args:
        path: Text file
        min_fields: Rows with fewer fields are malformed

    Returns:
        (line number, fields) for every data row
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing index file {path}")
    lines = pd.Series(path.read_text(encoding='utf-8').splitlines(), dtype=object)
    if lines.empty:
        return []
    # index stays aligned with the source line, so errors can point at it
    text = lines.str.replace(r'#.*$', '', regex=True).str.strip()
    text = text[text != '']
    fields = text.str.split(r'[\s,]+', regex=True)
    counts = fields.str.len()
    short = counts[counts < min_fields]
    if not short.empty:
        raise DatasetError(f"malformed line in {path.name}: expected {min_fields} fields, "
                           f"got {int(short.iloc[0])}", line_number=int(short.index[0]) + 1)
    return [(int(index) + 1, list(row)) for index, row in fields.items()]


def associate_timestamps(first: Sequence[float], second: Sequence[float],
                         max_difference: float) -> List[Tuple[int, int]]:
    """
    One-to-one timestamp matching within ``max_difference``, closest pairs first.

    Args:
        first: Timestamps of the first stream
        second: Timestamps of the second stream
        max_difference: Largest accepted |t1 - t2| in seconds

    Returns:
        Index pairs (i, j) sorted by i
    """
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    if first.size == 0 or second.size == 0:
        return []
    order = np.argsort(second, kind='stable')
    sorted_second = second[order]
    lo = np.searchsorted(sorted_second, first - max_difference, side='left')
    hi = np.searchsorted(sorted_second, first + max_difference, side='right')
    counts = hi - lo
    i_idx = np.repeat(np.arange(first.size), counts)
    offsets = np.arange(i_idx.size) - np.repeat(np.cumsum(counts) - counts, counts)
    j_idx = order[np.repeat(lo, counts) + offsets]
    diffs = np.abs(first[i_idx] - second[j_idx])
    keep = diffs <= max_difference
    i_idx, j_idx, diffs = i_idx[keep], j_idx[keep], diffs[keep]

    used_first = np.zeros(first.size, dtype=bool)
    used_second = np.zeros(second.size, dtype=bool)
    matches = []
    for k in np.lexsort((j_idx, i_idx, diffs)):
        i, j = i_idx[k], j_idx[k]
        if used_first[i] or used_second[j]:
            continue
        used_first[i] = used_second[j] = True
        matches.append((int(i), int(j)))
    matches.sort()
    return matches

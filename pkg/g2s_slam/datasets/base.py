"""
Common interface of RGB-D frame sources.
"""

from typing import Iterator, Optional

from ..evaluation.mesh import TriangleMesh
from ..geometry import Frame, Intrinsics
from ..trajectory import Trajectory


class FrameSequence:
    """
    Ordered, re-iterable stream of RGB-D frames.

    Subclasses implement ``__len__`` and ``frame``; iteration always yields
    frames in index order.
    """

    intrinsics: Intrinsics
    ground_truth: Optional[Trajectory] = None
    reference_mesh: Optional[TriangleMesh] = None
    name: str = "sequence"

    def __len__(self) -> int:
        raise NotImplementedError

    def frame(self, index: int) -> Frame:
        raise NotImplementedError

    def __iter__(self) -> Iterator[Frame]:
        for index in range(len(self)):
            yield self.frame(index)

    def frame_timestamp(self, index: int) -> float:
        return self.frame(index).timestamp

"""Host/worker matvecs over a block store."""

from nkscale.fabric.assign import (
    WorkerAssignment,
    assign_workers,
    broadcast_volume,
    communication_volume,
)
from nkscale.fabric.frames import Frame, decode_frame, encode_frame
from nkscale.fabric.host import Fabric, spawn_workers, tcp_fabric

__all__ = [
    "Fabric",
    "Frame",
    "WorkerAssignment",
    "assign_workers",
    "broadcast_volume",
    "communication_volume",
    "decode_frame",
    "encode_frame",
    "spawn_workers",
    "tcp_fabric",
]

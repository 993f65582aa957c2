"""Monocular semantic scene completion, desk scale.

A single RGB image goes through a dual-head transformer encoder (separate
geometry and semantics decoders, the geometry head supervised through a
depth-to-occupancy conversion), is lifted to a voxel volume by line-of-sight
feature projection, and is decoded by a 3D U-Net whose encoder stages run
selective state-space (Mamba) blocks over frustum-reordered voxel sequences.
"""

from ._alloc import tune_allocator

tune_allocator()

__version__ = "0.1.0"

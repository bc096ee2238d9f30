"""Camera-rig-independent workspace representation for tabletop manipulation.

The package lifts multi-camera images into a feature grid anchored to the
robot workspace, pre-trains that representation on voxel occupancy + RGB
reconstruction from synthetic RGB-D data, and fine-tunes a small
language-conditioned policy head on top of it by imitation.
"""

__version__ = "0.1.0"

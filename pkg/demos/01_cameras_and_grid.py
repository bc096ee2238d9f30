"""Tour of the camera model and the workspace grid.

Projects points into a camera, round-trips them through unprojection,
and shows how world positions bin into grid cells.
"""

import numpy as np

from uniview.geometry import (
    CameraIntrinsics,
    CameraRig,
    WorkspaceGrid,
    cell_center,
    look_at_pose,
    project_point,
    rig_to_json,
    unproject_pixel,
    world_to_cell,
)

K = CameraIntrinsics(fx=120.0, fy=120.0, cx=64.0, cy=64.0, width=128, height=128)
pose = look_at_pose(eye=[1.2, 0.4, 0.9], target=[0.5, 0.5, 0.1])

print("== projection ==")
for p in ([0.5, 0.5, 0.1], [0.2, 0.8, 0.0], [2.5, 0.5, 0.1]):
    pix, depth, valid = project_point(K, pose, p)
    print(f"  world {p} -> pixel {np.round(pix, 2)}, depth {depth:.3f} m, valid={valid}")

print("== unprojection round trip ==")
pix, depth, _ = project_point(K, pose, [0.5, 0.5, 0.1])
back = unproject_pixel(K, pose, pix, depth)
print(f"  recovered {np.round(back, 9)} (error {np.abs(back - [0.5, 0.5, 0.1]).max():.2e} m)")

print("== grid binning ==")
grid = WorkspaceGrid()
print(f"  grid dims {grid.dims}, cell {grid.cell_size}, extent {grid.extent} m")
for p in ([0.012, 0.77, 0.33], [0.05, 0.0, 0.0], [-0.2, 0.5, 0.1]):
    idx = world_to_cell(grid, p)
    where = f"cell {idx} centered at {np.round(cell_center(grid, idx), 3)}" if idx else "outside"
    print(f"  {p} -> {where}")

print("== rig serialization ==")
rig = CameraRig(cameras=((K, pose),))
print(rig_to_json(rig)[:200], "...")

# coding: utf-8

# # Fitting a point cloud with 30 small blocks
#
# A synthetic chair of about 2500 surface points is approximated by 30
# blocks of 3 x 3 x 3 points under the Chamfer distance. Only 270 scalars
# are stored, against 7464 for the raw cloud.

import sys

import numpy as np

from f3dgs.io import write_ply
from f3dgs.seeding import chamfer_distance, farthest_point_sampling, fit_coordinates_chamfer
from f3dgs.toy import chair_cloud

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500

cloud = chair_cloud()
print("target points:", len(cloud))

fit = fit_coordinates_chamfer(cloud, num_blocks=30, n=3, steps=steps, log_every=100)
print("stored coordinate scalars:", sum(b.p_x.size * 3 for b in fit.blocks))

# A farthest-point subset that stores the same 270 numbers is the yardstick.

fps = cloud[farthest_point_sampling(cloud, 90)]
print(f"chamfer  blocks {chamfer_distance(fit.points, cloud):.4g}   "
      f"90-point FPS {chamfer_distance(fps, cloud):.4g}")

write_ply("chair_target.ply", cloud)
write_ply("chair_fitted.ply", fit.points)
print("wrote chair_target.ply and chair_fitted.ply")

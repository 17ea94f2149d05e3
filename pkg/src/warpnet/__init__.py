"""warpnet: differentiable spatial warping with a small network stack on top.

Layout:
  tensor   dense feature maps + deterministic counter-based RNG
  gridgen  regular output grids, transform families, analytic Jacobians
  sampler  integer/bilinear/trilinear kernels with exact backward passes
  nn       reverse-mode layer stack, SGD, model builders, checkpoints
  data     digit corpora, distortion recipes, dataset containers
  coloc    triplet-based co-localisation on top of a frozen encoder
  cli      operator commands (prepare/train/eval/warp/gradcheck/coloc)
"""

__version__ = "0.1.0"

"""Dense 3D correspondence between generated radiance fields.

Two residual deformation fields, distilled against a frozen conditioned
generator's own features, map any generated instance through a shared
template so that dense correspondences, texture transfer, label
propagation, and keypoint transfer all reduce to field composition.
"""

__version__ = "0.1.0"

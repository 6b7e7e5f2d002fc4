"""sdfit: differentiable tensorial SDF engine.

Fits an illumination-decoupled signed-distance + color field to posed
multi-view images (volume rendering, then differentiable iso-surface
refinement) and extracts textured triangle meshes.
"""

from .autodiff import Tape, Var, no_grad
from .bundle import RenderBundle
from .cameras import Camera, make_rays, orbit_camera, orbit_rig, project
from .density import BetaSchedule, schedule_beta, sdf_to_density
from .extract import (FlexGrid, Mesh, attach_colors, flexicubes_extract,
                      marching_cubes, marching_cubes_values, reg_loss,
                      sample_grid)
from .field import TensorField, init_field, query, query_batch
from .fit import FitConfig, fit_scene, loss_stage1, loss_stage2
from .heads import (HeadSet, compose_color, decode_color, decode_deform,
                    decode_sdf, decode_weights, init_heads)
from .meshren import raycast_view
from .metrics import chamfer, pproxy, psnr, ssim, volume_iou
from .optim import Adam, cosine_lr
from .synth import SceneSpec, render_gt, scene_sdf, sphere_scene, torus_scene
from .volren import RenderConfig, render_pixel, render_view, sample_ray

__version__ = "0.1.0"

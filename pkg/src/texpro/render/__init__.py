"""Rasterised visibility and differentiable shading of a part-segmented mesh."""
from texpro.render.camera import Camera, look_from_spherical
from texpro.render.mesh import Mesh, MeshError, box_triangles, load_obj, mesh_from_triangles, save_obj
from texpro.render.raster import GBuffer, rasterize, render_conditions, render_part_mask
from texpro.render.scene import AreaLight, SceneLayout, build_scene_layout, geometry_layout
from texpro.render.shading import ShadingSetup, constant_maps, front_camera, render, shade

__all__ = [
    "AreaLight", "Camera", "GBuffer", "Mesh", "MeshError", "SceneLayout", "ShadingSetup",
    "box_triangles", "build_scene_layout", "constant_maps", "front_camera", "geometry_layout",
    "load_obj", "look_from_spherical", "mesh_from_triangles", "rasterize", "render",
    "render_conditions", "render_part_mask", "save_obj", "shade",
]

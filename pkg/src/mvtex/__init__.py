"""Texture painting on meshes with parallel diffusion chains kept consistent through colour-space fusion."""
from .config import ConfigError, RunConfig, parse_config
from .geometry import Mesh, MeshError, TexelTable, Texture, build_texel_table, load_mesh
from .pipeline import (ConsistencyReport, RunResult, Scene, build_scene, consistency_report, paint,
                       paint_multiprompt, reconstruct_final_texture, run_ablation)

__all__ = [
    "ConfigError", "RunConfig", "parse_config", "Mesh", "MeshError", "TexelTable", "Texture", "build_texel_table",
    "load_mesh", "ConsistencyReport", "RunResult", "Scene", "build_scene", "consistency_report", "paint",
    "paint_multiprompt", "reconstruct_final_texture", "run_ablation",
]

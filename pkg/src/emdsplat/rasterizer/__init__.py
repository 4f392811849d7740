from .core import (
    TILE_SIZE,
    Rasterization,
    RenderGrads,
    RenderOutput,
    rasterize,
    render,
    render_backward,
)

__all__ = [
    "TILE_SIZE", "Rasterization", "RenderGrads", "RenderOutput",
    "rasterize", "render", "render_backward",
]

"""clearsplat: weather-robust 3D Gaussian splatting on synthetic scenes.

Modules
-------
scene       Gaussian cloud container and cameras
render      differentiable tile rasterizer (forward and backward)
synth       procedural scene and weather corruption
preprocess  plugin selection, particle filter, occlusion confidence masks
train       masked photometric optimization
metrics     PSNR / SSIM / LPIPS-proxy evaluation
cli         ``clearsplat`` command line
"""

__version__ = "0.1.0"

"""
omnidesk - desk-scale multi-condition human video diffusion.

Modules:
- latent_codec: invertible causal patch codec standing in for a video VAE
- condition_encoders: audio, pose, and text conditioning
- omnidit: dual-stream diffusion transformer denoiser
- training: omni-conditions training strategy and optimization loop
- inference: CFG sampling and long-video chaining
- synth_eval: synthetic talking-sprite corpus and desk metrics
"""

__version__ = "0.3.0"

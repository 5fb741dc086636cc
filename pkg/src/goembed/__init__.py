"""Gradient-origin embeddings for voxel, triplane and MLP radiance fields."""

from .diffusion import (FusionConfig, NoiseSchedule, TokenDenoiser, forward_corrupt,
                        fusion_forward_pass, make_schedule, pseudo_deterministic_recon, sample)
from .embedding import GOEmbedConfig, goembed_encode, goembed_loss, goembed_loss_grad
from .fields import (DecoderHead, FieldParams, FieldSpec, decoder_for, init_field, query,
                     zero_origin)
from .geometry import CameraView, generate_rays, look_at, sample_t
from .metrics import psnr, ssim
from .renderer import (ContractError, RenderConfig, composite, render, render_mse, render_vjp,
                       set_num_threads)
from .training import (PEConfig, ReconConfig, SceneDataset, SSOConfig, TokenBackbone,
                       evaluate_plenoptic, fit_sso, train_goembed_recon, train_plenoptic_encoder)

__version__ = "0.1.0"

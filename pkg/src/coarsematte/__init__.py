"""Human matting trained from a mix of fine and coarse annotations."""
from .degrade import DegradeSpec, binarize, blur, degrade, dilate, erode
from .imagery import Quality, Rng, load_image, load_matte, resize, save_image
from .losses import LossWeights, mpn_loss, mrn_loss, qun_consistency_loss, qun_identity_loss, qun_loss
from .metrics import EvalReport, connectivity_error, evaluate, gradient_error, mse, sad
from .nets import NetConfig, init_params, load_checkpoint, mpn_forward, mrn_forward, qun_forward, save_checkpoint
from .pipeline import MatteResult, ModelBundle, infer, recomposite, refine_external_mask
from .synthdata import (DatasetManifest, ForegroundSample, ManifestRecord, build_dataset, composite,
                        load_manifest, save_manifest)

__version__ = "0.1.0"

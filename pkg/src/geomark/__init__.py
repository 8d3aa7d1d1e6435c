"""Watermarking for radiance fields: embed a binary message into geometry,
render, extract, and measure robustness against recolorization, distortions
and adversarial removal."""

__version__ = "0.1.0"

from .field import FieldConfig, RenderConfig, make_backend, render_image  # noqa: F401
from .sticker import LaplaceGate, MessageBits, MessageSticker, StickerNet  # noqa: F401
from .extractor import ExtractorConfig, ExtractorNet, extract_message  # noqa: F401
from .config import ExperimentConfig, load_config  # noqa: F401
from .experiment import run_experiment  # noqa: F401

"""Small configurations shared by the slower tests."""
from m2hx.backbone import BackboneConfig
from m2hx.model import ModelConfig
from m2hx.pyramid import PyramidConfig
from m2hx.synthdata import SceneSpec

TINY_MODEL = ModelConfig(backbone=BackboneConfig(image_size=32, embed_dim=16, num_blocks=4, num_heads=2,
                                                 tap_layers=(1, 2, 3, 4), lora_blocks=2),
                         pyramid=PyramidConfig(width=8, groups=4))
TINY_DATA = SceneSpec(image_size=32, min_side=6, max_side=18, large_area=144)

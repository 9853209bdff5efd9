from .feature_maps import read_feature_maps, write_feature_maps
from .manifest import SampleRecord, read_manifest, write_manifest
from .netpbm import read_image, write_image

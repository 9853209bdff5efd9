from .config import RunConfig, load_run_config, parse_run_config
from .data import SynthConfig, load_split, synth_generate
from .evaluation import evaluate, export_heatmap
from .formats.checkpoint import read_checkpoint, write_checkpoint
from .multiscale import MultiScaleModel, predict, train_pipeline

__version__ = "0.1.0"

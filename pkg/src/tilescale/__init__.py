"""Tile-size ablation for CNN ground-temperature mapping from drone-style rasters.

Subpackages and modules:

- ``grid``: MCG1 raster format and co-registered grid stacks
- ``terrain``: slope, aspect, feature height and slope variability
- ``solar``: sun position, cast shadow, skyview and clear-sky radiation
- ``features``: five-channel feature stack, meteorological vector, standardizer
- ``synth``: procedural worlds and an oracle temperature with known coupling radius
- ``dataset``: tile extraction, splits, strata and shards
- ``nn``: numpy residual CNN, Adam, training, checkpoints and gradient checks
- ``ablation``: per-size training sweep, stratified errors and saturation scale
"""

__version__ = "0.1.0"

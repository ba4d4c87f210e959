"""
Sampler files.

A fitted sampler is stored as one compressed ``.npz`` archive: the backend
arrays under their own names plus a ``header`` entry holding a JSON document
(format version, kind, layout, draw count, seed, fold and backend settings).
Loading never unpickles.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Type

import numpy as np

from app.core.armed import ArmedLayout
from app.core.errors import DataError
from app.core.uq.base import PointSampler, PosteriorSampler, SamplerKind
from app.core.uq.bnn import BnnSampler
from app.core.uq.dropout import DropoutSampler
from app.core.uq.ensemble import EnsembleSampler
from app.core.uq.swag import SwagSampler

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_KEY = "header"

_REGISTRY: Dict[SamplerKind, Type[PosteriorSampler]] = {
    SamplerKind.NONE: PointSampler,
    SamplerKind.BNN_VI: BnnSampler,
    SamplerKind.SWAG_DIAG: SwagSampler,
    SamplerKind.SWAG_FULL: SwagSampler,
    SamplerKind.MC_DROPOUT: DropoutSampler,
    SamplerKind.ENSEMBLE_INIT: EnsembleSampler,
    SamplerKind.ENSEMBLE_SUBSAMPLE: EnsembleSampler,
}


def save_sampler(sampler: PosteriorSampler, path: str | Path) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    header = {
        "format_version": FORMAT_VERSION,
        **sampler.describe(),
        "layout": sampler.layout.to_dict(),
    }
    arrays = sampler.state()
    if HEADER_KEY in arrays:
        raise DataError(f"sampler state uses the reserved name '{HEADER_KEY}'")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, **{HEADER_KEY: np.array(json.dumps(header))}, **arrays)
    except OSError as e:
        raise DataError(f"cannot write sampler file {path}: {e}") from e
    logger.debug(f"saved {sampler.kind.value} sampler to {path}")
    return path


def load_sampler(path: str | Path) -> PosteriorSampler:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read sampler file {path}: {e}") from e
    if HEADER_KEY not in arrays:
        raise DataError(f"{path}: not a sampler file (no header)")
    header = json.loads(str(arrays.pop(HEADER_KEY)))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(
            f"{path}: sampler format version {version}, expected {FORMAT_VERSION}"
        )
    try:
        kind = SamplerKind(header["kind"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: unknown sampler kind {header.get('kind')!r}") from e
    layout = ArmedLayout.from_dict(header["layout"])
    sampler = _REGISTRY[kind].restore(layout, header, arrays)
    logger.debug(f"loaded {kind.value} sampler from {path}")
    return sampler

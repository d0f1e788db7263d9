"""Model state container shared by trainers, evaluation and the checkpoint
format."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn import Network, NormStats
from .quant import BitWidthSet, LayerQuantParams

# transitional-stats key: (bit of the nearest preceding quantized layer,
# bit of the layer this site normalizes); uniform-precision states use the
# diagonal (b, b).
EdgeKey = tuple[int, int]


@dataclass
class ModelState:
    """Everything needed to evaluate (and usually to keep training) a model.

    ``norm_per_bit`` holds one NormStats per candidate width per site for
    uniform multi-precision states; ``norm_edges`` holds the n^2 transitional
    table per site for mixed states.  Exactly one of the two is set.
    ``stored_ints`` carries highest-width integer weights when the state was
    loaded from shared-mode storage; evaluation then derives every lower
    width from those integers instead of re-rounding float masters.
    """

    net: Network
    bits: BitWidthSet
    qparams: dict[int, LayerQuantParams]
    norm_per_bit: Optional[dict[int, dict[int, NormStats]]] = None
    norm_edges: Optional[dict[int, dict[EdgeKey, NormStats]]] = None
    stored_ints: Optional[dict[int, np.ndarray]] = None
    shared_weight_scale: bool = True

    @property
    def mixed(self) -> bool:
        return self.norm_edges is not None

    def norm_for_uniform(self, bits: int) -> dict[int, NormStats]:
        """Per-site stats for an all-``bits`` pass, whichever table exists."""
        if self.norm_per_bit is not None:
            if bits not in self.norm_per_bit:
                raise KeyError(f"no norm statistics for {bits}-bit evaluation")
            return self.norm_per_bit[bits]
        assert self.norm_edges is not None
        return {site: table[(bits, bits)] for site, table in self.norm_edges.items()}

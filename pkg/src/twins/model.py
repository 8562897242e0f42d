"""Two-stream network: parsing stream and correspondence stream with bidirectional exchange."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Encoder, TapAligner
from .correlation import build_pyramid, build_volume
from .cta import CrossTaskAdapter
from .decoder import MaskDecoder, SegmentationOutput
from .errors import ConfigError
from .refinement import IterationTrace, UpdateBlock, refine
from .uncertainty import UncertaintyHead


@dataclass
class ModelOutput:
    trace: IterationTrace
    sigma: torch.Tensor  # (B, H, W)
    seg: SegmentationOutput

    @property
    def final(self):
        return self.trace.fields[-1]


class TwinsNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        if cfg.mode not in ("stereo", "flow"):
            raise ConfigError(f"mode must be stereo or flow, got {cfg.mode!r}")
        ch = list(cfg.backbone_channels)
        d = cfg.refine_hidden_width
        self.encoder = Encoder(ch)
        # baseline with a separate encoder for the correspondence stream
        self.geo_encoder = Encoder(ch) if cfg.refine_context == "independent" else None
        self.taps = TapAligner(ch, d, cfg.backbone_groups)
        self.update = UpdateBlock(d, cfg.mode, cfg.corr_radius, cfg.corr_levels)
        cta_mode = cfg.cta_mode if cfg.cta_enabled else "identity"
        self.cta = CrossTaskAdapter(ch, d, cfg.cta_heads, cfg.cta_eps, cta_mode, cfg.cta_residual)
        self.decoder = MaskDecoder(ch, cfg.num_classes, cfg.decoder_num_queries or None, cfg.decoder_dim)
        self.uncertainty = UncertaintyHead(cfg.refine_iters, cfg.unc_width, cfg.unc_logsig_clamp, cfg.unc_log_inputs)

    def forward(self, target, source, iters=None, with_seg=True):
        iters = iters or self.cfg.refine_iters
        b = target.shape[0]
        pyr_both, taps_both = self.encoder(torch.cat([target, source]))
        stages_t = [s[:b] for s in pyr_both.stages]
        if self.geo_encoder is None:
            geo_pyr, geo_taps = pyr_both, taps_both
        else:
            geo_pyr, geo_taps = self.geo_encoder(torch.cat([target, source]))

        if self.cfg.corr_source == "early":
            f1 = geo_taps.early[0]
        else:
            f1 = geo_pyr.stages[0]
        volume = build_volume(f1[:b], f1[b:], self.cfg.mode)
        pyr = build_pyramid(volume, self.cfg.mode, self.cfg.corr_levels)

        taps_t = type(geo_taps)([e[:b] for e in geo_taps.early], [l[:b] for l in geo_taps.late])
        aligned_early, aligned_late = self.taps(taps_t)
        trace = refine(self.update, pyr, aligned_early, aligned_late, iters)

        if iters == self.uncertainty.iters:
            sigma = self.uncertainty([f.detach() for f in trace.fields])
        else:
            sigma = trace.fields[-1].new_ones(trace.fields[-1][:, 0].shape)

        seg = None
        if with_seg:
            fused = self.cta(stages_t, trace.final_hidden.levels)
            seg = self.decoder(fused, target.shape[-2:])
        return ModelOutput(trace, sigma, seg)

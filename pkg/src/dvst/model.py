"""Full transmission model: both links, entropy models, JSCC codecs.

Context generators and transforms are single instances shared by the
transmitter and receiver sides (identical weights, different inputs).
Parameter groups exist so the progressive trainer can freeze whole links.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .channel import ChannelConfig, SymbolStream, transmit
from .config import Config
from .entropy import (ConditionalEntropyModel, FactorizedDensity,
                      LaplaceParams, embedding_entropy)
from .jscc import (JsccDecoder, JsccEncoder, RateTokens, ValueSet, allocate,
                   quantize_rate)
from .transform import (AnalysisTransform, CodewordContextNet,
                        FeatureContextNet, FlowEstimator, HyperDecoder,
                        HyperEncoder, MotionAnalysis, MotionSynthesis,
                        SynthesisTransform, TemporalPriorEncoder)

CHECKPOINT_FORMAT = 1


class DvstModel(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        c_pl = cfg["model.c_primary"]
        c_mv = cfg["model.c_motion"]
        m = cfg["model.m_dim"]
        c_hyper = cfg["model.c_hyper"]
        c_ctx = cfg["model.c_context"]
        blocks = cfg["model.jscc_blocks"]
        heads = cfg["model.jscc_heads"]
        window = cfg["model.jscc_window"]
        self.m_dim = m
        self.ctx_channels = c_ctx
        self.v_pl = ValueSet(tuple(cfg["rate.v_pl"]))
        self.v_ml = ValueSet(tuple(cfg["rate.v_ml"]))
        self.entropy_mode = cfg["model.entropy_mode"]
        # Rate adaptation can be disabled for the ablation variant: constant
        # per-embedding costs, no rate tokens.
        self.rate_allocation = True

        self.flow_net = FlowEstimator(width=cfg["model.flow_width"])

        self.ctx_feature = FeatureContextNet(c_ctx)
        self.ctx_codeword = CodewordContextNet(m)
        self.analysis = AnalysisTransform(c_ctx, c_pl, m)
        self.synthesis = SynthesisTransform(c_ctx, c_pl, m)
        self.hyper_enc = HyperEncoder(m, c_hyper)
        self.hyper_dec = HyperDecoder(c_hyper, 2 * m)
        self.temporal_prior = TemporalPriorEncoder(c_ctx, c_pl, m)
        self.entropy_pl = ConditionalEntropyModel(
            m, hier_channels=2 * m, temporal_channels=m, mode=self.entropy_mode)
        self.z_density = FactorizedDensity(c_hyper)
        self.jscc_enc = JsccEncoder(m, self.v_pl, blocks, heads, window,
                                    with_context=True)
        self.jscc_dec = JsccDecoder(m, self.v_pl, blocks, heads, window,
                                    with_context=True)
        self.tokens_pl = RateTokens(self.v_pl, m)

        self.mv_analysis = MotionAnalysis(c_mv, m)
        self.mv_synthesis = MotionSynthesis(c_mv, m)
        self.mv_hyper_enc = HyperEncoder(m, c_hyper)
        self.mv_hyper_dec = HyperDecoder(c_hyper, 2 * m)
        self.entropy_mv = ConditionalEntropyModel(
            m, hier_channels=2 * m, temporal_channels=None, mode=self.entropy_mode)
        self.z_density_mv = FactorizedDensity(c_hyper)
        self.mv_jscc_enc = JsccEncoder(m, self.v_ml, blocks, heads, window,
                                       with_context=False)
        self.mv_jscc_dec = JsccDecoder(m, self.v_ml, blocks, heads, window,
                                       with_context=False)
        self.tokens_ml = RateTokens(self.v_ml, m)

    # ---- parameter groups -------------------------------------------------

    def parameter_groups(self) -> dict:
        return {
            "flow": [self.flow_net],
            "motion_transform": [self.mv_analysis, self.mv_synthesis,
                                 self.mv_hyper_enc, self.mv_hyper_dec,
                                 self.entropy_mv, self.z_density_mv],
            "motion_jscc": [self.mv_jscc_enc, self.mv_jscc_dec, self.tokens_ml],
            "primary_transform": [self.analysis, self.synthesis,
                                  self.ctx_feature, self.hyper_enc,
                                  self.hyper_dec, self.temporal_prior,
                                  self.entropy_pl, self.z_density],
            "primary_jscc": [self.jscc_enc, self.jscc_dec, self.tokens_pl,
                             self.ctx_codeword],
        }

    def group_parameters(self, names) -> list:
        params = []
        groups = self.parameter_groups()
        for name in names:
            for module in groups[name]:
                params.extend(module.parameters())
        return params

    def set_trainable(self, active_groups) -> None:
        groups = self.parameter_groups()
        for name, modules in groups.items():
            flag = name in active_groups
            for module in modules:
                for p in module.parameters():
                    p.requires_grad_(flag)

    # ---- shared forward pieces ---------------------------------------------

    def zero_contexts(self, height: int, width: int, device=None, dtype=None):
        """Exact zero grids for I-frame coding."""
        device = device or next(self.parameters()).device
        dtype = dtype or torch.float32
        feat = torch.zeros(1, self.ctx_channels, height, width,
                           device=device, dtype=dtype)
        code = torch.zeros(1, self.m_dim, height // 32, width // 32,
                           device=device, dtype=dtype)
        return feat, code

    def contexts_from(self, x_ref: torch.Tensor, y_ref: torch.Tensor,
                      motion: torch.Tensor):
        """Feature- and codeword-domain contexts for one link end."""
        feat = self.ctx_feature.make_feature_context(x_ref, motion)
        code = self.ctx_codeword.make_codeword_context(y_ref, motion)
        return feat, code

    def primary_rate_params(self, z_view: torch.Tensor, latent_view,
                            feature_ctx: torch.Tensor) -> LaplaceParams:
        hier = self.hyper_dec(z_view, latent_view.shape[-2:])
        temporal = self.temporal_prior(feature_ctx)
        return self.entropy_pl.fuse_priors(hier, latent_view, temporal)

    def motion_rate_params(self, z_view: torch.Tensor, latent_view) -> LaplaceParams:
        hier = self.mv_hyper_dec(z_view, latent_view.shape[-2:])
        return self.entropy_mv.fuse_priors(hier, latent_view)

    def primary_costs(self, y_bar: torch.Tensor, params: LaplaceParams,
                      eta: float, ste: bool = False):
        """(entropy bits, continuous cost, quantized cost) per embedding."""
        bits = embedding_entropy(y_bar, params)
        if not self.rate_allocation:
            k_bar = torch.full_like(bits, float(self.cfg["ablation.fixed_k_pl"]))
            return bits, k_bar, k_bar
        k = allocate(bits, eta)
        return bits, k, quantize_rate(k, self.v_pl, ste=ste)

    def motion_costs(self, y_bar: torch.Tensor, params: LaplaceParams,
                     eta: float, ste: bool = False):
        bits = embedding_entropy(y_bar, params)
        if not self.rate_allocation:
            k_bar = torch.full_like(bits, float(self.cfg["ablation.fixed_k_ml"]))
            return bits, k_bar, k_bar
        k = allocate(bits, eta)
        return bits, k, quantize_rate(k, self.v_ml, ste=ste)

    def _tokens(self, link: str):
        if not self.rate_allocation:
            return None
        return self.tokens_pl if link == "pl" else self.tokens_ml

    def primary_encode(self, y, codeword_ctx, k_bar) -> SymbolStream:
        return self.jscc_enc.encode(y, codeword_ctx, k_bar, self._tokens("pl"))

    def primary_decode(self, stream, codeword_ctx, k_bar) -> torch.Tensor:
        return self.jscc_dec.decode(stream, codeword_ctx, k_bar, self._tokens("pl"))

    def motion_encode(self, y_mv, k_bar) -> SymbolStream:
        return self.mv_jscc_enc.encode(y_mv, None, k_bar, self._tokens("ml"))

    def motion_decode(self, stream, k_bar) -> torch.Tensor:
        return self.mv_jscc_dec.decode(stream, None, k_bar, self._tokens("ml"))

    def transmit_stream(self, stream: SymbolStream, chan: ChannelConfig,
                        generator=None) -> SymbolStream:
        if len(stream) == 0:
            return stream
        return transmit(stream, chan, generator=generator)


@dataclass
class Checkpoint:
    model: DvstModel
    cfg: Config
    stage: int
    rng: dict | None = None


def save_checkpoint(model: DvstModel, cfg: Config, stage: int, path,
                    rng: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "stage": int(stage),
        "config": cfg.to_dict(),
        "state": model.state_dict(),
        "rng": rng if rng is not None else capture_rng(),
        "rate_allocation": model.rate_allocation,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')}")
    cfg = Config(payload["config"])
    model = DvstModel(cfg)
    model.rate_allocation = payload.get("rate_allocation", True)
    model.load_state_dict(payload["state"])
    model.eval()
    return Checkpoint(model=model, cfg=cfg, stage=payload["stage"],
                      rng=payload.get("rng"))


def capture_rng() -> dict:
    return {"torch": torch.get_rng_state()}


def restore_rng(rng: dict) -> None:
    if rng and "torch" in rng:
        torch.set_rng_state(rng["torch"])

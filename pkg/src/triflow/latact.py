"""Latent-action VAE over flow-RGB images.

A small strided-convolution encoder compresses a flow image into T tokens of
width C with a diagonal-Gaussian posterior; a mirrored transposed-convolution
decoder reconstructs the flow image; an affine projection of the concatenated
tokens gives the 14-dim latent action, which doubles as the action estimate
for the weak alignment loss. Training mixes 90% unlabeled flow images with
10% action-labeled ones.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import flowfield
from .errors import DatasetError, ShapeError
from .nnet import AdamW, ParamGroups, grad_eval

LOGVAR_CLAMP = 20.0
LATENT_DIM = 14
LABELED_FRACTION = 0.1


@dataclass
class VaeConfig:
    frame_hw: int = 16
    tokens: int = 4              # T
    token_width: int = 64        # C; the source design uses 512
    hidden_channels: tuple = (16, 32)
    latent_dim: int = LATENT_DIM
    lambda_align: float = 1.0
    beta_kl: float = 1e-6

    def __post_init__(self):
        side = self.frame_hw // 8  # three stride-2 stages
        if side * side != self.tokens:
            raise ShapeError(
                f"tokens={self.tokens} incompatible with frame_hw={self.frame_hw} "
                f"(three downsampling stages give {side * side} token positions)")


@dataclass
class VaeLossReport:
    recon: float
    align: float
    kl: float
    total: float


class FlowVae(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.hidden_channels
        C = cfg.token_width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c2, C, 3, stride=2, padding=1), nn.GELU(),
        )
        self.posterior_head = nn.Conv2d(C, 2 * C, 1)
        # start near-deterministic: tiny logvar bias keeps early samples close
        # to mu so the decoder gets a usable signal from step one
        with torch.no_grad():
            self.posterior_head.bias[C:].fill_(-6.0)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(C, c2, 4, stride=2, padding=1), nn.GELU(),
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1), nn.GELU(),
            nn.ConvTranspose2d(c1, 3, 4, stride=2, padding=1),
        )
        with torch.no_grad():
            self.decoder[-1].bias.fill_(1.0)  # flow images are white-dominated
        self.project = nn.Linear(cfg.tokens * C, cfg.latent_dim)

    def param_groups(self) -> ParamGroups:
        enc = list(self.encoder.named_parameters(prefix="encoder"))
        enc += list(self.posterior_head.named_parameters(prefix="posterior_head"))
        return ParamGroups({
            "vae_encoder": enc,
            "vae_decoder": list(self.decoder.named_parameters(prefix="decoder")),
            "vae_project": list(self.project.named_parameters(prefix="project")),
        })

    def encode(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """frames [B,H,W,3] in [0,1] -> (mu, logvar), each [B,T,C]."""
        hw = self.cfg.frame_hw
        if frames.ndim != 4 or frames.shape[1:] != (hw, hw, 3):
            raise ShapeError(f"expected [B,{hw},{hw},3] input, got {tuple(frames.shape)}")
        h = self.encoder(frames.permute(0, 3, 1, 2))
        stats = self.posterior_head(h)                       # [B,2C,s,s]
        B, twoC = stats.shape[:2]
        tokens = stats.permute(0, 2, 3, 1).reshape(B, self.cfg.tokens, twoC)
        mu, logvar = tokens.chunk(2, dim=-1)
        return mu, logvar

    def decode(self, tokens: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """tokens [B,T,C] -> frames [B,H,W,3], clamped to [0,1] unless told not to."""
        B = tokens.shape[0]
        side = self.cfg.frame_hw // 8
        if tokens.shape[1:] != (self.cfg.tokens, self.cfg.token_width):
            raise ShapeError(f"expected [B,{self.cfg.tokens},{self.cfg.token_width}] tokens, "
                             f"got {tuple(tokens.shape)}")
        h = tokens.reshape(B, side, side, self.cfg.token_width).permute(0, 3, 1, 2)
        out = self.decoder(h).permute(0, 2, 3, 1)
        return out.clamp(0.0, 1.0) if clamp else out

    def project_latent(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens [B,T,C] -> 14-dim latent action; this is also a_pred."""
        return self.project(tokens.reshape(tokens.shape[0], -1))


def vae_sample(mu: torch.Tensor, logvar: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeError(f"shape mismatch: mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape}")
    logvar = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu + torch.exp(0.5 * logvar) * noise


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-dimension KL(N(mu, sigma^2) || N(0, 1))."""
    logvar = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    return 0.5 * (mu ** 2 + torch.exp(logvar) - 1.0 - logvar)


def pad_action_labels(labels: torch.Tensor, dim: int = LATENT_DIM) -> torch.Tensor:
    if labels.shape[-1] > dim:
        raise ShapeError(f"labels have {labels.shape[-1]} dims, at most {dim} supported")
    if labels.shape[-1] == dim:
        return labels
    pad = torch.zeros(*labels.shape[:-1], dim - labels.shape[-1], dtype=labels.dtype)
    return torch.cat([labels, pad], dim=-1)


def vae_loss(model: FlowVae, frames: torch.Tensor,
             labels: torch.Tensor | None = None,
             label_mask: torch.Tensor | None = None,
             noise: torch.Tensor | None = None,
             generator: torch.Generator | None = None):
    """Total VAE loss on one batch.

    ``labels`` are per-sample action vectors (padded to 14 dims); ``label_mask``
    marks which rows actually carry a label. Returns (loss tensor, report).
    """
    mu, logvar = model.encode(frames)
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    tokens = vae_sample(mu, logvar, noise)

    recon = ((model.decode(tokens, clamp=False) - frames) ** 2).mean()
    kl = gaussian_kl(mu, logvar).sum(dim=(1, 2)).mean()

    if labels is not None and label_mask is not None and label_mask.any():
        a_pred = model.project_latent(tokens)
        a_real = pad_action_labels(labels.to(a_pred.dtype))
        per_sample = ((a_real - a_pred) ** 2).sum(dim=-1)
        align = per_sample[label_mask].mean()
    else:
        align = torch.zeros((), dtype=recon.dtype)

    total = recon + model.cfg.lambda_align * align + model.cfg.beta_kl * kl
    report = VaeLossReport(recon=recon.item(), align=align.item(),
                           kl=kl.item(), total=total.item())
    return total, report


@dataclass
class VaeCorpus:
    """Flow images (as raw flow vectors plus the dataset max magnitude).

    Labels, when present, are per-flow action vectors of dim <= 14.
    """
    flows: np.ndarray                       # (N, H, W, 2)
    max_mag: float
    labels: np.ndarray | None = None        # (N, d) or None

    def __len__(self):
        return len(self.flows)

    def flow_rgb(self, idx: np.ndarray) -> np.ndarray:
        out = np.empty((len(idx), self.flows.shape[1], self.flows.shape[2], 3), dtype=np.float32)
        for j, i in enumerate(idx):
            f = flowfield.FlowField(self.flows[i], max_mag=self.max_mag)
            out[j] = flowfield.flow_to_rgb(f)
        return out


def labeled_counts(batch_size: int) -> tuple[int, int]:
    n_lab = max(1, round(LABELED_FRACTION * batch_size))
    return batch_size - n_lab, n_lab


def train_vae(model: FlowVae, unlabeled: VaeCorpus, labeled: VaeCorpus,
              steps: int, batch_size: int = 32, lr: float = 1e-3,
              seed: int = 0, csv_path: str | None = None,
              lambda_align: float | None = None) -> list[VaeLossReport]:
    """Gradient-descend the VAE on a 90/10 unlabeled/labeled mix."""
    if unlabeled is None or len(unlabeled) == 0:
        raise DatasetError("train_vae needs a non-empty unlabeled flow corpus")
    if labeled is None or len(labeled) == 0 or labeled.labels is None:
        raise DatasetError("train_vae needs a non-empty labeled (flow, action) corpus")
    if lambda_align is not None:
        model.cfg.lambda_align = lambda_align

    groups = model.param_groups()
    groups.set_trainable(groups.names())
    params = [p for g in groups.names() for p in groups.parameters(g)]
    opt = AdamW(params, lr=lr)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    n_unlab, n_lab = labeled_counts(batch_size)

    history = []
    for step_i in range(steps):
        iu = rng.integers(0, len(unlabeled), size=n_unlab)
        il = rng.integers(0, len(labeled), size=n_lab)
        frames = np.concatenate([unlabeled.flow_rgb(iu), labeled.flow_rgb(il)])
        frames_t = torch.from_numpy(frames)
        labels = torch.zeros(batch_size, LATENT_DIM)
        labels[n_unlab:] = pad_action_labels(torch.from_numpy(
            labeled.labels[il].astype(np.float32)))
        mask = torch.zeros(batch_size, dtype=torch.bool)
        mask[n_unlab:] = True

        report_box = {}

        def loss_fn(batch):
            loss, report = vae_loss(model, batch[0], batch[1], batch[2], generator=gen)
            report_box["r"] = report
            return loss

        _, grads = grad_eval(groups, loss_fn, (frames_t, labels, mask))
        flat_grads = [g for name in groups.names() for g in grads[name]]
        opt.step(flat_grads)
        history.append(report_box["r"])

    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "recon", "align", "kl", "total"])
            for i, r in enumerate(history):
                writer.writerow([i, f"{r.recon:.10g}", f"{r.align:.10g}",
                                 f"{r.kl:.10g}", f"{r.total:.10g}"])
    return history


def encode_flows(model: FlowVae, flows: np.ndarray, max_mag: float,
                 batch_size: int = 256) -> np.ndarray:
    """Zero-noise latents [N,14] for a stack of raw flow fields."""
    corpus = VaeCorpus(flows, max_mag)
    out = np.empty((len(flows), model.cfg.latent_dim), dtype=np.float32)
    with torch.no_grad():
        for lo in range(0, len(flows), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(flows)))
            rgb = torch.from_numpy(corpus.flow_rgb(idx))
            mu, _ = model.encode(rgb)
            out[idx] = model.project_latent(mu).numpy()
    return out


def latent_sequence(model: FlowVae, frames: np.ndarray, start: int,
                    n_latents: int, stride: int, max_mag: float,
                    flows: np.ndarray | None = None) -> np.ndarray:
    """Latent actions for one window: one latent per video-rate frame pair.

    ``start`` indexes the condition frame; latent j comes from the flow
    between frames start+stride*j and start+stride*(j+1). Precomputed flows
    (indexed by their first frame) are used when given, otherwise flow is
    estimated from pixels.
    """
    last = start + stride * n_latents
    if start < 0 or last >= len(frames) + (0 if flows is None else 1):
        if last > len(frames) - 1:
            raise ShapeError(f"window [{start}, {last}] out of range for {len(frames)} frames")
    window_flows = []
    for j in range(n_latents):
        i = start + stride * j
        if flows is not None:
            if i >= len(flows):
                raise ShapeError(f"flow index {i} out of range for {len(flows)} flows")
            window_flows.append(flows[i])
        else:
            f = flowfield.block_match_flow(frames[i], frames[i + stride])
            window_flows.append(f.vectors)
    return encode_flows(model, np.stack(window_flows), max_mag)

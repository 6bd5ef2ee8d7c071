"""End-to-end training through the noisy channel, evaluation sweeps, ablations."""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import metrics
from .channel import ChannelConfig, Normalizer, noise_std_per_real_dim
from .checkpoint import load_checkpoint, load_optimizer_state, save_checkpoint
from .codec import Codec, CodecConfig
from .geometry import PointCloud, estimate_normals
from .metrics import MetricsConfig


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


def derive_seed(*parts) -> int:
    """Stable 63-bit stream seed from arbitrary labels; keeps RNG use stateless."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class TrainConfig:
    snr_train_db: float
    n: int
    num_points: int
    d_f: int
    epochs: int
    batch_size: int
    lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 20
    seed: int = 0
    head: str = "maxpool"
    proj_t: int = 0
    k: int = 16
    r: float = 0.25
    normalizer_momentum: float = 0.01
    hybrid_coords: bool = False  # deliver quantized true coordinates to the decoder
    hybrid_quant_bits: int = 16

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")

    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            num_points=self.num_points, n=self.n, d_f=self.d_f, k=self.k, r=self.r,
            head=self.head, proj_t=self.proj_t,
        )


@dataclass
class EpochRecord:
    epoch: int
    mean_chamfer: float
    lr: float
    power_ratio: float  # mean ||z||^2 / (n/2) over the epoch's codewords
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    CSV_HEADER = "epoch,mean_chamfer,lr,power_ratio,seconds"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.mean_chamfer:.10g},{r.lr:.10g},{r.power_ratio:.10g},{r.seconds:.3f}"
            )
        return "\n".join(lines) + "\n"


def chamfer_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Differentiable symmetric Chamfer distance, mean over the batch.

    pred, target: (B, N, 3). Matches metrics.chamfer up to float precision.
    """
    d2 = ((pred[:, :, None, :] - target[:, None, :, :]) ** 2).sum(dim=-1)  # (B, Np, Nt)
    return (d2.min(dim=2).values.mean(dim=1) + d2.min(dim=1).values.mean(dim=1)).mean()


def clouds_to_tensor(clouds: list[PointCloud], dtype=torch.float32) -> torch.Tensor:
    counts = {c.n_points for c in clouds}
    if len(counts) != 1:
        raise ValueError(f"clouds must share a point count, got {sorted(counts)}")
    return torch.tensor(np.stack([c.points for c in clouds]), dtype=dtype)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def transmit_latent(
    z_tilde: torch.Tensor,
    normalizer: Normalizer,
    snr_db: float,
    noise_seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Power-normalize and add seeded channel noise; returns (z, y).

    Noise is drawn per real dimension with variance N0/2, the exact real-valued
    view of the complex AWGN channel.
    """
    z = (z_tilde - normalizer.mu) / normalizer.sigma
    std = noise_std_per_real_dim(ChannelConfig(snr_db))
    if std == 0.0:
        return z, z
    gen = torch.Generator().manual_seed(noise_seed)
    noise = torch.randn(z.shape, generator=gen, dtype=z.dtype) * std
    return z, z + noise


def train(
    cfg: TrainConfig,
    clouds: list[PointCloud],
    resume_from=None,
    checkpoint_dir=None,
    log_every: int | None = None,
) -> tuple[Codec, Normalizer, TrainLog]:
    """Adam-optimize the codec end to end through the training-SNR channel.

    Deterministic given cfg and the dataset: parameter init, shuffling, and
    channel noise all derive from cfg.seed; noise is resampled every step.
    When checkpoint_dir is given, the final model is saved there together
    with the Adam state, so a later run can resume exactly.
    """
    data = clouds_to_tensor(clouds)
    if data.shape[1] != cfg.num_points:
        raise ValueError(f"dataset has {data.shape[1]} points per cloud, expected {cfg.num_points}")

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    codec = Codec(cfg.codec_config())
    normalizer = Normalizer(momentum=cfg.normalizer_momentum)
    optimizer = torch.optim.Adam(codec.parameters(), lr=cfg.lr)

    start_epoch = 0
    log = TrainLog()
    if resume_from is not None:
        codec, normalizer, manifest = load_checkpoint(resume_from)
        normalizer.frozen = False
        normalizer.reset_calibration()  # training resumes from the moving stats
        opt_state = load_optimizer_state(resume_from, manifest)
        optimizer = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        start_epoch = int(manifest["train_state"].get("next_epoch", 0))

    codec.train()
    count = data.shape[0]
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.Generator(
            np.random.PCG64(derive_seed(cfg.seed, "shuffle", epoch))
        ).permutation(count)
        losses, powers = [], []
        t0 = time.perf_counter()
        for step, lo in enumerate(range(0, count, cfg.batch_size)):
            batch = data[torch.from_numpy(order[lo : lo + cfg.batch_size])]
            z_tilde, x_star, _ = codec.encode(batch)
            normalizer.update(z_tilde.detach().cpu().numpy())
            z, y = transmit_latent(
                z_tilde, normalizer, cfg.snr_train_db,
                derive_seed(cfg.seed, "noise", epoch, step),
            )
            if cfg.hybrid_coords:
                levels = 2 ** cfg.hybrid_quant_bits - 1
                coords = torch.round(x_star.detach().clamp(0, 1) * levels) / levels
                out = codec.decode(y, coords=coords)
            else:
                out = codec.decode(y)
            loss = chamfer_loss(out.points, batch)
            loss_value = float(loss.detach())
            if not np.isfinite(loss_value):
                raise DivergenceError(epoch, step, loss_value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss_value)
            powers.append(float((z.detach() ** 2).sum(dim=1).mean()) / (codec.cfg.n_latent / 2))
        record = EpochRecord(
            epoch=epoch,
            mean_chamfer=float(np.mean(losses)),
            lr=lr,
            power_ratio=float(np.mean(powers)),
            seconds=time.perf_counter() - t0,
        )
        log.records.append(record)
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            print(
                f"epoch {epoch:4d}  chamfer {record.mean_chamfer:.5f}  "
                f"lr {lr:.2e}  power {record.power_ratio:.3f}",
                flush=True,
            )
    # Final statistics snapshot: the latent scale drifts while the model
    # learns, so (mu, sigma) are re-recorded from the finished codec in
    # inference mode before freezing. Keeps E||z||^2 on the n/2 budget.
    codec.eval()
    with torch.no_grad():
        latents = []
        for lo in range(0, count, cfg.batch_size):
            z_tilde, _, _ = codec.encode(data[lo : lo + cfg.batch_size])
            latents.append(z_tilde.cpu().numpy())
    normalizer.calibrate(np.concatenate(latents))
    normalizer.freeze()
    if checkpoint_dir is not None:
        save_checkpoint(
            checkpoint_dir, codec, normalizer,
            train_state={"next_epoch": cfg.epochs, "train_config": asdict(cfg)},
            optimizer=optimizer,
        )
    return codec, normalizer, log


def _clouds_with_normals(clouds: list[PointCloud], k: int = 16) -> list[PointCloud]:
    out = []
    for c in clouds:
        if c.normals is None:
            normals, _ = estimate_normals(c, k=min(k, c.n_points))
            c = PointCloud(c.points, c.features, normals)
        out.append(c)
    return out


def encode_codewords(codec: Codec, normalizer: Normalizer, clouds: list[PointCloud]) -> torch.Tensor:
    """Frozen-statistics codewords z for every cloud, shape (C, n_latent)."""
    codec.eval()
    with torch.no_grad():
        z_tilde, _, _ = codec.encode(clouds_to_tensor(clouds))
        return (z_tilde - normalizer.mu) / normalizer.sigma


def evaluate(
    codec: Codec,
    normalizer: Normalizer,
    clouds: list[PointCloud],
    snr_list: list[float],
    trials: int = 8,
    seed: int = 0,
    mcfg: MetricsConfig | None = None,
    scheme: str = "jscc",
) -> list[dict]:
    """Mean D1/D2/Chamfer per test SNR over dataset x noise draws.

    Pure evaluation: parameters and normalizer are read-only throughout.
    """
    mcfg = mcfg or MetricsConfig()
    originals = _clouds_with_normals(clouds, k=mcfg.normals_k)
    codec.eval()
    z = encode_codewords(codec, normalizer, clouds)
    std_dtype = z.dtype
    rows = []
    for snr_db in snr_list:
        std = noise_std_per_real_dim(ChannelConfig(snr_db))
        d1s, d2s, chs = [], [], []
        for ci, orig in enumerate(originals):
            # Seeded by SNR value, not list position: fanning a sweep out over
            # workers must not change the draws.
            gen = torch.Generator().manual_seed(derive_seed(seed, "eval", repr(snr_db), ci))
            noise = torch.randn((trials, z.shape[1]), generator=gen, dtype=std_dtype) * std
            with torch.no_grad():
                out = codec.decode(z[ci : ci + 1] + noise)
            pts = out.points.cpu().numpy().astype(np.float64)
            for t in range(trials):
                rec = PointCloud(pts[t])
                d1s.append(metrics.d1(orig, rec, mcfg).db)
                d2s.append(metrics.d2(orig, rec, mcfg).db)
                chs.append(metrics.chamfer(orig.points, pts[t], mcfg.backend))
        rows.append({
            "snr_db": snr_db,
            "d1_db": float(np.mean(d1s)),
            "d2_db": float(np.mean(d2s)),
            "chamfer": float(np.mean(chs)),
            "scheme": scheme,
            "n": codec.cfg.n_latent,
            "trials": trials,
        })
    return rows


def ablate_latent_head(
    cfg: TrainConfig,
    train_clouds: list[PointCloud],
    eval_clouds: list[PointCloud],
    snr_list: list[float],
    trials: int = 8,
) -> list[dict]:
    """Train max-pool and linear-projection heads on identical data/seed; compare D1."""
    proj_t = max(1, cfg.n // (cfg.num_points // 16))
    rows = []
    for head, extra in (("maxpool", {}), ("projection", {"proj_t": proj_t})):
        head_cfg = replace(cfg, head=head, **extra)
        codec, normalizer, _ = train(head_cfg, train_clouds)
        rows += evaluate(
            codec, normalizer, eval_clouds, snr_list, trials=trials,
            seed=cfg.seed, scheme=f"head-{head}",
        )
    return rows


def ablate_refinement(
    codec: Codec,
    normalizer: Normalizer,
    clouds: list[PointCloud],
    snr_db: float,
    trials: int = 8,
    seed: int = 0,
) -> dict:
    """Chamfer of the decoder's initial vs refined coordinates against the
    encoder-side downsampled coordinates."""
    codec.eval()
    with torch.no_grad():
        _, x_star, _ = codec.encode(clouds_to_tensor(clouds))
    z = encode_codewords(codec, normalizer, clouds)
    std = noise_std_per_real_dim(ChannelConfig(snr_db))
    initial, refined = [], []
    for ci in range(z.shape[0]):
        gen = torch.Generator().manual_seed(derive_seed(seed, "refine", ci))
        noise = torch.randn((trials, z.shape[1]), generator=gen, dtype=z.dtype) * std
        with torch.no_grad():
            out = codec.decode(z[ci : ci + 1] + noise)
        target = x_star[ci].cpu().numpy().astype(np.float64)
        for t in range(trials):
            initial.append(metrics.chamfer(out.x_initial[t].numpy(), target))
            refined.append(metrics.chamfer(out.x_refined[t].numpy(), target))
    improved = np.mean([r < i for r, i in zip(refined, initial)])
    return {
        "snr_db": snr_db,
        "chamfer_initial": float(np.mean(initial)),
        "chamfer_refined": float(np.mean(refined)),
        "improved_fraction": float(improved),
        "trials": trials,
    }


def quantize_unit(x: np.ndarray, bits: int) -> np.ndarray:
    """Uniform scalar quantization of [0,1] coordinates at the given bit depth."""
    levels = 2 ** bits - 1
    return np.round(np.clip(x, 0.0, 1.0) * levels) / levels


def coordinate_cost_bits(num_coords: int, quant_bits: int) -> int:
    """Digital cost of delivering num_coords 3D coordinates."""
    return num_coords * 3 * quant_bits


def hybrid_experiment(
    codec: Codec,
    normalizer: Normalizer,
    clouds: list[PointCloud],
    snr_db: float,
    quant_bits: int = 16,
    trials: int = 8,
    seed: int = 0,
    mcfg: MetricsConfig | None = None,
    hybrid_codec: Codec | None = None,
    hybrid_normalizer: Normalizer | None = None,
) -> dict:
    """Features-only vs hybrid decode where quantized true coordinates are
    delivered error-free and the coordinate heads are bypassed.

    By default the trained codec itself is rerun with provided coordinates.
    Because the refinement/upsampling heads co-adapt to reconstructed
    coordinates, a fair hybrid comparison uses a codec trained in hybrid mode
    (TrainConfig.hybrid_coords); pass it as hybrid_codec. Also reports the
    digital side cost: bits = (N/16)*3*quant_bits and the equivalent complex
    channel uses at the capacity limit.
    """
    mcfg = mcfg or MetricsConfig()
    originals = _clouds_with_normals(clouds, k=mcfg.normals_k)
    h_codec = hybrid_codec or codec
    h_normalizer = hybrid_normalizer or normalizer
    codec.eval()
    h_codec.eval()
    with torch.no_grad():
        _, x_star, _ = h_codec.encode(clouds_to_tensor(clouds))
    z = encode_codewords(codec, normalizer, clouds)
    z_h = encode_codewords(h_codec, h_normalizer, clouds)
    std = noise_std_per_real_dim(ChannelConfig(snr_db))
    x_quant = torch.tensor(
        quantize_unit(x_star.cpu().numpy().astype(np.float64), quant_bits),
        dtype=z.dtype,
    )
    d1_features, d1_hybrid = [], []
    for ci, orig in enumerate(originals):
        gen = torch.Generator().manual_seed(derive_seed(seed, "hybrid", ci))
        noise = torch.randn((trials, z.shape[1]), generator=gen, dtype=z.dtype) * std
        with torch.no_grad():
            out_f = codec.decode(z[ci : ci + 1] + noise)
            out_h = h_codec.decode(
                z_h[ci : ci + 1] + noise,
                coords=x_quant[ci : ci + 1].expand(trials, -1, -1),
            )
        for t in range(trials):
            d1_features.append(metrics.d1(orig, PointCloud(out_f.points[t].numpy().astype(np.float64)), mcfg).db)
            d1_hybrid.append(metrics.d1(orig, PointCloud(out_h.points[t].numpy().astype(np.float64)), mcfg).db)
    bits = coordinate_cost_bits(codec.cfg.rows, quant_bits)
    snr_linear = 10.0 ** (snr_db / 10.0)
    report = {
        "snr_db": snr_db,
        "d1_features_only": float(np.mean(d1_features)),
        "d1_hybrid": float(np.mean(d1_hybrid)),
        "d1_delta": float(np.mean(d1_hybrid) - np.mean(d1_features)),
        "coordinate_bits": bits,
        "capacity_limit_uses": float(bits / np.log2(1.0 + snr_linear)),
        "quant_bits": quant_bits,
        "trials": trials,
    }
    return report

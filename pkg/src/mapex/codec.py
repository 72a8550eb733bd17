"""Range image codecs: a task-driven VAE and a lossless baseline.

The VAE maps a raw range image to a latent vector and decodes the
voxel-aware remapped image, so reconstruction fidelity is spent only on
structure the downstream occupancy map keeps.  The lossless codec packs a
validity bitmask plus the valid float32 ranges; it is the oracle for
pipeline tests and the zero-risk fallback for missions.

Everything is CPU torch, single run of a fixed seed is byte-reproducible.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .geometry import INVALID, LidarIntrinsics, RangeImage

SATURATION = 0.999  # decoded pixel >= this fraction of max range = no return

PARAMS_MAGIC = b"VAEP"
PARAMS_VERSION = 1
LOSSLESS_MAGIC = b"XVXL"


class ShapeMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class AllPixelsInvalid(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


class CorruptPayload(ValueError):
    pass


class CorruptParams(ValueError):
    pass


# ----------------------------------------------------------------- config


@dataclass(frozen=True)
class CodecConfig:
    rows: int
    cols: int
    latent_dim: int
    max_range: float
    channels: tuple = (16, 32, 64, 64, 64)
    beta: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 20

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("image dims must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")
        if len(self.channels) != 5:
            raise ValueError("exactly five encoder stages are expected")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def beta_norm(self) -> float:
        return self.beta * self.latent_dim / (self.rows * self.cols)

    def stage_plan(self):
        """Per-stage (height, width) chain and strides for the conv stack.

        Heights halve while >= 2; widths halve while >= 4 so the bottleneck
        keeps at least two columns.  Conv k=3, p=1, stride s maps n to
        ceil(n/s).
        """
        shapes = [(self.rows, self.cols)]
        strides = []
        h, w = self.rows, self.cols
        for _ in self.channels:
            sh = 2 if h >= 2 else 1
            sw = 2 if w >= 4 else 1
            h = -(-h // sh)
            w = -(-w // sw)
            strides.append((sh, sw))
            shapes.append((h, w))
        return shapes, strides


def normalize_ranges(ranges, max_range: float):
    """Scale to [0,1]; invalid pixels become the 0 fill.  Returns (norm, mask)."""
    r = np.asarray(ranges, dtype=np.float32)
    mask = np.isfinite(r)
    norm = np.where(mask, np.clip(r / max_range, 0.0, 1.0), 0.0).astype(np.float32)
    return norm, mask


def image_from_normalized(norm, intr: LidarIntrinsics) -> RangeImage:
    """Denormalize a decoded [0,1] map; saturated pixels become invalid."""
    norm = np.asarray(norm, dtype=np.float32)
    ranges = np.where(norm >= SATURATION, INVALID,
                      norm * np.float32(intr.max_range))
    return RangeImage(intr, ranges)


def sample(mu, sigma, epsilon) -> np.ndarray:
    """Reparameterized draw z = mu + sigma * epsilon, elementwise."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    epsilon = np.asarray(epsilon, dtype=np.float64).reshape(-1)
    if not (mu.shape == sigma.shape == epsilon.shape):
        raise LengthMismatch(
            f"lengths differ: mu {mu.size}, sigma {sigma.size}, eps {epsilon.size}"
        )
    return mu + sigma * epsilon


def compression_ratio(intr: LidarIntrinsics, latent_dim: int) -> float:
    """Raw cloud bytes (3 f32 per pixel) over latent bytes (f32 each)."""
    return (intr.rows * intr.cols * 12) / (latent_dim * 4)


def reference_loss(x_vxl: RangeImage, x_recon_norm, mu, sigma,
                   config: CodecConfig):
    """Float64 numpy loss: masked-MSE + beta_norm * KL.  The torch training
    path must agree with this within float32 noise."""
    target, mask = normalize_ranges(x_vxl.ranges, config.max_range)
    if not mask.any():
        raise AllPixelsInvalid("no valid pixels to reconstruct")
    recon = np.asarray(x_recon_norm, dtype=np.float64)
    if recon.shape != target.shape:
        raise ShapeMismatch(f"recon {recon.shape} vs target {target.shape}")
    err = recon[mask] - target.astype(np.float64)[mask]
    l_recon = float(np.mean(err**2))
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if mu.shape != sigma.shape:
        raise LengthMismatch("mu and sigma lengths differ")
    l_kl = float(-0.5 * np.sum(1.0 + np.log(sigma**2) - mu**2 - sigma**2))
    return l_recon + config.beta_norm * l_kl, l_recon, l_kl


# ----------------------------------------------------------------- network


class _VAE(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        shapes, strides = config.stage_plan()
        chans = (1, *config.channels)
        enc = []
        for i in range(5):
            enc.append(nn.Conv2d(chans[i], chans[i + 1], 3,
                                 stride=strides[i], padding=1))
            enc.append(nn.ELU())
        self.encoder = nn.Sequential(*enc)
        bh, bw = shapes[-1]
        self._bottleneck = (config.channels[-1], bh, bw)
        flat = config.channels[-1] * bh * bw
        self.enc_head = nn.Linear(flat, 2 * config.latent_dim)
        self.dec_head = nn.Linear(config.latent_dim, flat)
        dec = []
        for i in reversed(range(5)):
            (th, tw), (ih, iw) = shapes[i], shapes[i + 1]
            sh, sw = strides[i]
            out_pad = (th - ((ih - 1) * sh + 1), tw - ((iw - 1) * sw + 1))
            dec.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 3,
                                          stride=strides[i], padding=1,
                                          output_padding=out_pad))
            dec.append(nn.ELU() if i > 0 else nn.Sigmoid())
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor):
        h = self.encoder(x).flatten(1)
        mu, logvar = self.enc_head(h).chunk(2, dim=1)
        return mu, logvar.clamp(-30.0, 20.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        c, bh, bw = self._bottleneck
        h = torch.relu(self.dec_head(z)).view(-1, c, bh, bw)
        return self.decoder(h)[:, 0]


def _batch_loss(model, x, target, mask, eps, beta_norm):
    """Pooled masked MSE over the batch plus per-example-mean KL."""
    mu, logvar = model.encode(x)
    z = mu + torch.exp(0.5 * logvar) * eps
    recon = model.decode(z)
    valid = mask.sum()
    if valid.item() == 0:
        raise AllPixelsInvalid("batch has no valid pixels")
    l_recon = (((recon - target) ** 2) * mask).sum() / valid
    l_kl = (-0.5 * (1.0 + logvar - mu**2 - logvar.exp()).sum(dim=1)).mean()
    return l_recon + beta_norm * l_kl, l_recon, l_kl


# ----------------------------------------------------------------- codec


class Codec:
    """Trained (or freshly initialized) VAE with a numpy in/out surface."""

    kind = "vae"

    def __init__(self, config: CodecConfig, intrinsics: LidarIntrinsics,
                 model: _VAE):
        if (intrinsics.rows, intrinsics.cols) != (config.rows, config.cols):
            raise ShapeMismatch("intrinsics do not match codec config")
        self.config = config
        self.intrinsics = intrinsics
        self.model = model
        self.model.eval()

    @staticmethod
    def initialize(config: CodecConfig, intrinsics: LidarIntrinsics,
                   seed: int) -> "Codec":
        torch.manual_seed(seed)
        return Codec(config, intrinsics, _VAE(config))

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _to_input(self, img: RangeImage) -> torch.Tensor:
        if img.ranges.shape != (self.config.rows, self.config.cols):
            raise ShapeMismatch(
                f"image {img.ranges.shape} vs codec "
                f"{(self.config.rows, self.config.cols)}"
            )
        norm, _ = normalize_ranges(img.ranges, self.config.max_range)
        return torch.from_numpy(norm[None, None])

    def encode(self, img: RangeImage):
        with torch.no_grad():
            mu, logvar = self.model.encode(self._to_input(img))
            sigma = torch.exp(0.5 * logvar)
        return (mu[0].numpy().astype(np.float32),
                sigma[0].numpy().astype(np.float32))

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32).reshape(-1)
        if z.size != self.config.latent_dim:
            raise LengthMismatch(f"latent {z.size} != {self.config.latent_dim}")
        with torch.no_grad():
            out = self.model.decode(torch.from_numpy(z)[None])
        return out[0].numpy().astype(np.float32)

    def decode_image(self, z) -> RangeImage:
        return image_from_normalized(self.decode(z), self.intrinsics)

    # keyframe-facing surface shared with LosslessCodec
    def encode_latent(self, img: RangeImage) -> np.ndarray:
        return self.encode(img)[0]

    def decode_latent(self, z) -> RangeImage:
        return self.decode_image(z)


# ------------------------------------------------------------- training


@dataclass
class TrainResult:
    codec: Codec
    history: list
    train_idx: np.ndarray
    test_idx: np.ndarray


def _to_tensors(raw, remapped, max_range):
    x_norm, _ = normalize_ranges(raw, max_range)
    t_norm, mask = normalize_ranges(remapped, max_range)
    return (torch.from_numpy(x_norm[:, None]),
            torch.from_numpy(t_norm),
            torch.from_numpy(mask.astype(np.float32)))


def evaluate(codec: Codec, raw, remapped):
    """Deterministic dataset loss with z = mu (no sampling noise)."""
    x, target, mask = _to_tensors(raw, remapped, codec.config.max_range)
    with torch.no_grad():
        l, lr, lkl = _batch_loss(codec.model, x, target, mask,
                                 torch.zeros(x.shape[0], codec.latent_dim),
                                 codec.config.beta_norm)
    return float(l), float(lr), float(lkl)


def gradient_check(config: CodecConfig, raw, remapped, seed: int,
                   n_weights: int = 10, h: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a float64 clone so the comparison probes the loss wiring, not
    float32 noise.  Returns the worst relative error over sampled weights.
    """
    torch.manual_seed(seed)
    model = _VAE(config).double()
    x, target, mask = _to_tensors(
        np.asarray(raw)[:4], np.asarray(remapped)[:4], config.max_range)
    x, target, mask = x.double(), target.double(), mask.double()
    g = torch.Generator().manual_seed(seed + 1)
    eps = torch.randn(x.shape[0], config.latent_dim, generator=g,
                      dtype=torch.float64)

    def closure():
        return _batch_loss(model, x, target, mask, eps, config.beta_norm)[0]

    loss = closure()
    model.zero_grad()
    loss.backward()

    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for _ in range(n_weights):
        pi = int(rng.integers(len(params)))
        fi = int(rng.integers(params[pi].numel()))
        flat = params[pi].detach().view(-1)
        orig = flat[fi].item()
        with torch.no_grad():
            flat[fi] = orig + h
            up = closure().item()
            flat[fi] = orig - h
            down = closure().item()
            flat[fi] = orig
        fd = (up - down) / (2.0 * h)
        an = params[pi].grad.view(-1)[fi].item()
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-10)
        worst = max(worst, rel)
    return worst


def train(raw, remapped, config: CodecConfig, intrinsics: LidarIntrinsics,
          seed: int, log_path=None, test_fraction: float = 0.1) -> TrainResult:
    """Adam training with the split, shuffling, and noise all seed-derived.

    Epoch 0 rows log the evaluation of the initial parameters; a startup
    finite-difference probe guards against silently broken gradient flow.
    """
    from .remap import split_dataset

    raw = np.asarray(raw, dtype=np.float32)
    remapped = np.asarray(remapped, dtype=np.float32)
    if raw.ndim != 3 or raw.shape != remapped.shape:
        raise ShapeMismatch("raw and remapped stacks must both be (N, H, W)")
    if raw.shape[0] == 0:
        raise EmptyDataset("no training examples")
    if raw.shape[1:] != (config.rows, config.cols):
        raise ShapeMismatch("dataset image dims do not match codec config")

    torch.set_num_threads(1)
    train_idx, test_idx = split_dataset(raw.shape[0], seed, test_fraction)

    worst = gradient_check(config, raw[train_idx], remapped[train_idx], seed)
    if worst >= 1e-3:
        raise NonFiniteLoss(
            f"gradient flow check failed: relative error {worst:.3e}")

    codec = Codec.initialize(config, intrinsics, seed)
    model = codec.model
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(seed ^ 0x9E3779B9)
    eps_gen = torch.Generator().manual_seed(seed + 7)

    x_all, t_all, m_all = _to_tensors(raw, remapped, config.max_range)
    history = []

    def log_eval(epoch):
        for split, idx in (("train", train_idx), ("test", test_idx)):
            if idx.size == 0:
                continue
            l, lr, lkl = evaluate(codec, raw[idx], remapped[idx])
            history.append({"epoch": epoch, "split": split, "L": l,
                            "L_recon": lr, "L_KL": lkl})

    log_eval(0)
    model.train()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(train_idx)
        for start in range(0, len(order), config.batch_size):
            batch = torch.from_numpy(order[start:start + config.batch_size])
            eps = torch.randn(len(batch), config.latent_dim, generator=eps_gen)
            loss, lr_, lkl_ = _batch_loss(
                model, x_all[batch], t_all[batch], m_all[batch], eps,
                config.beta_norm)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch} batch {start // config.batch_size}: "
                    f"L_recon={float(lr_)} L_KL={float(lkl_)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        log_eval(epoch)
        model.train()
    model.eval()

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "split", "L",
                                               "L_recon", "L_KL"])
            w.writeheader()
            w.writerows(history)
    return TrainResult(codec, history, train_idx, test_idx)


# ------------------------------------------------------------ params file


def save_codec(path, codec: Codec) -> None:
    cfg = asdict(codec.config)
    cfg["channels"] = list(cfg["channels"])
    cfg["min_elevation"] = codec.intrinsics.min_elevation
    cfg["max_elevation"] = codec.intrinsics.max_elevation
    blob = json.dumps(cfg, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<HI", PARAMS_VERSION, len(blob)))
        fh.write(blob)
        for tensor in codec.model.state_dict().values():
            fh.write(tensor.numpy().astype("<f4").tobytes())


def load_codec(path) -> Codec:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != PARAMS_MAGIC:
        raise CorruptParams(f"{path}: bad magic {data[:4]!r}")
    version, blob_len = struct.unpack_from("<HI", data, 4)
    if version != PARAMS_VERSION:
        raise CorruptParams(f"{path}: unsupported version {version}")
    try:
        cfg = json.loads(data[10:10 + blob_len].decode())
        lo = cfg.pop("min_elevation")
        hi = cfg.pop("max_elevation")
        cfg["channels"] = tuple(cfg["channels"])
        config = CodecConfig(**cfg)
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptParams(f"{path}: bad config block: {exc}") from exc
    intr = LidarIntrinsics(config.rows, config.cols, lo, hi, config.max_range)
    torch.manual_seed(0)
    model = _VAE(config)
    offset = 10 + blob_len
    state = model.state_dict()
    for key, tensor in state.items():
        n = tensor.numel() * 4
        if offset + n > len(data):
            raise CorruptParams(f"{path}: truncated at {key}")
        arr = np.frombuffer(data, dtype="<f4", count=tensor.numel(),
                            offset=offset).reshape(tuple(tensor.shape))
        state[key] = torch.from_numpy(arr.copy()).to(tensor.dtype)
        offset += n
    if offset != len(data):
        raise CorruptParams(f"{path}: {len(data) - offset} trailing bytes")
    model.load_state_dict(state)
    return Codec(config, intr, model)


# ------------------------------------------------------------- lossless


def lossless_encode(img: RangeImage) -> bytes:
    """Pack validity bitmask + valid float32 ranges; bit-exact round trip."""
    intr = img.intrinsics
    mask = img.valid_mask
    head = struct.pack("<4sHH", LOSSLESS_MAGIC, intr.rows, intr.cols)
    bits = np.packbits(mask.reshape(-1)).tobytes()
    values = img.ranges[mask].astype("<f4").tobytes()
    return head + bits + values


def lossless_decode(payload: bytes, intr: LidarIntrinsics) -> RangeImage:
    if len(payload) < 8:
        raise CorruptPayload("payload shorter than header")
    magic, rows, cols = struct.unpack_from("<4sHH", payload)
    if magic != LOSSLESS_MAGIC:
        raise CorruptPayload(f"bad magic {magic!r}")
    if (rows, cols) != (intr.rows, intr.cols):
        raise CorruptPayload(
            f"payload is {rows}x{cols}, intrinsics say {intr.rows}x{intr.cols}")
    n = rows * cols
    n_mask = -(-n // 8)
    if len(payload) < 8 + n_mask:
        raise CorruptPayload("truncated validity mask")
    mask = np.unpackbits(
        np.frombuffer(payload, dtype=np.uint8, count=n_mask, offset=8),
        count=n).astype(bool).reshape(rows, cols)
    n_valid = int(mask.sum())
    want = 8 + n_mask + 4 * n_valid
    if len(payload) != want:
        raise CorruptPayload(f"expected {want} bytes, got {len(payload)}")
    ranges = np.full((rows, cols), INVALID, dtype=np.float32)
    ranges[mask] = np.frombuffer(payload, dtype="<f4", count=n_valid,
                                 offset=8 + n_mask)
    return RangeImage(intr, ranges)


class LosslessCodec:
    """Baseline codec with the same keyframe-facing surface as the VAE.

    The packed payload rides the wire as float32 words (zero-padded to a
    multiple of four bytes); the payload's own header recovers the true
    length, so padding never corrupts the round trip.
    """

    kind = "lossless"
    latent_dim = None

    def __init__(self, intrinsics: LidarIntrinsics):
        self.intrinsics = intrinsics

    def encode_latent(self, img: RangeImage) -> np.ndarray:
        payload = lossless_encode(img)
        pad = (-len(payload)) % 4
        return np.frombuffer(payload + b"\x00" * pad, dtype="<f4").copy()

    def decode_latent(self, z) -> RangeImage:
        data = np.asarray(z, dtype="<f4").tobytes()
        if len(data) < 8:
            raise CorruptPayload("latent too short for a packed image")
        _, rows, cols = struct.unpack_from("<4sHH", data)
        n = rows * cols
        head = 8 + (-(-n // 8))
        if len(data) < head:
            raise CorruptPayload("truncated validity mask")
        mask_bits = np.frombuffer(data, dtype=np.uint8, count=head - 8, offset=8)
        n_valid = int(np.unpackbits(mask_bits, count=n).sum())
        return lossless_decode(data[:head + 4 * n_valid], self.intrinsics)

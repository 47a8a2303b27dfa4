"""Alternating min-max training over patches, checkpoints and validation-driven choice of K."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigError, IncompatibleCheckpointError, ParseError, TrainingDivergence
from .gmm_latent import LOG_VAR_FLOOR
from .losses import KL_ESTIMATORS, LossReport, LossWeights, gan_loss_discriminator, total_objective, translate_batch
from .networks import ACTIVATIONS, MIXTURE_MODES, ModelBundle, NetSpec, init_params
from .patches import sample_random_patches
from .phantom import load_manifest, load_pairs, load_phantom_spec, load_training_images

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GMMXCKPT"
CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.5, 0.999)


@dataclass
class TrainConfig:
    lambda0: float = 1.0
    lambda1: float = 0.1
    lambda2: float = 10.0
    lambda3: float = 0.1
    lambda4: float = 10.0
    K: int = 25
    latent_dim: int = 64
    patch_size: int = 32
    channel_widths: str = "16,32,64"
    activation: str = "leaky_relu"
    mixture_weights: str = "input"
    patches_per_image: int = 8
    batch_size: int = 8
    steps: int = 2000
    learning_rate_gen: float = 1e-4
    learning_rate_disc: float = 4e-4
    temperature_start: float = 1.0
    temperature_end: float = 0.3
    kl_estimator: str = "mc"
    seed: int = 0
    checkpoint_interval: int = 500

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda0, self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def widths(self) -> Tuple[int, ...]:
        return tuple(int(w) for w in str(self.channel_widths).split(",") if w.strip())

    def net_spec(self) -> NetSpec:
        return NetSpec(self.patch_size, self.latent_dim, self.K, self.widths(),
                       self.activation, self.mixture_weights)

    def invalid_fields(self) -> List[str]:
        bad = []
        for name in ("lambda0", "lambda1", "lambda2", "lambda3", "lambda4"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                bad.append(name)
        for name in ("K", "latent_dim", "patch_size", "patches_per_image", "batch_size", "checkpoint_interval"):
            if getattr(self, name) < 1:
                bad.append(name)
        if self.steps < 0:
            bad.append("steps")
        for name in ("learning_rate_gen", "learning_rate_disc"):
            if not 0.0 < getattr(self, name) < 1.0:
                bad.append(name)
        for name in ("temperature_start", "temperature_end"):
            if not getattr(self, name) > 0:
                bad.append(name)
        try:
            widths = self.widths()
            if not widths or any(w < 1 for w in widths):
                bad.append("channel_widths")
            elif self.patch_size >= 1 and self.patch_size % (2 ** len(widths)):
                bad.append("patch_size")
        except ValueError:
            bad.append("channel_widths")
        if self.activation not in ACTIVATIONS:
            bad.append("activation")
        if self.mixture_weights not in MIXTURE_MODES:
            bad.append("mixture_weights")
        if self.kl_estimator not in KL_ESTIMATORS:
            bad.append("kl_estimator")
        return list(dict.fromkeys(bad))

    def validate(self) -> "TrainConfig":
        bad = self.invalid_fields()
        if bad:
            raise ConfigError(f"invalid config fields: {', '.join(bad)}", bad)
        return self

    def temperature(self, step: int) -> float:
        """Linear schedule from temperature_start to temperature_end over the run."""
        frac = min(step / max(self.steps - 1, 1), 1.0)
        return self.temperature_start + (self.temperature_end - self.temperature_start) * frac

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, overrides: Optional[dict] = None) -> "TrainConfig":
        """Parse ``key = value`` lines; every bad key or value is reported at once."""
        raw, bad = {}, []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                bad.append(f"line {lineno}")
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(raw, bad)

    @classmethod
    def from_mapping(cls, raw: dict, bad=None) -> "TrainConfig":
        bad = list(bad or [])
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, value in raw.items():
            if key not in types:
                bad.append(key)
                continue
            kind = type(getattr(cls(), key))
            try:
                values[key] = kind(value) if kind is not str else str(value)
            except (TypeError, ValueError):
                bad.append(key)
        if bad:
            raise ConfigError(f"invalid config fields: {', '.join(bad)}", bad)
        return cls(**values)

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), overrides)


@dataclass
class TrainState:
    bundle: ModelBundle
    opt_gen: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    generator: torch.Generator
    data_rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig, bundle: Optional[ModelBundle] = None) -> "TrainState":
        bundle = bundle if bundle is not None else init_params(config.net_spec(), config.seed)
        gen_params = [p for _, p in bundle.generator_side_parameters()]
        disc_params = [p for _, p in bundle.discriminator_parameters()]
        opt_gen = torch.optim.Adam(gen_params, lr=config.learning_rate_gen, betas=ADAM_BETAS)
        opt_disc = torch.optim.Adam(disc_params, lr=config.learning_rate_disc, betas=ADAM_BETAS)
        generator = torch.Generator().manual_seed(config.seed)
        data_rng = np.random.default_rng(config.seed)
        return cls(bundle, opt_gen, opt_disc, generator, data_rng, 0)


def _finite_or_raise(report: LossReport, step: int):
    bad = report.first_non_finite()
    if bad is not None:
        raise TrainingDivergence(bad, step)


def train_step(
    state: TrainState,
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    config: TrainConfig,
    phase_hook: Optional[Callable[[str, ModelBundle], None]] = None,
) -> LossReport:
    """One discriminator update, then one generator-side update.

    Returns the report computed before each phase's update (disc terms from
    the D phase, generator terms from the G phase). ``phase_hook`` is called
    after each phase with ``"disc"`` or ``"gen"``.
    """
    bundle, step = state.bundle, state.step
    temp = config.temperature(step)
    weights = config.weights
    dtype = bundle.domain_log_vars_1.dtype
    x1, x2 = batch_a.to(dtype), batch_b.to(dtype)
    if x1.shape[0] == 0 or x2.shape[0] == 0:
        raise ValueError("training batches must be nonempty")

    fake_2 = translate_batch(bundle, 1, x1, state.generator, temp)
    fake_1 = translate_batch(bundle, 2, x2, state.generator, temp)
    disc_1 = gan_loss_discriminator(bundle, 1, x1, fake_1)
    disc_2 = gan_loss_discriminator(bundle, 2, x2, fake_2)
    total_disc = disc_1 + disc_2
    for name, value in (("disc_1", disc_1), ("disc_2", disc_2)):
        if not torch.isfinite(value):
            raise TrainingDivergence(name, step)
    state.opt_disc.zero_grad(set_to_none=True)
    total_disc.backward()
    state.opt_disc.step()
    if phase_hook:
        phase_hook("disc", bundle)

    report = total_objective(bundle, x1, x2, weights, state.generator, temp, config.kl_estimator, with_disc=False)
    report.disc_1, report.disc_2, report.total_disc = disc_1.detach(), disc_2.detach(), total_disc.detach()
    _finite_or_raise(report, step)
    state.opt_gen.zero_grad(set_to_none=True)
    report.total_gen.backward()
    state.opt_gen.step()
    with torch.no_grad():
        for p in (bundle.domain_log_vars_1, bundle.domain_log_vars_2, bundle.prior.log_vars):
            p.clamp_(min=LOG_VAR_FLOOR)
    for name, p in bundle.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise TrainingDivergence(f"parameter {name}", step)
    if phase_hook:
        phase_hook("gen", bundle)

    state.step += 1
    return LossReport(**{f.name: getattr(report, f.name).detach() for f in fields(report)})


def sample_batch(images: Sequence[np.ndarray], config: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    """batch_size images drawn uniformly with replacement, patches_per_image patches each."""
    idx = rng.integers(0, len(images), size=config.batch_size)
    patches = []
    for i in idx:
        patches.extend(p for p, _ in sample_random_patches(images[i], config.patches_per_image, config.patch_size, rng))
    return torch.from_numpy(np.stack(patches)).float()[:, None]


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    params: Dict[str, torch.Tensor]
    opt_gen: Dict[str, torch.Tensor]
    opt_disc: Dict[str, torch.Tensor]
    step: int
    torch_rng: torch.Tensor
    numpy_rng: dict
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_state(cls, state: TrainState, config: TrainConfig) -> "Checkpoint":
        return cls(
            config=config,
            params={k: v.detach().clone() for k, v in state.bundle.state_dict().items()},
            opt_gen=_flatten_optimizer(state.opt_gen),
            opt_disc=_flatten_optimizer(state.opt_disc),
            step=state.step,
            torch_rng=state.generator.get_state().clone(),
            numpy_rng=state.data_rng.bit_generator.state,
        )

    def bundle(self) -> ModelBundle:
        bundle = ModelBundle(self.config.net_spec())
        bundle.load_state_dict(self.params)
        return bundle

    def to_state(self) -> TrainState:
        state = TrainState.create(self.config, self.bundle())
        _restore_optimizer(state.opt_gen, self.opt_gen)
        _restore_optimizer(state.opt_disc, self.opt_disc)
        state.generator.set_state(self.torch_rng.clone())
        state.data_rng.bit_generator.state = self.numpy_rng
        state.step = self.step
        return state


def _flatten_optimizer(opt) -> Dict[str, torch.Tensor]:
    out = {}
    for idx, slots in opt.state_dict()["state"].items():
        for key, value in slots.items():
            out[f"{idx}/{key}"] = torch.as_tensor(value).detach().clone()
    return out


def _restore_optimizer(opt, flat: Dict[str, torch.Tensor]):
    state: Dict[int, dict] = {}
    for name, value in flat.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value.clone()
    opt.load_state_dict({"state": state, "param_groups": opt.state_dict()["param_groups"]})


_DTYPES = {1: torch.float32, 2: torch.float64, 3: torch.int64, 4: torch.uint8, 5: torch.int32}
_TAGS = {v: k for k, v in _DTYPES.items()}


def _pack_block(name: str, t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _TAGS:
        raise TypeError(f"cannot serialize dtype {t.dtype} of {name}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<BB", _TAGS[t.dtype], t.dim())
    head += struct.pack(f"<{t.dim()}I", *t.shape)
    return head + t.numpy().astype(t.numpy().dtype.newbyteorder("<")).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blocks = {f"param/{k}": v for k, v in ckpt.params.items()}
    blocks.update({f"opt_gen/{k}": v for k, v in ckpt.opt_gen.items()})
    blocks.update({f"opt_disc/{k}": v for k, v in ckpt.opt_disc.items()})
    blocks["meta/step"] = torch.tensor([ckpt.step], dtype=torch.int64)
    blocks["rng/torch"] = ckpt.torch_rng.to(torch.uint8)
    blocks["rng/numpy"] = torch.frombuffer(bytearray(json.dumps(ckpt.numpy_rng, sort_keys=True).encode()), dtype=torch.uint8)
    config_text = ckpt.config.to_text().encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(config_text)), config_text,
           struct.pack("<I", len(blocks))]
    out += [_pack_block(name, t) for name, t in blocks.items()]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(8, "magic") != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", 0)
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})", "version")
    (n,) = r.unpack("<I", "config length")
    try:
        config = TrainConfig.from_text(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise ParseError(f"unreadable config section: {exc}", 16) from None
    (count,) = r.unpack("<I", "block count")
    blocks = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<I", "block name length")
        try:
            name = r.take(name_len, "block name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("block name is not UTF-8", start) from None
        tag, rank = r.unpack("<BB", f"header of {name}")
        if tag not in _DTYPES:
            raise ParseError(f"unknown dtype tag {tag} in block {name}", start)
        shape = r.unpack(f"<{rank}I", f"shape of {name}")
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * torch.empty((), dtype=dtype).element_size()
        payload = r.take(nbytes, f"payload of {name}")
        np_dtype = torch.empty((), dtype=dtype).numpy().dtype.newbyteorder("<")
        blocks[name] = torch.from_numpy(np.frombuffer(payload, dtype=np_dtype).astype(np_dtype.newbyteorder("=")).reshape(shape).copy())
    if r.pos != len(buf):
        raise ParseError("trailing bytes after last block", r.pos)
    for required in ("meta/step", "rng/torch", "rng/numpy"):
        if required not in blocks:
            raise ParseError(f"missing block {required}", r.pos)

    def group(prefix):
        return {k[len(prefix):]: v for k, v in blocks.items() if k.startswith(prefix)}

    return Checkpoint(
        config=config,
        params=group("param/"),
        opt_gen=group("opt_gen/"),
        opt_disc=group("opt_disc/"),
        step=int(blocks["meta/step"][0]),
        torch_rng=blocks["rng/torch"],
        numpy_rng=json.loads(bytes(blocks["rng/numpy"].numpy()).decode()),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write: temp file then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path, expected_config: Optional[TrainConfig] = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_config is not None:
        for f in fields(TrainConfig):
            if getattr(ckpt.config, f.name) != getattr(expected_config, f.name):
                raise IncompatibleCheckpointError(
                    f"checkpoint config field '{f.name}' is {getattr(ckpt.config, f.name)!r}, "
                    f"expected {getattr(expected_config, f.name)!r}", f.name)
    return ckpt


# ---------------------------------------------------------------- driver

def train(
    data_root,
    config: TrainConfig,
    out_dir=None,
    resume_from=None,
    phase_hook=None,
) -> Tuple[Checkpoint, List[str]]:
    """Run ``config.steps`` training steps on a phantom dataset directory.

    Returns the final checkpoint and the JSON-lines loss log of the steps run
    here. With ``out_dir`` set, writes ``loss_log.jsonl``, interval
    checkpoints ``step_NNNNNN.ckpt`` and ``final.ckpt``.
    """
    config.validate()
    manifest = load_manifest(data_root)
    images_a, images_b = load_training_images(data_root, manifest)
    if not images_a or not images_b:
        raise ValueError("dataset needs nonempty train_a and train_b splits")

    if resume_from is not None:
        state = load_checkpoint(resume_from, expected_config=config).to_state()
    else:
        state = TrainState.create(config)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.jsonl"
        kept = []
        if resume_from is not None and log_path.exists():
            # drop records past the checkpoint so the log matches an uninterrupted run
            kept = [line for line in log_path.read_text(encoding="utf-8").splitlines()
                    if line.strip() and json.loads(line)["step"] <= state.step]
        log_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
        log_fh = open(log_path, "a", encoding="utf-8")
    lines: List[str] = []
    try:
        while state.step < config.steps:
            batch_a = sample_batch(images_a, config, state.data_rng)
            batch_b = sample_batch(images_b, config, state.data_rng)
            report = train_step(state, batch_a, batch_b, config, phase_hook)
            lines.append(report.to_json(state.step))
            if log_fh is not None:
                log_fh.write(lines[-1] + "\n")
                log_fh.flush()
            if state.step % 100 == 0:
                log.info("step %d total_gen %.3f total_disc %.3f", state.step,
                         float(report.total_gen), float(report.total_disc))
            if out is not None and state.step % config.checkpoint_interval == 0:
                save_checkpoint(Checkpoint.from_state(state, config), out / f"step_{state.step:06d}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()

    final = Checkpoint.from_state(state, config)
    if out is not None:
        save_checkpoint(final, out / "final.ckpt")
    return final, lines


def select_k(
    data_root,
    base_config: TrainConfig,
    k_grid: Sequence[int],
    budget_fraction: float = 0.25,
    threshold: Optional[float] = None,
    stride: Optional[int] = None,
) -> Tuple[int, List[dict]]:
    """Train one shortened model per K and keep the K with the best validation plaque Dice.

    Ties go to the smaller K. Returns (best K, one metrics row per K in grid order).
    """
    from .evaluation import evaluate_pairs

    if not k_grid:
        raise ConfigError("k_grid must be nonempty", ["k_grid"])
    pairs = load_pairs(data_root, "val")
    if not pairs:
        raise ValueError("dataset has no validation pairs")
    spec = load_phantom_spec(data_root)
    threshold = spec.detection_threshold if threshold is None else threshold
    steps = max(1, int(round(base_config.steps * budget_fraction))) if base_config.steps else 0

    table = []
    for K in k_grid:
        cfg = dataclasses.replace(base_config, K=int(K), steps=steps)
        ckpt, _ = train(data_root, cfg)
        summary = evaluate_pairs(ckpt.bundle(), pairs, "1to2", threshold, stride)["aggregate"]
        table.append({"K": int(K), "steps": steps, **{k: v["mean"] for k, v in summary.items()}})
        log.info("K=%d dice=%.4f", K, table[-1]["dice"])
    return pick_best_k(table), table


def pick_best_k(table: Sequence[dict]) -> int:
    """K of the row with the highest Dice; ties go to the smaller K."""
    return min(table, key=lambda row: (-row["dice"], row["K"]))["K"]

"""Alternating adversarial training of denoiser, generator and discriminators."""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import AblationConfig, TrainConfig, from_dict
from .networks import (Denoiser, Generator, NetworkSizes, PatchDiscriminator, count_parameters,
                       sizes_for, tiny_sizes)
from .schedule import NoiseSchedule, build_linear_schedule, perturb, sample_timesteps

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupted or incompatible checkpoint."""


def network_sizes(cfg: TrainConfig) -> NetworkSizes:
    if cfg.model.preset == "tiny":
        return tiny_sizes(width=cfg.model.width, levels=cfg.model.levels)
    return sizes_for(cfg.model.preset)


@dataclass
class ModelBundle:
    """All trainable networks plus the schedule they were trained with.

    ``generator_b`` is ``None`` unless the S-SPADE ablation splits the
    generator in two; ``denoiser`` is ``None`` when the diffusion module is
    removed.
    """

    schedule: NoiseSchedule
    ablation: AblationConfig
    denoiser: Denoiser | None
    generator: Generator
    generator_b: Generator | None = None
    disc_s: PatchDiscriminator | None = None
    disc_a: PatchDiscriminator | None = None

    @property
    def seg_generator(self) -> Generator:
        return self.generator

    @property
    def synth_generator(self) -> Generator:
        return self.generator_b if self.generator_b is not None else self.generator

    @property
    def perturbs_inputs(self) -> bool:
        return self.denoiser is not None and not self.ablation.autoencoder_latent

    @property
    def input_divisor(self) -> int:
        d = 4
        if self.denoiser is not None:
            d = max(d, self.denoiser.cfg.divisor)
        return d

    def generator_modules(self) -> list[torch.nn.Module]:
        mods = [m for m in (self.denoiser, self.generator, self.generator_b) if m is not None]
        return mods

    def generator_parameters(self):
        return [p for m in self.generator_modules() for p in m.parameters()]

    def discriminators(self) -> dict:
        return {k: v for k, v in (("disc_s", self.disc_s), ("disc_a", self.disc_a)) if v is not None}

    def named_modules(self) -> dict:
        out = {"denoiser": self.denoiser, "generator": self.generator, "generator_b": self.generator_b,
               "disc_s": self.disc_s, "disc_a": self.disc_a}
        return {k: v for k, v in out.items() if v is not None}

    def parameter_count(self, include_discriminators: bool = False) -> int:
        mods = self.generator_modules()
        if include_discriminators:
            mods = mods + list(self.discriminators().values())
        return sum(count_parameters(m) for m in mods)

    def latent_input(self, x_t: torch.Tensor, t) -> torch.Tensor:
        """Generator input: the (noisy) image stacked with the denoiser output."""
        if self.denoiser is None:
            return x_t
        return torch.cat([x_t, self.denoiser(x_t, t)], dim=1)

    def train(self, mode: bool = True):
        for m in self.named_modules().values():
            m.train(mode)

    def eval(self):
        self.train(False)


def build_bundle(cfg: TrainConfig, sizes: NetworkSizes | None = None, seed: int | None = None,
                 dtype=torch.float32) -> ModelBundle:
    """Instantiate the networks wired for the configured ablation."""
    ab = cfg.ablation
    ab.validate()
    sizes = sizes or network_sizes(cfg)
    torch.manual_seed(cfg.seed if seed is None else seed)
    schedule = build_linear_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end,
                                     cfg.diffusion.T_a)
    denoiser = None
    gen_cfg = sizes.generator
    if ab.no_diffusion_module:
        gen_cfg = _replace(gen_cfg, in_channels=1)
    else:
        den_cfg = _replace(sizes.denoiser, time_embedding=not ab.autoencoder_latent)
        denoiser = Denoiser(den_cfg)
    if ab.no_sspade:
        generator = Generator(_replace(gen_cfg, norm_mode="instance"))
        generator_b = Generator(_replace(gen_cfg, norm_mode="spade"))
    else:
        generator = Generator(gen_cfg)
        generator_b = None
    disc_s = None if ab.drop_ds else PatchDiscriminator(sizes.discriminator)
    disc_a = None if ab.drop_da else PatchDiscriminator(sizes.discriminator)
    bundle = ModelBundle(schedule, ab, denoiser, generator, generator_b, disc_s, disc_a)
    for m in bundle.named_modules().values():
        m.to(dtype)
    return bundle


def _replace(obj, **kw):
    from dataclasses import replace
    return replace(obj, **kw)


def apply_ablation(cfg: TrainConfig, sizes: NetworkSizes | None = None) -> ModelBundle:
    return build_bundle(cfg, sizes)


def training_data(cfg: TrainConfig, root=None):
    """Training images for ``cfg``; the background ablation feeds angiograms to path B."""
    from .data import DatasetLayout, TrainingData

    layout = DatasetLayout.open(root or cfg.data.root)
    return TrainingData.from_layout(layout, cfg.data.size, seed=cfg.seed, augment=cfg.train.augment,
                                    backgrounds_from_angiograms=cfg.ablation.no_background_inputs)


def mask_to_image(mask: torch.Tensor) -> torch.Tensor:
    """``{0, 1}`` masks to the generator's ``[-1, 1]`` output range."""
    return mask * 2.0 - 1.0


def image_to_mask(img: torch.Tensor) -> torch.Tensor:
    return (img + 1.0) / 2.0


def compose_generator_loss(diff, adv_g, cyc, weights: L.LossWeights, ablation: AblationConfig):
    if ablation.no_cyclic:
        cyc = None
    if ablation.no_diffusion_module or ablation.autoencoder_latent:
        diff = None
    return L.total_generator_loss(diff, adv_g, cyc, weights)


def step_generator(seed: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, step]).generate_state(1, dtype=np.uint64)[0] >> 1))
    return g


@dataclass
class ForwardPass:
    seg: torch.Tensor
    fake: torch.Tensor
    diff: torch.Tensor | None
    recon: torch.Tensor | None


def forward_paths(bundle: ModelBundle, x_a, x_b, s_f, gen: torch.Generator, reentry_t: int = -1,
                  with_cycle: bool = True) -> ForwardPass:
    """Segmentation path on angiograms, synthesis path on backgrounds, and the cycle."""
    sch = bundle.schedule
    b = x_a.shape[0]

    def noisy(x0, upper, fixed_t=None):
        if not bundle.perturbs_inputs:
            return x0, torch.zeros(x0.shape[0], dtype=torch.long), None
        t = sample_timesteps(x0.shape[0], upper, gen) if fixed_t is None else torch.full((x0.shape[0],), fixed_t)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        return perturb(sch, x0, t, eps), t, eps

    # (A) angiogram -> mask, no layout
    xa_t, ta, _ = noisy(x_a, sch.T_a)
    seg = bundle.seg_generator(bundle.latent_input(xa_t, ta), None)

    # (B) background + fractal layout -> synthetic angiogram
    xb_t, tb, eps_b = noisy(x_b, sch.T)
    if bundle.denoiser is not None:
        eps_hat = bundle.denoiser(xb_t, tb)
        latent_b = torch.cat([xb_t, eps_hat], dim=1)
    else:
        eps_hat, latent_b = None, xb_t
    fake = bundle.synth_generator(latent_b, s_f)
    diff = L.diffusion_loss(eps_hat, eps_b) if (eps_b is not None and eps_hat is not None) else None

    recon = None
    if with_cycle:
        fixed = None if reentry_t is None or reentry_t < 0 else int(reentry_t)
        xc_t, tc, _ = noisy(fake, sch.T_a, fixed)
        recon = bundle.seg_generator(bundle.latent_input(xc_t, tc), None)
    return ForwardPass(seg=seg, fake=fake, diff=diff, recon=recon)


def _set_requires_grad(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


@dataclass
class TrainState:
    bundle: ModelBundle
    config: TrainConfig
    opt_g: torch.optim.Optimizer
    opt_ds: torch.optim.Optimizer | None
    opt_da: torch.optim.Optimizer | None
    epoch: int = 0
    step: int = 0
    best_score: float = -math.inf
    last_score: float | None = None
    history: list = field(default_factory=list)

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.config.loss.alpha, self.config.loss.beta)


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.train.lr, betas=(cfg.train.adam_beta1, cfg.train.adam_beta2))


def init_state(cfg: TrainConfig, sizes: NetworkSizes | None = None, dtype=torch.float32) -> TrainState:
    bundle = build_bundle(cfg, sizes, dtype=dtype)
    opt_g = make_optimizer(bundle.generator_parameters(), cfg)
    opt_ds = make_optimizer(bundle.disc_s.parameters(), cfg) if bundle.disc_s is not None else None
    opt_da = make_optimizer(bundle.disc_a.parameters(), cfg) if bundle.disc_a is not None else None
    return TrainState(bundle, cfg, opt_g, opt_ds, opt_da)


def generator_objective(state: TrainState, x_a, x_b, s_f, gen):
    """All generator-side terms for one batch, plus the forward pass."""
    bundle, ab = state.bundle, state.config.ablation
    fp = forward_paths(bundle, x_a, x_b, s_f, gen, state.config.cycle.reentry_t, with_cycle=not ab.no_cyclic)
    score_seg = bundle.disc_s(fp.seg) if bundle.disc_s is not None else None
    score_ang = bundle.disc_a(fp.fake) if bundle.disc_a is not None else None
    adv_g = L.adv_loss_generator(score_seg, score_ang)
    cyc = None
    if fp.recon is not None:
        if ab.ce_for_l1:
            cyc = L.cyclic_loss_ce(image_to_mask(fp.recon), s_f)
        else:
            cyc = L.cyclic_loss(fp.recon, mask_to_image(s_f))
    total = compose_generator_loss(fp.diff, adv_g, cyc, state.weights, ab)
    return total, {"diff": fp.diff, "adv_g": adv_g, "cyc": cyc}, fp


def discriminator_objective(state: TrainState, x_a, s_f, seg_fake, ang_fake):
    bundle = state.bundle
    adv_ds = adv_da = None
    if bundle.disc_s is not None:
        adv_ds = L.adv_loss_disc_s(bundle.disc_s(mask_to_image(s_f)), bundle.disc_s(seg_fake.detach()))
    if bundle.disc_a is not None:
        adv_da = L.adv_loss_disc_a(bundle.disc_a(x_a), bundle.disc_a(ang_fake.detach()))
    return L.total_discriminator_loss(adv_ds, adv_da), adv_ds, adv_da


def _item(x):
    return None if x is None else float(x.detach() if isinstance(x, torch.Tensor) else x)


def train_step(state: TrainState, batch) -> tuple[TrainState, L.LossReport]:
    """One generator-side update followed by one discriminator update."""
    x_a, x_b, s_f = (torch.as_tensor(np.asarray(v)) if not isinstance(v, torch.Tensor) else v for v in batch)
    dtype = next(state.bundle.generator.parameters()).dtype
    x_a, x_b, s_f = x_a.to(dtype), x_b.to(dtype), s_f.to(dtype)
    bundle = state.bundle
    bundle.train()
    gen = step_generator(state.config.seed, state.step)
    discs = list(bundle.discriminators().values())

    _set_requires_grad(discs, False)
    state.opt_g.zero_grad(set_to_none=True)
    total_g, parts, fp = generator_objective(state, x_a, x_b, s_f, gen)
    if not torch.isfinite(total_g):
        raise L.NonFiniteLossError(f"non-finite generator loss at step {state.step}: "
                                   f"{ {k: _item(v) for k, v in parts.items()} }")
    total_g.backward()
    state.opt_g.step()
    _set_requires_grad(discs, True)

    gens = bundle.generator_modules()
    _set_requires_grad(gens, False)
    for opt in (state.opt_ds, state.opt_da):
        if opt is not None:
            opt.zero_grad(set_to_none=True)
    total_d, adv_ds, adv_da = discriminator_objective(state, x_a, s_f, fp.seg, fp.fake)
    if not torch.isfinite(torch.as_tensor(total_d)):
        raise L.NonFiniteLossError(f"non-finite discriminator loss at step {state.step}: "
                                   f"adv_ds={_item(adv_ds)}, adv_da={_item(adv_da)}")
    total_d.backward()
    for opt in (state.opt_ds, state.opt_da):
        if opt is not None:
            opt.step()
    _set_requires_grad(gens, True)

    report = L.LossReport(
        diff=_item(parts["diff"]) if not (state.config.ablation.no_diffusion_module
                                          or state.config.ablation.autoencoder_latent) else None,
        adv_g=_item(parts["adv_g"]), cyc=_item(parts["cyc"]), total_g=_item(total_g),
        adv_ds=_item(adv_ds), adv_da=_item(adv_da), total_d=_item(total_d),
    )
    state.step += 1
    return state, report


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def checkpoint_save(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "config": state.config.to_dict(),
        "networks": {k: m.state_dict() for k, m in state.bundle.named_modules().items()},
        "optimizers": {k: o.state_dict() for k, o in (("g", state.opt_g), ("ds", state.opt_ds),
                                                       ("da", state.opt_da)) if o is not None},
        "epoch": state.epoch,
        "step": state.step,
        "best_score": state.best_score,
        "last_score": state.last_score,
        "rng": {"seed": state.config.seed, "step": state.step},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def _read_payload(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on garbage input
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint container")
    if payload["schema_version"] != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"checkpoint schema version {payload['schema_version']} is not supported "
                              f"(this build reads version {CHECKPOINT_SCHEMA})")
    return payload


def checkpoint_load(path, sizes: NetworkSizes | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` from ``path``; nothing is returned on failure."""
    payload = _read_payload(path)
    try:
        cfg = from_dict(payload["config"]).validate()
        state = init_state(cfg, sizes)
        modules = state.bundle.named_modules()
        if set(modules) != set(payload["networks"]):
            raise CheckpointError(f"network set mismatch: {sorted(modules)} vs {sorted(payload['networks'])}")
        for k, m in modules.items():
            m.load_state_dict(payload["networks"][k])
        for k, opt in (("g", state.opt_g), ("ds", state.opt_ds), ("da", state.opt_da)):
            if opt is not None:
                opt.load_state_dict(payload["optimizers"][k])
        state.epoch = int(payload["epoch"])
        state.step = int(payload["step"])
        state.best_score = float(payload["best_score"])
        state.last_score = payload["last_score"]
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    return state


def load_bundle(path) -> tuple[ModelBundle, TrainConfig]:
    state = checkpoint_load(path)
    state.bundle.eval()
    return state.bundle, state.config


# --------------------------------------------------------------------------
# validation and the outer loop
# --------------------------------------------------------------------------


SELECTION_METRICS = ("iou", "dice", "precision")


def validate(state_or_predict, pairs, threshold: float = 0.5, metric: str = "dice") -> float:
    """Mean ``metric`` (Dice by default) over ``(image, gt_mask)`` pairs at ``t_a = 0``.

    ``state_or_predict`` is a :class:`TrainState`, a :class:`ModelBundle` or
    any callable mapping a ``[-1, 1]`` image to a soft mask in ``[0, 1]``.
    """
    from .evaluation import metrics
    from .inference import bundle_predictor

    if len(pairs) == 0:
        raise ValueError("validation split is empty")
    if metric not in SELECTION_METRICS:
        raise ValueError(f"unknown selection metric {metric!r}")
    col = SELECTION_METRICS.index(metric)
    predict = state_or_predict
    if isinstance(state_or_predict, TrainState):
        predict = bundle_predictor(state_or_predict.bundle)
    elif isinstance(state_or_predict, ModelBundle):
        predict = bundle_predictor(state_or_predict)
    scores = []
    for img, gt in pairs:
        soft = predict(img)
        scores.append(metrics((soft >= threshold).astype(np.uint8), gt)[col])
    return float(np.mean(scores))


LOG_FIELDS = ("step", "epoch") + L.LossReport.FIELDS


class CsvLog:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        exists = self.path.is_file() and append
        self._fh = open(self.path, "a" if append else "w", newline="")
        self._w = csv.writer(self._fh)
        if not exists:
            self._w.writerow(LOG_FIELDS)

    def write(self, step: int, epoch: int, report: L.LossReport):
        d = report.as_dict()
        self._w.writerow([step, epoch] + ["" if d[k] is None else repr(d[k]) for k in L.LossReport.FIELDS])
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v not in ("",) else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def fit(state: TrainState, data, out_dir=None, val_pairs=None, callback=None, max_steps: int | None = None):
    """Run epochs until ``train.epochs`` or the step cap; returns the reports.

    Checkpoints ``last.pt`` each epoch and ``best.pt`` whenever validation
    Dice improves.
    """
    cfg = state.config
    cap = max_steps if max_steps is not None else (cfg.train.max_steps or None)
    bs = cfg.train.batch_size
    per_epoch = data.steps_per_epoch(bs)
    logger = CsvLog(Path(out_dir) / "train_log.csv", append=state.step > 0) if out_dir else None
    reports = []
    try:
        while state.epoch < cfg.train.epochs:
            start = state.step - state.epoch * per_epoch if state.step > state.epoch * per_epoch else 0
            for b in range(start, per_epoch):
                if cap is not None and state.step >= cap:
                    break
                batch = data.batch(state.epoch, b, bs)
                step = state.step
                _, report = train_step(state, batch)
                reports.append(report)
                if logger and (step % max(cfg.train.log_every, 1) == 0):
                    logger.write(step, state.epoch, report)
                if callback:
                    callback(state, report)
            else:
                state.epoch += 1
                _end_of_epoch(state, out_dir, val_pairs)
                continue
            break
    finally:
        if logger:
            logger.close()
    if out_dir:
        checkpoint_save(state, Path(out_dir) / "last.pt")
    return reports


def _end_of_epoch(state: TrainState, out_dir, val_pairs):
    cfg = state.config
    every = cfg.train.validate_every
    if val_pairs and every and state.epoch % every == 0:
        score = validate(state, val_pairs, cfg.eval.threshold, cfg.train.selection_metric)
        state.last_score = score
        log.info("epoch %d: validation %s %.4f", state.epoch, cfg.train.selection_metric, score)
        if score > state.best_score:
            state.best_score = score
            if out_dir:
                checkpoint_save(state, Path(out_dir) / "best.pt")
    if out_dir:
        checkpoint_save(state, Path(out_dir) / "last.pt")

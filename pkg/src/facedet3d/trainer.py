"""Training loops for the detail predictor, the renderer and the super-resolution net."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .critics import make_dage, make_dexp, make_dexp_rgb, make_dface
from .detailnet import DetP, DetPConfig, SRConfig, SRNet, bicubic_upsample
from .facegeom import ParameterError, apply_detail_displacement, rasterize_uv
from .io import load_checkpoint, save_checkpoint
from .losses import (DEFAULT_WEIGHTS, augw_loss, dsl_loss, nonsat_d_loss_logits, nonsat_g_loss_logits,
                     photometric_bundle, r1_penalty, regression_loss, squared_error, sr_loss, weighted_sum)
from .rendernet import (RasterBatch, RenderConfig, Renderer, ShadingProbe, condition_vector, raster_item)
from .shading import augment_wrinkles, shading_map
from .synthdata import SynthConfig, face_mesh, oracle_detail_map, smooth_albedo, surrogate_age_embed

logger = logging.getLogger(__name__)

STAGES = ("detp", "render", "sr")
# Detail maps enter the regression in the same units the detail critics see.
DETAIL_LOSS_SCALE = 100.0
BETAS = (0.5, 0.999)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "detp"
    steps: int = 500
    batch_size: int = 4
    lr_generator: float = 2e-4
    lr_critic: float = 1e-4
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    seed: int = 0
    dataset: str | None = None
    checkpoint_interval: int = 0
    fine_fallback: str = "input"
    critic_width: int = 32
    model: dict = field(default_factory=dict)
    sr_patch: int = 64
    joint_finetune: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0:
            raise ParameterError("steps must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.lr_generator <= 0 or self.lr_critic <= 0:
            raise ParameterError("learning rates must be positive")
        if self.checkpoint_interval < 0:
            raise ParameterError("checkpoint_interval must be >= 0")
        merged = dict(DEFAULT_WEIGHTS)
        unknown = set(self.weights) - set(merged)
        if unknown:
            raise ParameterError(f"unknown loss weights {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.weights.items()})
        if any(v < 0 for v in merged.values()):
            raise ParameterError("loss weights must be >= 0")
        self.weights = merged
        if self.fine_fallback not in ("input", "zero"):
            raise ParameterError(f"fine_fallback must be 'input' or 'zero', got {self.fine_fallback!r}")
        if self.joint_finetune:
            raise ParameterError("joint finetuning of detail predictor and renderer is not implemented")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: Path | None
    metrics_path: Path | None
    metrics: list
    summary: dict
    trainer: object


def _seed_all(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _tensor(a, dtype=torch.float32):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def module_arrays(prefix, module):
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(prefix, module, arrays):
    state = module.state_dict()
    for k in state:
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise ParameterError(f"checkpoint is missing {key}")
        state[k] = torch.as_tensor(arrays[key]).reshape(state[k].shape).to(state[k].dtype)
    module.load_state_dict(state)


def parameter_digest(module):
    """Cheap fingerprint of a module's parameters (used to assert update disjointness)."""
    return tuple(float(p.detach().double().sum()) + float(p.detach().double().pow(2).sum()) for p in module.parameters())


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_name", "value"])
        for step, name, value in rows:
            w.writerow([step, name, repr(float(value))])


def read_metrics(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [(int(row["step"]), row["loss_name"], float(row["value"])) for row in r]


def _check_finite(values: dict, where):
    for k, v in values.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"{where} loss term {k!r} is not finite")


# ---------------------------------------------------------------- detail predictor

class DetailPool:
    """Expression states (map + labels) of a sample set, grouped by identity."""

    def __init__(self, samples):
        maps, au, expr, fid, age, owner = [], [], [], [], [], []
        ids = {}
        for s in samples:
            k = ids.setdefault(s.identity.seed, len(ids))
            emb_age = surrogate_age_embed(s.identity)
            for d, e in ((s.detail_src, s.src), (s.detail_tgt, s.tgt)):
                maps.append(d.data[None])
                au.append(e.au)
                expr.append(e.expr_params)
                fid.append(s.identity.id_embedding)
                age.append(emb_age)
                owner.append(k)
        self.maps = _tensor(np.stack(maps))
        self.au = _tensor(np.stack(au))
        self.expr = _tensor(np.stack(expr))
        self.fid = _tensor(np.stack(fid))
        self.age = _tensor(np.stack(age))
        self.owner = np.asarray(owner)
        self.groups = [np.flatnonzero(self.owner == k) for k in range(len(ids))]

    def __len__(self):
        return len(self.owner)

    def pairs(self):
        """Every ordered (src, tgt) pair within an identity, as two index arrays."""
        pairs = [(i, j) for g in self.groups for i in g for j in g]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def predict(self, model, src, tgt, tgt_au=None):
        au = self.au[tgt] if tgt_au is None else tgt_au
        return model(self.maps[src], self.au[src], au, self.expr[tgt], self.fid[src], self.age[src])


def regress_over_pairs(model, pool: DetailPool):
    """Regression loss over every within-identity pair of ``pool`` (deterministic probe)."""
    src, tgt = pool.pairs()
    was_training = model.training
    model.eval()
    with torch.no_grad():
        pred = pool.predict(model, src, tgt).d_pred
    model.train(was_training)
    return float(regression_loss(pred * DETAIL_LOSS_SCALE, pool.maps[tgt] * DETAIL_LOSS_SCALE))


class DetPTrainer:
    """Alternating critic / generator updates for the detail predictor."""

    def __init__(self, config: TrainConfig, samples):
        self.config = config
        self.rng = _seed_all(config.seed)
        train = [s for s in samples if s.split == "train"]
        if not train:
            raise ParameterError("dataset has no training samples")
        mcfg = dict(config.model)
        mcfg["fine_fallback"] = config.fine_fallback
        self.model_config = DetPConfig(**mcfg)
        self.model = DetP(self.model_config)
        w = config.critic_width
        self.critics = {"dexp": make_dexp(w), "dface": make_dface(w), "dage": make_dage(w)}
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.lr_generator, betas=BETAS)
        self.opt_d = torch.optim.Adam([p for c in self.critics.values() for p in c.parameters()],
                                      lr=config.lr_critic, betas=BETAS)
        self.pool = DetailPool(train)

    def sample_batch(self):
        b = self.config.batch_size
        pool = self.pool
        src = self.rng.integers(0, len(pool), size=b)
        tgt = np.array([self.rng.choice(pool.groups[pool.owner[i]]) for i in src])
        real = self.rng.integers(0, len(pool), size=b)
        return src, tgt, real

    def predict(self, src, tgt):
        return self.pool.predict(self.model, src, tgt)

    def critic_step(self, batch):
        src, tgt, real = batch
        wts = self.config.weights
        with torch.no_grad():
            fake = self.predict(src, tgt).d_pred
        real_maps = self.pool.maps[real]
        terms = {}
        total = 0.0
        for name, critic in self.critics.items():
            out_r = critic(real_maps)
            out_f = critic(fake)
            adv = nonsat_d_loss_logits(out_r.logit, out_f.logit)
            r1 = r1_penalty(lambda x, c=critic: c(x).realism, real_maps)
            total = total + wts["adv"] * adv + wts["r1"] * r1
            terms[f"d_{name}_adv"] = adv
            terms[f"d_{name}_r1"] = r1
        # auxiliary heads learn from real maps only
        out = self.critics["dexp"](real_maps)
        terms["d_au"] = squared_error(out.aux["au"], self.pool.au[real])
        terms["d_expr"] = squared_error(out.aux["expr"], self.pool.expr[real])
        terms["d_id"] = squared_error(self.critics["dface"](real_maps).aux["id"], self.pool.fid[real])
        terms["d_age"] = squared_error(self.critics["dage"](real_maps).aux["age"], self.pool.age[real])
        total = (total + wts["au"] * terms["d_au"] + wts["expr"] * terms["d_expr"]
                 + wts["id"] * terms["d_id"] + wts["age"] * terms["d_age"])
        values = {k: float(v.detach()) for k, v in terms.items()}
        values["d_total"] = float(total.detach())
        _check_finite(values, "critic")
        self.opt_d.zero_grad(set_to_none=True)
        total.backward()
        self.opt_d.step()
        return values

    def generator_step(self, batch):
        src, tgt, _ = batch
        for c in self.critics.values():
            c.requires_grad_(False)
        try:
            out = self.predict(src, tgt)
            fake = out.d_pred
            e = self.critics["dexp"](fake)
            f = self.critics["dface"](fake)
            a = self.critics["dage"](fake)
            terms = {
                "adv": nonsat_g_loss_logits(e.logit) + nonsat_g_loss_logits(f.logit) + nonsat_g_loss_logits(a.logit),
                "au": squared_error(e.aux["au"], self.pool.au[tgt]),
                "expr": squared_error(e.aux["expr"], self.pool.expr[tgt]),
                "id": squared_error(f.aux["id"], self.pool.fid[src]),
                "age": squared_error(a.aux["age"], self.pool.age[src]),
                "regress": regression_loss(fake * DETAIL_LOSS_SCALE, self.pool.maps[tgt] * DETAIL_LOSS_SCALE),
            }
            total, breakdown = weighted_sum(terms, self.config.weights)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        finally:
            for c in self.critics.values():
                c.requires_grad_(True)
        return breakdown

    def eval_regress(self):
        return regress_over_pairs(self.model, self.pool)

    def arrays(self):
        out = module_arrays("detp", self.model)
        for name, c in self.critics.items():
            out.update(module_arrays(name, c))
        return out

    def checkpoint_config(self):
        return {"stage": "detp", "model": self.model_config.to_dict(), "train": self.config.to_dict()}


# ---------------------------------------------------------------- renderer

@dataclass
class _SceneCache:
    proxy: object
    detailed: object
    shading: object  # ShadingMap of the detailed geometry
    mesh: object


class RenderScenes:
    """Per-sample rasters, shadings and tensors shared by renderer training and evaluation."""

    def __init__(self, samples, synth_config: SynthConfig = SynthConfig()):
        if not samples:
            raise ParameterError("no samples to render")
        self.samples = list(samples)
        self.synth = synth_config
        self._scenes = [self._scene(s) for s in self.samples]
        self._pairs = {}
        self.textures = _tensor(np.stack([s.texture for s in self.samples]))
        self.images = _tensor(np.stack([s.image for s in self.samples]))
        self.au = _tensor(np.stack([s.tgt.au for s in self.samples]))
        self.cond = _tensor(np.stack([condition_vector(s.tgt.au, s.identity.albedo_params, s.light)
                                      for s in self.samples]))

    def __len__(self):
        return len(self.samples)

    def _view(self, raster, light, albedo_params):
        shade = shading_map(raster, light)
        shaded = np.clip(smooth_albedo(albedo_params, raster.uv, self.synth) * shade.data[None], 0, 1) * raster.mask[None]
        return raster_item(raster, shaded, self.samples[0].texture.shape[-2:]), shade

    def _scene(self, s):
        mesh = face_mesh(s.identity, s.tgt, self.synth)
        proxy, _ = self._view(rasterize_uv(mesh, s.camera), s.light, s.identity.albedo_params)
        detailed, shade = self._view(rasterize_uv(apply_detail_displacement(mesh, s.detail_tgt), s.camera),
                                     s.light, s.identity.albedo_params)
        return _SceneCache(proxy, detailed, shade, mesh)

    def augmented_pair(self, i, j):
        """Scene i re-detailed with donor j's map: (raster item of G*_D, I*, S*, mask)."""
        key = (int(i), int(j))
        if key not in self._pairs:
            s, donor = self.samples[i], self.samples[j]
            sc = self._scenes[i]
            raster = rasterize_uv(apply_detail_displacement(sc.mesh, donor.detail_tgt), s.camera)
            item, shade_star = self._view(raster, s.light, s.identity.albedo_params)
            target = augment_wrinkles(s.image, sc.shading, shade_star)
            self._pairs[key] = (item, _tensor(target), _tensor(shade_star.data[None]),
                                _tensor((sc.shading.mask * shade_star.mask)[None]))
        return self._pairs[key]

    def batch_rasters(self, idx):
        proxy = RasterBatch.stack([self._scenes[i].proxy for i in idx])
        detailed = RasterBatch.stack([self._scenes[i].detailed for i in idx])
        return proxy, detailed

    def render(self, model, idx, donors=None):
        """Render scenes ``idx``; with ``donors`` the detailed branch sees the donors' detail maps."""
        idx = np.asarray(idx)
        proxy, detailed = self.batch_rasters(idx)
        if donors is not None:
            detailed = RasterBatch.stack([self.augmented_pair(i, j)[0] for i, j in zip(idx, donors)])
        return model(self.textures[idx], proxy, detailed, self.cond[idx])


class RenderTrainer:
    """Photometric, augmented-wrinkle and detailed-shading objectives plus an RGB expression critic."""

    def __init__(self, config: TrainConfig, samples, synth_config: SynthConfig = SynthConfig()):
        self.config = config
        self.rng = _seed_all(config.seed)
        train = [s for s in samples if s.split == "train"]
        if not train:
            raise ParameterError("dataset has no training samples")
        self.model_config = RenderConfig(**config.model)
        self.model = Renderer(self.model_config)
        self.probe = ShadingProbe()
        self.critic = make_dexp_rgb(config.critic_width)
        self.opt_g = torch.optim.Adam(list(self.model.parameters()) + list(self.probe.parameters()),
                                      lr=config.lr_generator, betas=BETAS)
        self.opt_d = torch.optim.Adam(self.critic.parameters(), lr=config.lr_critic, betas=BETAS)
        self.use_aug = config.weights["augw"] > 0 or config.weights["dsl"] > 0
        self.scenes = RenderScenes(train, synth_config)
        self.samples = self.scenes.samples
        self.images = self.scenes.images
        self.au = self.scenes.au
        self.additive_violations = 0

    def sample_batch(self):
        n = len(self.samples)
        idx = self.rng.integers(0, n, size=self.config.batch_size)
        donors = np.roll(idx, 1)
        real = self.rng.integers(0, n, size=self.config.batch_size)
        return idx, donors, real

    def reconstruct(self, idx):
        return self.scenes.render(self.model, idx)

    def critic_step(self, batch):
        idx, _, real = batch
        w = self.config.weights
        with torch.no_grad():
            fake = self.reconstruct(idx).image_raw
        real_img = self.images[real]
        out_r = self.critic(real_img)
        out_f = self.critic(fake)
        adv = nonsat_d_loss_logits(out_r.logit, out_f.logit)
        r1 = r1_penalty(lambda x: self.critic(x).realism, real_img)
        au = squared_error(out_r.aux["au"], self.au[real])
        total = w["adv"] * adv + w["r1"] * r1 + w["au"] * au
        values = {"d_adv": float(adv.detach()), "d_r1": float(r1.detach()), "d_au": float(au.detach()),
                  "d_total": float(total.detach())}
        _check_finite(values, "critic")
        self.opt_d.zero_grad(set_to_none=True)
        total.backward()
        self.opt_d.step()
        return values

    def generator_terms(self, batch):
        idx, donors, _ = batch
        w = self.config.weights
        sc = self.scenes
        proxy, detailed = sc.batch_rasters(idx)
        tex = sc.textures[idx]
        cond = sc.cond[idx]
        ntm = self.model.ntex(tex)
        out = self.model(tex, proxy, detailed, cond, ntm=ntm)
        target = self.images[idx]
        crit = self.critic(out.image_raw)
        terms = {
            "adv": nonsat_g_loss_logits(crit.logit),
            "au": squared_error(crit.aux["au"], self.au[idx]),
            "photo": photometric_bundle(out.image_raw, target),
            "photo_lr": photometric_bundle(out.image_lr, target),
        }
        if self.use_aug:
            pairs = [sc.augmented_pair(i, j) for i, j in zip(idx, donors)]
            star = RasterBatch.stack([p[0] for p in pairs])
            out_star = self.model(tex, proxy, star, cond, ntm=ntm, image_lr=out.image_lr)
            if w["augw"] > 0:
                terms["augw"] = augw_loss(out_star.image_raw, torch.stack([p[1] for p in pairs]))
            if w["dsl"] > 0:
                s_star = torch.stack([p[2] for p in pairs])
                mask = torch.stack([p[3] for p in pairs])
                terms["dsl"] = dsl_loss(self.probe(out_star.image_raw), s_star, mask)
        return terms, out

    def generator_step(self, batch):
        self.critic.requires_grad_(False)
        try:
            terms, out = self.generator_terms(batch)
            if not torch.equal(out.image_raw, out.image_lr + out.image_detail):
                self.additive_violations += 1
            total, breakdown = weighted_sum(terms, self.config.weights)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        finally:
            self.critic.requires_grad_(True)
        return breakdown

    def arrays(self):
        out = module_arrays("renderer", self.model)
        out.update(module_arrays("probe", self.probe))
        out.update(module_arrays("dexp_rgb", self.critic))
        return out

    def checkpoint_config(self):
        return {"stage": "render", "model": self.model_config.to_dict(), "train": self.config.to_dict()}


# ---------------------------------------------------------------- super-resolution

def full_res_maps(samples, synth_config: SynthConfig = SynthConfig()):
    """(N, 1, R, R) tensor of full-resolution oracle maps for both expressions of each sample."""
    maps = []
    for s in samples:
        for e in (s.src, s.tgt):
            maps.append(oracle_detail_map(s.identity, e.au, config=synth_config, resolution="full").data[None])
    return _tensor(np.stack(maps))


def sr_crops(maps, rng, n, patch):
    """Random (low, high) patch pairs; the low patch is the 4x area average of the high one."""
    size = maps.shape[-1]
    which = rng.integers(0, maps.shape[0], size=n)
    ys = rng.integers(0, size - patch + 1, size=n)
    xs = rng.integers(0, size - patch + 1, size=n)
    hi = torch.stack([maps[k, :, y:y + patch, x:x + patch] for k, y, x in zip(which, ys, xs)])
    return F.avg_pool2d(hi, 4), hi


@torch.no_grad()
def sr_heldout_l1(model, maps, patch=64, n_patches=64, seed=12345):
    """(network L1, bicubic L1) on fixed crops."""
    lo, hi = sr_crops(maps, np.random.default_rng(seed), n_patches, patch)
    return float(sr_loss(model(lo), hi)), float(sr_loss(bicubic_upsample(lo), hi))


class SRTrainer:
    """L1 regression on (area-downsampled, original) patch pairs cut from full-resolution oracle maps."""

    def __init__(self, config: TrainConfig, samples, synth_config: SynthConfig = SynthConfig()):
        self.config = config
        self.rng = _seed_all(config.seed)
        self.model_config = SRConfig(**config.model)
        self.model = SRNet(self.model_config)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.lr_generator, betas=BETAS)
        train = [s for s in samples if s.split == "train"]
        if not train:
            raise ParameterError("dataset has no training samples")
        held = [s for s in samples if s.split == "heldout"]
        self.train_maps = full_res_maps(train, synth_config)
        self.heldout_maps = full_res_maps(held, synth_config) if held else self.train_maps

    def sample_batch(self):
        return sr_crops(self.train_maps, self.rng, self.config.batch_size, self.config.sr_patch)

    def critic_step(self, batch):
        return {}

    def generator_step(self, batch):
        lo, hi = batch
        total, breakdown = weighted_sum({"sr": sr_loss(self.model(lo), hi)}, self.config.weights)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        return breakdown

    def heldout_l1(self):
        return sr_heldout_l1(self.model, self.heldout_maps, self.config.sr_patch)

    def arrays(self):
        return module_arrays("sr", self.model)

    def checkpoint_config(self):
        return {"stage": "sr", "model": self.model_config.to_dict(), "train": self.config.to_dict()}


# ---------------------------------------------------------------- shared loop

def _save(trainer, path, step):
    save_checkpoint(path, trainer.arrays(), trainer.checkpoint_config(), extra={"step": step})


def run_training(trainer, steps, out_dir=None, checkpoint_interval=0):
    """Alternate critic and generator steps; returns the metric rows.

    A non-finite loss aborts before the offending update, writes the current
    (last good) weights and raises TrainingDiverged.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    step = 0
    try:
        for step in range(steps):
            batch = trainer.sample_batch()
            d_values = trainer.critic_step(batch)
            g = trainer.generator_step(batch)
            rows.extend((step, k, v) for k, v in g.rows())
            rows.extend((step, k, v) for k, v in d_values.items())
            if out is not None and checkpoint_interval and (step + 1) % checkpoint_interval == 0:
                _save(trainer, out / "checkpoint.zip", step + 1)
    except FloatingPointError as exc:
        logger.error("training diverged at step %d: %s", step, exc)
        if out is not None:
            _save(trainer, out / "checkpoint.zip", step)
            write_metrics(out / "metrics.csv", rows)
        raise TrainingDiverged(f"non-finite loss at step {step}: {exc}") from exc
    if out is not None:
        _save(trainer, out / "checkpoint.zip", steps)
        write_metrics(out / "metrics.csv", rows)
    return rows


def _load_samples(config, samples):
    if samples is not None:
        return samples, SynthConfig()
    if config.dataset is None:
        raise ParameterError("no dataset given")
    from .synthdata import load_dataset
    return load_dataset(config.dataset)


def train_detp(config: TrainConfig, samples=None, out_dir=None) -> TrainResult:
    samples, _ = _load_samples(config, samples)
    trainer = DetPTrainer(config, samples)
    summary = {"regress_initial": trainer.eval_regress()}
    rows = run_training(trainer, config.steps, out_dir, config.checkpoint_interval)
    summary["regress_final"] = trainer.eval_regress()
    return _result(out_dir, rows, summary, trainer)


def train_renderer(config: TrainConfig, samples=None, out_dir=None) -> TrainResult:
    samples, synth = _load_samples(config, samples)
    trainer = RenderTrainer(config, samples, synth)
    rows = run_training(trainer, config.steps, out_dir, config.checkpoint_interval)
    return _result(out_dir, rows, {"additive_violations": trainer.additive_violations}, trainer)


def train_sr(config: TrainConfig, samples=None, out_dir=None) -> TrainResult:
    samples, synth = _load_samples(config, samples)
    trainer = SRTrainer(config, samples, synth)
    rows = run_training(trainer, config.steps, out_dir, config.checkpoint_interval)
    net, bic = trainer.heldout_l1()
    return _result(out_dir, rows, {"heldout_l1": net, "bicubic_l1": bic}, trainer)


def _result(out_dir, rows, summary, trainer):
    out = Path(out_dir) if out_dir is not None else None
    return TrainResult(out / "checkpoint.zip" if out else None, out / "metrics.csv" if out else None,
                       rows, summary, trainer)


# ---------------------------------------------------------------- loading trained models

def load_detp(path):
    arrays, manifest = load_checkpoint(path)
    cfg = manifest["config"]
    if cfg.get("stage") != "detp":
        raise ParameterError(f"{path} is not a detail-predictor checkpoint")
    model = DetP(DetPConfig(**cfg["model"]))
    load_module_arrays("detp", model, arrays)
    return model.eval(), manifest


def load_renderer(path):
    arrays, manifest = load_checkpoint(path)
    cfg = manifest["config"]
    if cfg.get("stage") != "render":
        raise ParameterError(f"{path} is not a renderer checkpoint")
    model = Renderer(RenderConfig(**cfg["model"]))
    load_module_arrays("renderer", model, arrays)
    probe = ShadingProbe()
    load_module_arrays("probe", probe, arrays)
    return model.eval(), probe.eval(), manifest


def load_sr(path):
    arrays, manifest = load_checkpoint(path)
    cfg = manifest["config"]
    if cfg.get("stage") != "sr":
        raise ParameterError(f"{path} is not a super-resolution checkpoint")
    model = SRNet(SRConfig(**cfg["model"]))
    load_module_arrays("sr", model, arrays)
    return model.eval(), manifest


TRAINERS = {"detp": train_detp, "render": train_renderer, "sr": train_sr}

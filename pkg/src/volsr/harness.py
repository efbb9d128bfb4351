"""Experiment orchestration: generate, train, corrupt, reconstruct, evaluate.

Every command is driven by a single JSON config file and a base seed. All
artifacts are written atomically (temp + rename) under the config's output
directory, and the numeric outputs embed the config hash and seed so that
two runs with identical config+seed produce byte-identical tables.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .autoencoder import (
    AutoencoderConfig,
    encode,
    load_autoencoder,
    save_autoencoder,
    train_autoencoder,
)
from .corruption import CorruptionSpec, observation_mask, apply_corruption
from .diffusion import (
    DenoiserConfig,
    DiffusionTrainConfig,
    NoiseSchedule,
    TimestepSubsequence,
    load_denoiser,
    save_denoiser,
    train_denoiser,
)
from .inversion import InversionConfig, invert_decoder, invert_ldm, mean_latent
from .metrics import cubic_interpolate, evaluate_cohort
from .volume import (
    Conditioning,
    Latent,
    PhantomSpec,
    Volume,
    conditioning_from_volume,
    load_latent,
    load_volume,
    make_phantom,
    save_latent,
    save_volume,
)

METHODS = ("ldm", "decoder", "cubic")


class HarnessError(RuntimeError):
    """Structured pipeline failure (missing prerequisite, bad layout, ...)."""


@dataclass(frozen=True)
class PhantomSetConfig:
    shape: tuple = (32, 32, 32)
    count_range: tuple = (3, 8)
    intensity_bands: tuple = ((0.25, 0.45), (0.55, 0.75), (0.8, 1.0))
    smooth_sigma: float = 1.2
    train_count: int = 200
    test_count: int = 20

    def spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec(
            shape=self.shape,
            count_range=self.count_range,
            intensity_bands=self.intensity_bands,
            smooth_sigma=self.smooth_sigma,
            seed=seed,
        )


@dataclass(frozen=True)
class ScheduleConfig:
    t_train: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0195

    def build(self) -> NoiseSchedule:
        return NoiseSchedule.scaled_linear(self.t_train, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class EvaluationConfig:
    region: int = 24
    methods: tuple = METHODS


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str = "runs/experiment"
    seed: int = 0
    phantoms: PhantomSetConfig = PhantomSetConfig()
    autoencoder: AutoencoderConfig = AutoencoderConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    diffusion: DiffusionTrainConfig = DiffusionTrainConfig()
    corruptions: tuple = (("k2", {"kind": "slice_mask", "axis": 0, "k": 2}), ("k8", {"kind": "slice_mask", "axis": 0, "k": 8}))
    inversion_ldm: InversionConfig = InversionConfig(mode="ldm")
    inversion_decoder: InversionConfig = InversionConfig(mode="decoder")
    mean_latent_samples: int = 256
    evaluation: EvaluationConfig = EvaluationConfig()

    # -- derived paths -------------------------------------------------------

    @property
    def root(self) -> Path:
        return Path(self.output_dir)

    def corruption_specs(self):
        return [(name, CorruptionSpec.from_config(cfg)) for name, cfg in self.corruptions]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corruptions"] = [[name, dict(cfg)] for name, cfg in self.corruptions]
        return d

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("output_dir", None)  # hash identifies the experiment, not its location
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)

        def tupled(cls, section, tuple_keys=()):
            sub = dict(d.get(section) or {})
            for key in tuple_keys:
                if key in sub and sub[key] is not None:
                    val = sub[key]
                    sub[key] = tuple(tuple(v) if isinstance(v, list) else v for v in val) if isinstance(val, list) else val
            return cls(**sub)

        diff_raw = dict(d.get("diffusion") or {})
        dn_raw = dict(diff_raw.pop("denoiser", None) or {})
        if dn_raw.get("latent_shape"):
            dn_raw["latent_shape"] = tuple(dn_raw["latent_shape"])
        return ExperimentConfig(
            output_dir=d.get("output_dir", "runs/experiment"),
            seed=int(d.get("seed", 0)),
            phantoms=tupled(PhantomSetConfig, "phantoms", ("shape", "count_range", "intensity_bands")),
            autoencoder=tupled(AutoencoderConfig, "autoencoder", ("volume_shape", "latent_shape")),
            schedule=tupled(ScheduleConfig, "schedule"),
            diffusion=DiffusionTrainConfig(denoiser=DenoiserConfig(**dn_raw), **diff_raw),
            corruptions=tuple((name, dict(cfg)) for name, cfg in d.get("corruptions", [["k2", {"kind": "slice_mask", "axis": 0, "k": 2}], ["k8", {"kind": "slice_mask", "axis": 0, "k": 8}]])),
            inversion_ldm=InversionConfig(mode="ldm", **{k: v for k, v in (d.get("inversion_ldm") or {}).items() if k != "mode"}),
            inversion_decoder=InversionConfig(mode="decoder", **{k: v for k, v in (d.get("inversion_decoder") or {}).items() if k != "mode"}),
            mean_latent_samples=int(d.get("mean_latent_samples", 256)),
            evaluation=tupled(EvaluationConfig, "evaluation", ("methods",)),
        )

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise HarnessError(f"{path}: config is not valid JSON: {exc}") from exc
        return ExperimentConfig.from_dict(data)


# -- atomic writers -----------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp.{path.name}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp.{path.name}")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def atomic_save_volume(v: Volume, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp.{path.name}")
    save_volume(v, tmp)
    os.replace(tmp, path)
    os.replace(tmp.with_name(tmp.name + ".json"), path.with_name(path.name + ".json"))
    return path


def atomic_save_latent(z: Latent, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp.{path.name}")
    save_latent(z, tmp)
    os.replace(tmp, path)
    os.replace(tmp.with_name(tmp.name + ".json"), path.with_name(path.name + ".json"))
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x) for x in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


# -- dataset helpers ----------------------------------------------------------


def _case_name(i: int) -> str:
    return f"case_{i:03d}"


def dataset_paths(cfg: ExperimentConfig):
    root = cfg.root
    return root / "data" / "train", root / "data" / "test", root / "data" / "manifest.json"


def load_split(cfg: ExperimentConfig, split: str):
    train_dir, test_dir, manifest = dataset_paths(cfg)
    directory = train_dir if split == "train" else test_dir
    if not manifest.exists():
        raise HarnessError(f"dataset manifest missing at {manifest}; run 'generate' first")
    files = sorted(directory.glob("*.vol"))
    return [load_volume(p) for p in files]


# -- commands -----------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Write train/test phantom volumes plus a hash manifest."""
    train_dir, test_dir, manifest = dataset_paths(cfg)
    data_dir = manifest.parent
    if data_dir.exists() and any(data_dir.iterdir()):
        if not force:
            raise HarnessError(f"output dir {data_dir} is not empty; pass --force to overwrite")
        for sub in (train_dir, test_dir):
            if sub.exists():
                for p in sub.iterdir():
                    p.unlink()
        if manifest.exists():
            manifest.unlink()
    files = {}
    for split, directory, count, offset in (
        ("train", train_dir, cfg.phantoms.train_count, 0),
        ("test", test_dir, cfg.phantoms.test_count, 100000),
    ):
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            vol = make_phantom(cfg.phantoms.spec(seed=cfg.seed + offset + i))
            path = atomic_save_volume(vol, directory / f"phantom_{i:03d}.vol")
            rel = str(path.relative_to(cfg.root))
            files[rel] = _sha256(path)
    payload = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "train_count": cfg.phantoms.train_count,
        "test_count": cfg.phantoms.test_count,
        "files": dict(sorted(files.items())),
    }
    _atomic_write_text(manifest, json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return manifest.parent


def checkpoint_paths(cfg: ExperimentConfig):
    ck = cfg.root / "checkpoints"
    return ck / "autoencoder.pt", ck / "denoiser.pt", ck


def cmd_train(cfg: ExperimentConfig, stage: str) -> Path:
    """Train one stage ('ae' or 'ldm') and write checkpoint + loss CSV."""
    ae_path, dn_path, ck_dir = checkpoint_paths(cfg)
    if stage == "ae":
        volumes = load_split(cfg, "train")
        held_out = load_split(cfg, "test")
        ae_cfg = replace(cfg.autoencoder, volume_shape=cfg.phantoms.shape, latent_shape=(), seed=cfg.seed + 1)
        model, history = train_autoencoder(volumes, ae_cfg, val_volumes=held_out)
        ck_dir.mkdir(parents=True, exist_ok=True)
        save_autoencoder(model, ae_path)
        _write_csv(
            ck_dir / "ae_loss.csv",
            ["epoch", "train_loss", "val_l1", "val_kl"],
            [[h["epoch"], h["train_loss"], h.get("val_l1", ""), h.get("val_kl", "")] for h in history],
        )
        return ae_path
    if stage == "ldm":
        if not ae_path.exists():
            raise HarnessError(f"autoencoder checkpoint missing at {ae_path}; run 'train --stage ae' first")
        ae = load_autoencoder(ae_path)
        volumes = load_split(cfg, "train")
        latents = [encode(ae, v).mean for v in volumes]
        conds = [conditioning_from_volume(v, dim=cfg.diffusion.denoiser.cond_dim) for v in volumes]
        schedule = cfg.schedule.build()
        dn_cfg = replace(
            cfg.diffusion,
            denoiser=replace(cfg.diffusion.denoiser, latent_shape=ae.config.latent_shape),
            seed=cfg.seed + 2,
        )
        model, history = train_denoiser(latents, conds, schedule, dn_cfg, val_fraction=0.1)
        ck_dir.mkdir(parents=True, exist_ok=True)
        save_denoiser(model, schedule, dn_path)
        _write_csv(
            ck_dir / "ldm_loss.csv",
            ["step", "train_loss", "val_loss"],
            [[h["step"], h["train_loss"], h.get("val_loss", "")] for h in history],
        )
        return dn_path
    raise HarnessError(f"unknown training stage {stage!r} (expected 'ae' or 'ldm')")


def cmd_corrupt(cfg: ExperimentConfig) -> Path:
    """Apply each configured corruption to every held-out volume."""
    test_volumes = load_split(cfg, "test")
    out_root = cfg.root / "corrupted"
    for name, spec in cfg.corruption_specs():
        directory = out_root / name
        directory.mkdir(parents=True, exist_ok=True)
        for i, vol in enumerate(test_volumes):
            corrupted = apply_corruption(spec, vol)
            corrupted.meta.update({"corruption": name, "config_hash": cfg.config_hash(), "seed": cfg.seed})
            atomic_save_volume(corrupted, directory / f"{_case_name(i)}.vol")
    return out_root


def _mean_latent_path(cfg: ExperimentConfig) -> Path:
    return cfg.root / "checkpoints" / "mean_latent.vol"


def compute_mean_latent(cfg: ExperimentConfig, ae, denoiser, schedule) -> Latent:
    """Mean latent code in decoder space, cached under checkpoints/."""
    path = _mean_latent_path(cfg)
    if path.exists():
        return load_latent(path)
    subseq = TimestepSubsequence.evenly_spaced(schedule.t_train, cfg.inversion_decoder.t_infer)
    cond = Conditioning.constant(0.5, denoiser.config.cond_dim)
    z_bar = mean_latent(denoiser, schedule, cond, subseq, cfg.mean_latent_samples, seed=cfg.seed + 3)
    z = Latent(data=(z_bar / denoiser.latent_scale).numpy(), role="clean")
    atomic_save_latent(z, path)
    return z


def _recon_dir(cfg: ExperimentConfig, corruption: str, method: str) -> Path:
    return cfg.root / "recon" / corruption / method


def cmd_reconstruct(cfg: ExperimentConfig, method: str, case=None, corruption=None) -> list:
    """Reconstruct held-out cases; writes volume, latent(s), trace, descriptor."""
    if method not in METHODS:
        raise HarnessError(f"unknown method {method!r} (expected one of {METHODS})")
    specs = [(n, s) for n, s in cfg.corruption_specs() if corruption in (None, n)]
    if not specs:
        raise HarnessError(f"corruption {corruption!r} not found in config")
    n_cases = cfg.phantoms.test_count
    cases = [int(case)] if case is not None else list(range(n_cases))
    ae_path, dn_path, _ = checkpoint_paths(cfg)

    ae = denoiser = schedule = None
    if method in ("ldm", "decoder"):
        if not ae_path.exists():
            raise HarnessError(f"autoencoder checkpoint missing at {ae_path}")
        ae = load_autoencoder(ae_path)
        if not dn_path.exists():
            raise HarnessError(f"denoiser checkpoint missing at {dn_path}")
        denoiser, schedule = load_denoiser(dn_path)

    corruption_configs = dict(cfg.corruptions)
    written = []
    for corr_name, spec in specs:
        for i in cases:
            corrupted_path = cfg.root / "corrupted" / corr_name / f"{_case_name(i)}.vol"
            if not corrupted_path.exists():
                raise HarnessError(f"corrupted input missing at {corrupted_path}; run 'corrupt' first")
            observed = load_volume(corrupted_path)
            out_dir = _recon_dir(cfg, corr_name, method)
            out_dir.mkdir(parents=True, exist_ok=True)
            case_seed = cfg.seed + 200000 + i
            descriptor = {
                "config_hash": cfg.config_hash(),
                "method": method,
                "corruption": corr_name,
                "corruption_spec": corruption_configs[corr_name],
                "case": i,
                "seed": case_seed,
            }
            if method in ("ldm", "decoder"):
                descriptor["checkpoints"] = {"autoencoder": str(ae_path), "denoiser": str(dn_path)}
                run_config = cfg.inversion_ldm if method == "ldm" else cfg.inversion_decoder
                descriptor["inversion"] = asdict(replace(run_config, seed=case_seed))
            if method == "cubic":
                if spec.kind != "slice_mask":
                    raise HarnessError(f"cubic baseline requires a slice_mask corruption, got {spec.kind}")
                mask = observation_mask(spec, observed.shape)
                recon = cubic_interpolate(observed, mask, spec.axis)
                trace = []
            elif method == "ldm":
                run_cfg = replace(cfg.inversion_ldm, seed=case_seed)
                result = invert_ldm(ae, denoiser, schedule, observed, spec, run_cfg)
                recon = result.volume
                trace = result.loss_trace
                atomic_save_latent(result.latent, out_dir / f"{_case_name(i)}_latent.vol")
                descriptor["conditioning"] = [float(c) for c in result.conditioning.values]
                descriptor["best_step"] = result.best_step
                descriptor["final_loss"] = float(result.loss_trace[result.best_step])
            else:
                z_init = compute_mean_latent(cfg, ae, denoiser, schedule)
                run_cfg = replace(cfg.inversion_decoder, seed=case_seed)
                result = invert_decoder(ae, observed, spec, run_cfg, z_init)
                recon = result.volume
                trace = result.loss_trace
                atomic_save_latent(result.latent, out_dir / f"{_case_name(i)}_latent.vol")
                descriptor["best_step"] = result.best_step
                descriptor["final_loss"] = float(result.loss_trace[result.best_step])
            recon.meta.update(
                {"method": method, "corruption": corr_name, "case": i, "config_hash": cfg.config_hash(), "seed": case_seed}
            )
            path = atomic_save_volume(recon, out_dir / f"{_case_name(i)}.vol")
            if len(trace):
                _write_csv(out_dir / f"{_case_name(i)}_trace.csv", ["step", "loss"], [[j, float(v)] for j, v in enumerate(trace)])
            _atomic_write_text(out_dir / f"{_case_name(i)}_run.json", json.dumps(descriptor, sort_keys=True, indent=1) + "\n")
            written.append(path)
    return written


def _mid_slices(data: np.ndarray):
    d, h, w = data.shape
    return [data[d // 2, :, :], data[:, h // 2, :], data[:, :, w // 2]]


def _render_grid(rows, path: Path, pad: int = 2) -> None:
    """rows: list of (label, volume-data) rendered as mid-slice strips."""
    tiles = []
    for _, data in rows:
        slices = [np.clip(s, 0.0, 1.0) for s in _mid_slices(data)]
        height = max(s.shape[0] for s in slices)
        width = sum(s.shape[1] for s in slices) + pad * (len(slices) - 1)
        strip = np.zeros((height, width))
        x = 0
        for s in slices:
            strip[: s.shape[0], x : x + s.shape[1]] = s
            x += s.shape[1] + pad
        tiles.append(strip)
    height = sum(t.shape[0] for t in tiles) + pad * (len(tiles) - 1)
    width = max(t.shape[1] for t in tiles)
    canvas = np.zeros((height, width))
    y = 0
    for t in tiles:
        canvas[y : y + t.shape[0], : t.shape[1]] = t
        y += t.shape[0] + pad
    img = Image.fromarray((canvas * 255.0 + 0.5).astype(np.uint8), mode="L")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp.{path.name}")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def cmd_evaluate(cfg: ExperimentConfig) -> Path:
    """Write per-corruption metric tables (text + CSV) and slice renderings."""
    truths = load_split(cfg, "test")
    methods = tuple(cfg.evaluation.methods)
    reports_dir = cfg.root / "reports"
    missing = []
    for corr_name, _ in cfg.corruption_specs():
        for method in methods:
            for i in range(len(truths)):
                p = _recon_dir(cfg, corr_name, method) / f"{_case_name(i)}.vol"
                if not p.exists():
                    missing.append(str(p.relative_to(cfg.root)))
    if missing:
        raise HarnessError("incomplete reconstruction set; missing: " + ", ".join(missing))

    header_note = f"# config={cfg.config_hash()} seed={cfg.seed} region={cfg.evaluation.region}"
    for corr_name, spec in cfg.corruption_specs():
        reports = []
        for method in methods:
            recons = [load_volume(_recon_dir(cfg, corr_name, method) / f"{_case_name(i)}.vol") for i in range(len(truths))]
            reports.append(evaluate_cohort(truths, recons, region=cfg.evaluation.region, method=method, corruption=corr_name))
        lines = [header_note, f"# corruption={corr_name} n={len(truths)}"]
        lines += [r.format_row() for r in reports]
        _atomic_write_text(reports_dir / f"table_{corr_name}.txt", "\n".join(lines) + "\n")
        _write_csv(
            reports_dir / f"table_{corr_name}.csv",
            ["corruption", "method", "n", "ssim_mean", "ssim_se", "psnr_mean", "psnr_se", "config_hash", "seed"],
            [
                [r.corruption, r.method, r.n, r.ssim_mean, r.ssim_se, r.psnr_mean, r.psnr_se, cfg.config_hash(), cfg.seed]
                for r in reports
            ],
        )
        per_case_rows = []
        for r in reports:
            for i, (pv, sv) in enumerate(zip(r.psnr_values, r.ssim_values)):
                per_case_rows.append([r.corruption, r.method, i, sv, pv])
        _write_csv(reports_dir / f"cases_{corr_name}.csv", ["corruption", "method", "case", "ssim", "psnr"], per_case_rows)

        render_dir = reports_dir / "renders" / corr_name
        for i, truth in enumerate(truths):
            corrupted = load_volume(cfg.root / "corrupted" / corr_name / f"{_case_name(i)}.vol")
            rows = [("truth", truth.data), ("input", corrupted.data)]
            for method in methods:
                recon = load_volume(_recon_dir(cfg, corr_name, method) / f"{_case_name(i)}.vol")
                rows.append((method, recon.data))
            _render_grid(rows, render_dir / f"{_case_name(i)}.png")
    return reports_dir


def run_pipeline(cfg: ExperimentConfig, force: bool = False) -> Path:
    """generate -> train ae -> train ldm -> corrupt -> reconstruct -> evaluate."""
    cmd_generate(cfg, force=force)
    cmd_train(cfg, "ae")
    cmd_train(cfg, "ldm")
    cmd_corrupt(cfg)
    for method in cfg.evaluation.methods:
        cmd_reconstruct(cfg, method)
    return cmd_evaluate(cfg)

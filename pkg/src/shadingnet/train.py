"""Training loop, evaluation, single-image decomposition and directory metric comparison."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataio
from .autograd import DTYPE, Tape, Tensor
from .errors import DataError, NumericError, UsageError
from .losses import LossWeights, Targets, is_loss, total_loss
from .metrics import MetricReport
from .model import ArchConfig, ShadingNetParams, build, forward, load_checkpoint, save_checkpoint
from .optim import adam_step

log = logging.getLogger(__name__)

GT_MAPS = ("reflectance", "shading_unified", "shading_direct", "ambient", "shadow")
# files compared by the directory metric command, in report order
METRIC_COMPONENTS = ("reflectance", "shading_unified", "shading_direct", "ambient", "shadow")
MIN_BATCH = 2


@dataclass
class RunConfig:
    dataset_dir: str = "data"
    output_dir: str = "runs/default"
    resolution: tuple[int, int] = (64, 64)
    batch_size: int = 10
    lr: float = 0.00128
    lr_halve_every: int = 4
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.resolution, int):
            self.resolution = (self.resolution, self.resolution)
        self.resolution = tuple(int(v) for v in self.resolution)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_size < 1:
            raise UsageError("batch_size must be at least 1")
        if not self.lr > 0:
            raise UsageError("lr must be positive")
        if self.lr_halve_every < 1:
            raise UsageError("lr_halve_every must be at least 1")
        if self.epochs < 0:
            raise UsageError("epochs must be non-negative")
        if len(self.resolution) != 2 or any(v <= 0 or v % 32 for v in self.resolution):
            raise UsageError(f"resolution {self.resolution} must be positive multiples of 32")

    @classmethod
    def from_json(cls, path, **overrides) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"malformed config {path}: {e}") from e
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-indexed ``epoch``."""
        return self.lr * 0.5 ** (epoch // self.lr_halve_every)


@dataclass
class Batch:
    image: np.ndarray
    maps: dict[str, np.ndarray]

    def targets(self) -> Targets:
        return Targets(image=Tensor(self.image), **{k: Tensor(v) for k, v in self.maps.items()})


def load_split(dataset_dir, split: str, resolution: tuple[int, int] | None = None):
    """Load every sample of ``split`` as (names, 8-bit composites scaled to [0, 1], GT maps)."""
    dataset_dir = Path(dataset_dir)
    manifest = dataio.read_manifest(dataset_dir)
    entries = dataio.split_entries(manifest, split)
    names, images, maps = [], [], []
    for e in entries:
        d = dataset_dir / e["dir"]
        img = dataio.read_png(d / "composite.png")
        if resolution is not None and tuple(img.shape[1:]) != tuple(resolution):
            raise DataError(f"{d}: sample resolution {img.shape[1]}x{img.shape[2]} "
                            f"does not match configured {resolution[0]}x{resolution[1]}")
        names.append(e["dir"])
        images.append(img)
        maps.append({k: dataio.read_f32(d / f"{k}.f32") for k in GT_MAPS})
    return names, images, maps


def _stack(images, maps, idx) -> Batch:
    return Batch(np.stack([images[i] for i in idx]).astype(DTYPE),
                 {k: np.stack([maps[i][k] for i in idx]) for k in GT_MAPS})


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded per-epoch permutation cut into batches; a trailing batch below 2 is dropped."""
    order = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < MIN_BATCH:
        batches.pop()
    return batches


def train_step(net: ShadingNetParams, batch: Batch, lr: float, weights: LossWeights) -> dict:
    targets = batch.targets()
    with Tape() as tape:
        out = forward(net, Tensor(batch.image), mode="train")
        lb = total_loss(out, targets, weights)
        total = lb.total
    value = float(total.data)
    if not np.isfinite(value):
        tape.release()
        raise NumericError(f"non-finite loss {value}")
    tape.backward(total)
    rec = lb.record()
    tape.release()
    adam_step(net, lr)
    rec["is_loss_gt"] = float(is_loss(targets.shading_unified, targets.ambient,
                                      targets.shadow_mag, targets.shading_direct).data)
    return rec


def train(cfg: RunConfig, arch: ArchConfig = ArchConfig(), net: ShadingNetParams | None = None,
          progress=None) -> ShadingNetParams:
    """Run ``cfg.epochs`` epochs; writes ``train_log.jsonl`` and checkpoints under ``output_dir``."""
    names, images, maps = load_split(cfg.dataset_dir, "train", cfg.resolution)
    if len(names) < MIN_BATCH:
        raise DataError(f"train split of {cfg.dataset_dir} has {len(names)} sample(s), need {MIN_BATCH}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    if net is None:
        net = build(cfg.seed, arch)
    step = 0
    with open(out / "train_log.jsonl", "w") as logf:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            for idx in epoch_batches(len(names), cfg.batch_size, cfg.seed, epoch):
                t0 = time.perf_counter()
                rec = train_step(net, _stack(images, maps, idx), lr, cfg.weights)
                rec = {"epoch": epoch, "step": step, "lr": lr, **rec,
                       "ms": round(1000 * (time.perf_counter() - t0), 1)}
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
                if progress:
                    progress(rec)
                step += 1
            done = epoch + 1
            if done == 1:
                save_checkpoint(net, out / "checkpoint_epoch001.shdn")
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(net, out / "latest.shdn")
    save_checkpoint(net, out / "final.shdn")
    log.info("trained %d steps, checkpoint %s", step, out / "final.shdn")
    return net


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --- evaluation --------------------------------------------------------------------------

def _predictions(net: ShadingNetParams, image: np.ndarray) -> dict[str, np.ndarray]:
    """Eval-mode forward of one (3, H, W) image; maps use the dataset names and sign conventions."""
    out = forward(net, Tensor(image[None].astype(DTYPE)), mode="eval")
    o = {k: v.data[0] for k, v in out.items()}
    return {
        "reflectance": o["rho_final"],
        "shading_unified": o["s_u"],
        "ambient": o["ambient"],
        "shadow": -o["shadow_mag"] + DTYPE(0),
        "shading_direct": o["s_u"] - o["ambient"] + o["shadow_mag"],
        "rho_u": o["rho_u"],
        "rho_amb": o["rho_amb"],
        "rho_shad": o["rho_shad"],
    }


def score_sample(report: MetricReport, pred: dict[str, np.ndarray], gt: dict[str, np.ndarray]) -> None:
    rho = gt["reflectance"]
    report.add("rho_final", pred["reflectance"], rho)
    report.add("s_u", pred["shading_unified"], gt["shading_unified"])
    report.add("ambient", pred["ambient"], gt["ambient"], full=False)
    report.add("shadow", pred["shadow"], gt["shadow"], full=False)
    report.add("direct", pred["shading_direct"], gt["shading_direct"], full=False)
    for br in ("rho_u", "rho_amb", "rho_shad"):
        report.add(br, pred[br], rho)


def evaluate(dataset_dir, net: ShadingNetParams, split: str = "test", out_dir=None) -> MetricReport:
    dataset_dir = Path(dataset_dir)
    entries = dataio.split_entries(dataio.read_manifest(dataset_dir), split)
    if not entries:
        raise DataError(f"split {split!r} of {dataset_dir} is empty")
    report = MetricReport()
    for e in entries:
        d = dataset_dir / e["dir"]
        try:
            gt = {k: dataio.read_f32(d / f"{k}.f32") for k in GT_MAPS}
        except DataError as err:
            log.warning("skipping %s: %s", d, err)
            report.skipped += 1
            continue
        image = dataio.read_png(d / "composite.png")
        score_sample(report, _predictions(net, image), gt)
        report.images.append(e["dir"])
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: MetricReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.txt").write_text(report.table() + "\n")


# --- single image ------------------------------------------------------------------------

def _preview(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def decompose(image_path, net: ShadingNetParams, out_dir) -> dict[str, np.ndarray]:
    """Decompose one image file; pads by reflection to a multiple of 32 and crops back."""
    try:
        with Image.open(image_path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {image_path}: {e}") from e
    _, h, w = img.shape
    m = net.config.downsample
    ph, pw = (-h) % m, (-w) % m
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else img
    pred = {k: v[:, :h, :w].copy() for k, v in _predictions(net, padded).items()}
    maps = {k: pred[k] for k in METRIC_COMPONENTS}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, a in maps.items():
        dataio.write_f32(out_dir / f"{name}.f32", a)
        dataio.write_png(out_dir / f"{name}.png", _preview(a))
    return maps


def load_net(checkpoint, arch: ArchConfig = ArchConfig()) -> ShadingNetParams:
    return load_checkpoint(checkpoint, arch)


# --- directory comparison ----------------------------------------------------------------

def _metric_files(root: Path) -> dict[str, set[str]]:
    """sample name -> component files present; ``root`` itself counts as a sample if it holds maps."""
    found: dict[str, set[str]] = {}
    for d in [root] + sorted(p for p in root.iterdir() if p.is_dir()):
        comps = {c for c in METRIC_COMPONENTS if (d / f"{c}.f32").is_file()}
        if comps:
            found["." if d == root else d.name] = comps
    return found


def metrics_dirs(pred_dir, gt_dir) -> MetricReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"{d} is not a directory")
    pf, gf = _metric_files(pred_dir), _metric_files(gt_dir)
    pset = {(s, c) for s, cs in pf.items() for c in cs}
    gset = {(s, c) for s, cs in gf.items() for c in cs}
    if pset != gset or not gset:
        only_p = sorted(f"{s}/{c}.f32" for s, c in pset - gset)
        only_g = sorted(f"{s}/{c}.f32" for s, c in gset - pset)
        raise DataError("file sets differ: only in predictions " + (", ".join(only_p) or "-")
                        + "; only in ground truth " + (", ".join(only_g) or "-"))
    report = MetricReport()
    for sample in sorted(gf):
        for comp in METRIC_COMPONENTS:
            if comp in gf[sample]:
                sub = Path(sample)
                report.add(comp, dataio.read_f32(pred_dir / sub / f"{comp}.f32"),
                           dataio.read_f32(gt_dir / sub / f"{comp}.f32"))
        report.images.append(sample)
    return report

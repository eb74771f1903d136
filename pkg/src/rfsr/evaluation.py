"""Metric evaluation over test sets and the denoising-trajectory analyzer.

``evaluate`` runs full-length inference per image and reports per-image
metric rows plus arithmetic means. ``analyze_trajectory`` decodes the
intermediate latent after every sampling step and tracks per-band SSIM
against the ground truth, the measurement behind the timestep-gated
training split.
"""

from __future__ import annotations

import csv
import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import CaptionProvider, NoneCaptionProvider
from .diffusion import Conditioning, LatentDiffusionModel, rollout_trajectory
from .errors import ConfigurationError, DimensionError
from .imaging import band_ssim, ensure_even, read_image, ssim
from .reward import Caption
from .schedule import TimestepSchedule, timestep_of

PSNR_CAP_DB = 100.0


# ---------------------------------------------------------------------------
# Metric adapters


class MetricAdapter:
    metric_id = "base"
    reference_based = False

    def compute(self, sr: torch.Tensor, gt: torch.Tensor | None = None) -> float:
        raise NotImplementedError


class SsimMetric(MetricAdapter):
    metric_id = "ssim"
    reference_based = True

    def compute(self, sr, gt=None):
        return ssim(sr, gt)


class PsnrMetric(MetricAdapter):
    """PSNR on the unit range, capped so identical images stay finite."""

    metric_id = "psnr"
    reference_based = True

    def compute(self, sr, gt=None):
        mse = float(((sr - gt) ** 2).mean())
        if mse <= 0.0:
            return PSNR_CAP_DB
        return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


class _ExternalIqaMetric(MetricAdapter):
    """Shared shell for learned IQA metrics served by the ``pyiqa`` package.

    Each adapter resizes to its declared input resolution internally, so the
    harness always passes full-resolution images.
    """

    pyiqa_name = ""
    input_size: int | None = None

    def __init__(self):
        try:
            import pyiqa
        except ImportError as exc:
            raise ConfigurationError(
                f"metric '{self.metric_id}' needs the optional 'pyiqa' package"
            ) from exc
        self._metric = pyiqa.create_metric(self.pyiqa_name, device="cpu")

    def _prep(self, img: torch.Tensor) -> torch.Tensor:
        x = img.permute(2, 0, 1).unsqueeze(0).float()
        if self.input_size is not None:
            x = torch.nn.functional.interpolate(
                x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False
            )
        return x

    def compute(self, sr, gt=None):
        with torch.no_grad():
            if self.reference_based:
                return float(self._metric(self._prep(sr), self._prep(gt)))
            return float(self._metric(self._prep(sr)))


class LpipsMetric(_ExternalIqaMetric):
    metric_id = "lpips"
    reference_based = True
    pyiqa_name = "lpips"


class ManiqaMetric(_ExternalIqaMetric):
    metric_id = "maniqa"
    pyiqa_name = "maniqa"


class MusiqMetric(_ExternalIqaMetric):
    metric_id = "musiq"
    pyiqa_name = "musiq"


class ClipIqaMetric(_ExternalIqaMetric):
    metric_id = "clipiqa"
    pyiqa_name = "clipiqa"
    input_size = 224


class AestheticMetric(_ExternalIqaMetric):
    metric_id = "aesthetic"
    pyiqa_name = "laion_aes"
    input_size = 224


METRIC_KINDS = {
    "ssim": SsimMetric,
    "psnr": PsnrMetric,
    "lpips": LpipsMetric,
    "maniqa": ManiqaMetric,
    "musiq": MusiqMetric,
    "clipiqa": ClipIqaMetric,
    "aesthetic": AestheticMetric,
}


def build_metrics(names: list[str]) -> list[MetricAdapter]:
    adapters = []
    for name in names:
        if name not in METRIC_KINDS:
            raise ConfigurationError(f"unknown metric '{name}'; expected one of {sorted(METRIC_KINDS)}")
        adapters.append(METRIC_KINDS[name]())
    return adapters


# ---------------------------------------------------------------------------
# Eval datasets


@dataclass(frozen=True)
class EvalItem:
    image_id: str
    lr: torch.Tensor
    gt: torch.Tensor | None = None


def load_eval_items(data_dir: Path) -> list[EvalItem]:
    """Read LR/GT pairs from a directory, preferring the manifest emitted by
    the degrade command; falls back to pairing lr/ and gt/ by filename."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.csv"
    items = []
    if manifest.exists():
        with open(manifest) as fh:
            for row in csv.DictReader(fh):
                gt_path = row.get("gt_path", "")
                items.append(
                    EvalItem(
                        image_id=row["source_id"],
                        lr=read_image(data_dir / row["lr_path"]),
                        gt=read_image(data_dir / gt_path) if gt_path else None,
                    )
                )
        return items
    lr_dir, gt_dir = data_dir / "lr", data_dir / "gt"
    if not lr_dir.is_dir():
        raise ConfigurationError(f"no manifest.csv or lr/ directory under {data_dir}")
    for lr_path in sorted(lr_dir.glob("*.png")):
        gt_path = gt_dir / lr_path.name
        items.append(
            EvalItem(
                image_id=lr_path.stem,
                lr=read_image(lr_path),
                gt=read_image(gt_path) if gt_path.exists() else None,
            )
        )
    if not items:
        raise ConfigurationError(f"no evaluation images found under {data_dir}")
    return items


class DiffusionSuperResolver:
    """Eval-time inference wrapper: deterministic per-item latents, full
    ``st_latest``-step rollout, no gradients."""

    def __init__(
        self,
        model: LatentDiffusionModel,
        schedule: TimestepSchedule,
        seed: int = 0,
        caption_provider: CaptionProvider | None = None,
        scale: int = 4,
    ):
        self.model = model
        self.schedule = schedule
        self.seed = seed
        self.caption_provider = caption_provider or NoneCaptionProvider()
        self.scale = scale

    def infer(self, item: EvalItem) -> torch.Tensor:
        h = item.lr.shape[0] * self.scale
        w = item.lr.shape[1] * self.scale
        if item.gt is not None:
            h, w = item.gt.shape[0], item.gt.shape[1]
        item_seed = int(
            np.random.SeedSequence(
                [self.seed & 0xFFFFFFFF, zlib.crc32(item.image_id.encode())]
            ).generate_state(1)[0]
        )
        gen = torch.Generator().manual_seed(item_seed)
        z = torch.randn(self.model.latent_shape(h, w), generator=gen)
        cond = Conditioning(lr_image=item.lr, caption=self.caption_provider.caption(item.lr))
        points = rollout_trajectory(self.model, z, self.schedule, cond, decode_each=False)
        with torch.no_grad():
            return self.model.decode(points[-1].latent)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: dict[str, float] = field(default_factory=dict)
    dataset_id: str = ""
    model_id: str = ""
    config_hash: str = ""

    def metric_names(self) -> list[str]:
        return [k for k in self.rows[0] if k != "image_id"] if self.rows else []

    def save_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = self.metric_names()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", *names])
            for row in self.rows:
                writer.writerow([row["image_id"], *[row[n] for n in names]])
            writer.writerow(["mean", *[self.aggregates.get(n, float("nan")) for n in names]])
        return path


def evaluate(
    model,
    items: list[EvalItem],
    metrics: list[MetricAdapter],
    out_csv: Path | None = None,
    dataset_id: str = "",
    model_id: str = "",
    config_hash: str = "",
) -> EvalReport:
    """Score a model over an eval set.

    ``model`` is anything with ``infer(item) -> image``. A metric failure on
    one image logs a warning and records a missing value that is excluded
    from that metric's mean.
    """
    report = EvalReport(dataset_id=dataset_id, model_id=model_id, config_hash=config_hash)
    for item in items:
        sr = model.infer(item)
        row: dict = {"image_id": item.image_id}
        for metric in metrics:
            try:
                if metric.reference_based and item.gt is None:
                    raise ConfigurationError(f"metric '{metric.metric_id}' needs a ground truth")
                row[metric.metric_id] = metric.compute(sr, item.gt)
            except Exception as exc:
                warnings.warn(f"metric '{metric.metric_id}' failed on '{item.image_id}': {exc}")
                row[metric.metric_id] = float("nan")
        report.rows.append(row)
    for metric in metrics:
        vals = [r[metric.metric_id] for r in report.rows if math.isfinite(r[metric.metric_id])]
        report.aggregates[metric.metric_id] = float(np.mean(vals)) if vals else float("nan")
    if out_csv is not None:
        report.save_csv(out_csv)
    return report


# ---------------------------------------------------------------------------
# Trajectory analysis


@dataclass(frozen=True)
class TrajectoryRecord:
    st: int
    t: int
    ll_ssim: float
    high_ssim: float


TRAJECTORY_COLUMNS = ("st", "t", "ll_ssim", "high_ssim")


def analyze_image_sequence(
    images: list[torch.Tensor], gt: torch.Tensor, schedule: TimestepSchedule
) -> list[TrajectoryRecord]:
    """Band-SSIM of each per-step image against the ground truth."""
    if len(images) != schedule.st_latest:
        raise DimensionError(
            f"expected {schedule.st_latest} per-step images, got {len(images)}"
        )
    records = []
    for st, img in enumerate(images, start=1):
        if img.shape != gt.shape:
            raise DimensionError(
                f"step {st} image shape {tuple(img.shape)} != gt shape {tuple(gt.shape)}"
            )
        bands = band_ssim(img, gt)
        records.append(
            TrajectoryRecord(
                st=st, t=timestep_of(schedule, st), ll_ssim=bands.ll_ssim, high_ssim=bands.high_ssim
            )
        )
    return records


def write_trajectory_csv(records: list[TrajectoryRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for r in records:
            writer.writerow([r.st, r.t, r.ll_ssim, r.high_ssim])
    return path


def plot_trajectory(records: list[TrajectoryRecord], path: Path) -> Path:
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigurationError("plotting needs the optional matplotlib package") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sts = [r.st for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(sts, [r.ll_ssim for r in records], marker="o", label="low-frequency SSIM")
    ax.plot(sts, [r.high_ssim for r in records], marker="s", label="high-frequency SSIM")
    ax.set_xlabel("sampling step")
    ax.set_ylabel("SSIM vs ground truth")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def analyze_trajectory(
    model: LatentDiffusionModel,
    lr: torch.Tensor,
    gt: torch.Tensor,
    schedule: TimestepSchedule,
    seed: int = 0,
    caption: Caption | None = None,
    out_csv: Path | None = None,
    plot_path: Path | None = None,
) -> list[TrajectoryRecord]:
    """Decode the intermediate latent after every sampling step and compare
    per-band SSIM against the ground truth."""
    gt = ensure_even(gt)
    z = torch.randn(
        model.latent_shape(gt.shape[0], gt.shape[1]),
        generator=torch.Generator().manual_seed(seed),
    )
    cond = Conditioning(lr_image=lr, caption=caption)
    points = rollout_trajectory(model, z, schedule, cond, decode_each=True)
    records = analyze_image_sequence([p.image for p in points], gt, schedule)
    if out_csv is not None:
        write_trajectory_csv(records, out_csv)
    if plot_path is not None:
        plot_trajectory(records, plot_path)
    return records

"""Datasets, manifests, configuration and image I/O.

Training code sees frames only: :class:`FrameDataset` never opens camera
files, so ground truth cannot leak into optimization. Evaluation loads
ground-truth cameras explicitly via :func:`load_gt_cameras`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .losses import LossConfig
from .model import ModelConfig, TransformerSpec


# ----------------------------------------------------------------- image I/O

def load_image(path: str | Path) -> Tensor:
    """8-bit image file -> float32 [H, W, 3] in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def save_image(tensor: Tensor, path: str | Path) -> None:
    """float [H, W, 3] in [0, 1] -> 8-bit PNG."""
    arr = np.clip(np.round(tensor.detach().cpu().numpy() * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# -------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 500
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.02
    grad_clip: float = 1.0
    seed: int = 0
    n_min: int = 2
    n_max: int = 4
    batch_clips: int = 1
    log_every: int = 10
    checkpoint_every: int = 0  # 0: final checkpoint only
    dump_images_every: int = 0  # 0: no PNG dumps
    short_clip_policy: str = "resample"  # or "truncate"
    proj_decay_start_frac: float = 0.4
    proj_decay_end_frac: float = 0.9
    interp_context: str = "first"  # context of the initial two-frame pass

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if not (2 <= self.n_min <= self.n_max):
            raise ValueError("need 2 <= n_min <= n_max")
        if self.short_clip_policy not in ("resample", "truncate"):
            raise ValueError("short_clip_policy must be 'resample' or 'truncate'")


@dataclass
class DataConfig:
    root: str = "data/train"
    height: int = 64
    width: int = 64
    clip_length: int = 30  # ingestion chunk size


@dataclass
class Config:
    schema_version: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        model_d = dict(d.get("model", {}))
        for key in ("per_frame", "camera", "context", "view_synthesis"):
            if key in model_d:
                model_d[key] = TransformerSpec(**model_d[key])
        return cls(
            schema_version=d.get("schema_version", 1),
            model=ModelConfig(**model_d),
            loss=LossConfig(**d.get("loss", {})),
            train=TrainConfig(**d.get("train", {})),
            data=DataConfig(**d.get("data", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def toy_config(**train_overrides) -> Config:
    """64x64 desk-scale preset."""
    cfg = Config(model=ModelConfig.toy())
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    cfg.data.height = cfg.model.height
    cfg.data.width = cfg.model.width
    return cfg


def toy_small_config(**train_overrides) -> Config:
    """32x32 preset; cheap enough for splat-heavy stage-2 runs."""
    cfg = Config(model=ModelConfig.toy_small())
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    cfg.data.height = cfg.model.height
    cfg.data.width = cfg.model.width
    return cfg


# ------------------------------------------------------------------ manifest

@dataclass
class ClipRecord:
    clip_id: str
    frames: list[str]  # paths relative to the manifest root
    cameras: str | None
    depth: str | None
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    resolution: tuple[int, int]  # (H, W)
    clips: list[ClipRecord]

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        clips = [
            ClipRecord(
                clip_id=c["id"],
                frames=c["frames"],
                cameras=c.get("cameras"),
                depth=c.get("depth"),
                split=c.get("split", "train"),
            )
            for c in d["clips"]
        ]
        return cls(root=path.parent, resolution=tuple(d["resolution"]), clips=clips)

    def save(self, path: str | Path) -> None:
        d = {
            "schema_version": 1,
            "resolution": list(self.resolution),
            "clips": [
                {
                    "id": c.clip_id,
                    "frames": c.frames,
                    "cameras": c.cameras,
                    "depth": c.depth,
                    "split": c.split,
                }
                for c in self.clips
            ],
        }
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    def subset(self, split: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == split]


class FrameDataset:
    """Training view of a dataset: frames only, never ground truth.

    The class exposes no way to reach camera or depth files; training code
    built on it provably cannot read them.
    """

    def __init__(self, manifest: DatasetManifest, split: str = "train"):
        self.root = manifest.root
        self.clips = [c.frames for c in manifest.subset(split)]
        if not self.clips:
            raise ValueError(f"no clips with split '{split}'")

    def __len__(self) -> int:
        return len(self.clips)

    def clip_length(self, idx: int) -> int:
        return len(self.clips[idx])

    def load_window(self, clip_idx: int, start: int, count: int) -> Tensor:
        paths = self.clips[clip_idx][start: start + count]
        return torch.stack([load_image(self.root / p) for p in paths])


def load_gt_cameras(manifest: DatasetManifest, clip: ClipRecord) -> list[dict]:
    """Ground-truth cameras for evaluation; raises if the clip has none."""
    if clip.cameras is None:
        raise ValueError(f"clip {clip.clip_id} carries no ground-truth cameras")
    return json.loads((manifest.root / clip.cameras).read_text())


def load_gt_depth(manifest: DatasetManifest, clip: ClipRecord) -> np.ndarray:
    if clip.depth is None:
        raise ValueError(f"clip {clip.clip_id} carries no ground-truth depth")
    return np.load(manifest.root / clip.depth)


# ----------------------------------------------------------------- ingestion

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def _center_crop_resize(img: Image.Image, height: int, width: int) -> Image.Image:
    w, h = img.size
    target_ratio = width / height
    if w / h > target_ratio:  # too wide
        new_w = int(round(h * target_ratio))
        left = (w - new_w) // 2
        img = img.crop((left, 0, left + new_w, h))
    else:
        new_h = int(round(w / target_ratio))
        top = (h - new_h) // 2
        img = img.crop((0, top, w, top + new_h))
    return img.resize((width, height), Image.BILINEAR)


def ingest_frames(
    src_dir: str | Path,
    out_dir: str | Path,
    height: int,
    width: int,
    clip_length: int,
    split: str = "train",
) -> Path:
    """Turn a directory of sortably-named frames into a normalized dataset.

    Frames are center-cropped to the target aspect, rescaled and re-encoded
    as PNG; the directory is chunked into clips of ``clip_length``. A
    camera text file in the source directory (one pose line per frame) is
    parsed into per-clip ground-truth cameras for evaluation use only.
    Unreadable frames are skipped with a warning.
    """
    import logging

    log = logging.getLogger(__name__)
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    camera_entries = None
    txts = sorted(src_dir.glob("*.txt"))
    if txts:
        camera_entries = parse_pose_tracking_file(txts[0])

    processed = []
    for p in frames:
        try:
            with Image.open(p) as img:
                out = _center_crop_resize(img.convert("RGB"), height, width)
        except OSError as exc:
            log.warning("skipping unreadable frame %s: %s", p, exc)
            continue
        processed.append(out)

    clips = []
    for ci, start in enumerate(range(0, len(processed), clip_length)):
        chunk = processed[start: start + clip_length]
        if len(chunk) < 2:
            continue  # a clip needs at least two frames
        clip_id = f"clip_{ci:04d}"
        clip_dir = out_dir / clip_id
        clip_dir.mkdir(exist_ok=True)
        frame_paths = []
        for fi, img in enumerate(chunk):
            path = clip_dir / f"frame_{fi:03d}.png"
            img.save(path)
            frame_paths.append(str(path.relative_to(out_dir)))
        cameras_path = None
        if camera_entries is not None and start + len(chunk) <= len(camera_entries):
            records = [
                tracking_entry_to_camera(camera_entries[start + k], width, height)
                for k in range(len(chunk))
            ]
            cam_file = clip_dir / "cameras.json"
            cam_file.write_text(json.dumps(records, indent=2) + "\n")
            cameras_path = str(cam_file.relative_to(out_dir))
        clips.append(
            ClipRecord(clip_id=clip_id, frames=frame_paths, cameras=cameras_path, depth=None, split=split)
        )

    manifest = DatasetManifest(root=out_dir, resolution=(height, width), clips=clips)
    manifest_path = out_dir / "manifest.json"
    manifest.save(manifest_path)
    return manifest_path


# ------------------------------------------------- camera-track compatibility

def parse_pose_tracking_file(path: str | Path) -> list[dict]:
    """Parse the common video pose-track text format.

    Line layout: timestamp, normalized fx fy cx cy, two zeros, then a
    row-major 3x4 world-to-camera matrix (19 fields). A leading URL line
    is tolerated and skipped.
    """
    entries = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) != 19:
            continue
        vals = [float(x) for x in parts]
        entries.append(
            {
                "timestamp": vals[0],
                "fx_norm": vals[1],
                "fy_norm": vals[2],
                "cx_norm": vals[3],
                "cy_norm": vals[4],
                "w2c": np.array(vals[7:19]).reshape(3, 4),
            }
        )
    return entries


def tracking_entry_to_camera(entry: dict, width: int, height: int) -> dict:
    """Convert a parsed pose-track entry to the camera JSON schema
    (camera-to-world, quaternion + translation)."""
    from .geometry import rotation_to_quat

    R_w2c = entry["w2c"][:, :3]
    t_w2c = entry["w2c"][:, 3]
    R = R_w2c.T
    t = -R_w2c.T @ t_w2c
    q = rotation_to_quat(torch.tensor(R)).numpy()
    return {
        "fx": entry["fx_norm"] * width,
        "fy": entry["fy_norm"] * height,
        "width": width,
        "height": height,
        "q": [float(x) for x in q],
        "t": [float(x) for x in t],
    }


def serialize_tracking_entries(entries: list[dict]) -> str:
    """Inverse of :func:`parse_pose_tracking_file` (for round-trip tests)."""
    lines = []
    for e in entries:
        fields = [e["timestamp"], e["fx_norm"], e["fy_norm"], e["cx_norm"], e["cy_norm"], 0.0, 0.0]
        fields += list(e["w2c"].reshape(-1))
        lines.append(" ".join(f"{x:.9g}" for x in fields))
    return "\n".join(lines) + "\n"


def camera_record_to_tensors(record: dict) -> tuple["Intrinsics", "Extrinsics"]:
    """Camera JSON record -> (Intrinsics, Extrinsics) in float64."""
    from .geometry import Extrinsics, Intrinsics

    K = Intrinsics(
        fx=float(record["fx"]), fy=float(record["fy"]),
        width=int(record["width"]), height=int(record["height"]),
    )
    P = Extrinsics(q=torch.tensor(record["q"], dtype=torch.float64),
                   t=torch.tensor(record["t"], dtype=torch.float64))
    return K, P

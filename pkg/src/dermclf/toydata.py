"""Small synthetic ground-truth fixture in the ISIC on-disk layout.

Each category gets its own base colour plus noise and a randomly placed blob,
so a tiny network can separate them. Images are deliberately not square and
not 224 px to exercise the resize path.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .config import DataConfig, EvalConfig, ModelConfig, RunConfig, dump_config
from .dataset import CATEGORY_CODES, GROUND_TRUTH_HEADER, N_CATEGORIES
from .trainer import PhaseLayout, TrainConfig

_PALETTE = np.array([
    (200, 40, 40), (40, 40, 200), (40, 180, 40), (200, 200, 40),
    (180, 40, 180), (40, 190, 190), (120, 120, 120),
], dtype=np.float64)


def _image(label: int, rng: np.random.Generator, size: tuple[int, int]) -> Image.Image:
    w, h = size
    img = np.empty((h, w, 3))
    img[:] = _PALETTE[label]
    img += rng.normal(0, 20, size=img.shape)
    cy, cx = rng.integers(h // 4, 3 * h // 4), rng.integers(w // 4, 3 * w // 4)
    yy, xx = np.mgrid[:h, :w]
    img[(yy - cy) ** 2 + (xx - cx) ** 2 < (min(h, w) // 5) ** 2] *= 0.5
    return Image.fromarray(np.clip(img, 0, 255).astype(np.uint8), "RGB")


def write_toy_dataset(root: str | Path, per_category: dict[str, int] | None = None,
                      categories: Iterable[int] = range(N_CATEGORIES), size: tuple[int, int] = (120, 90),
                      seed: int = 0) -> dict[str, Path]:
    """Write images under ``root/images`` and one ground-truth CSV per split.

    ``per_category`` maps split -> images per category; the default
    (train 2, val 1, test 1) gives the 14/7/7 fixture.
    """
    root = Path(root)
    per_category = per_category or {"train": 2, "val": 1, "test": 1}
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    categories = list(categories)
    csvs = {}
    for split, n in per_category.items():
        lines = [",".join(GROUND_TRUTH_HEADER)]
        for label in categories:
            for k in range(n):
                image_id = f"TOY_{split}_{CATEGORY_CODES[label]}_{k:03d}"
                _image(label, rng, size).save(images / f"{image_id}.jpg", quality=95)
                lines.append(",".join([image_id, *("1.0" if i == label else "0.0" for i in range(N_CATEGORIES))]))
        csvs[split] = root / f"{split}_ground_truth.csv"
        csvs[split].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csvs


def toy_config(root: str | Path, epochs_per_phase: int = 1) -> RunConfig:
    """Toy backbone, narrow head, batch 4 and one cycle per phase."""
    root = Path(root)
    return RunConfig(
        data=DataConfig(str(root / "images"), str(root / "train_ground_truth.csv"),
                        str(root / "val_ground_truth.csv"), str(root / "test_ground_truth.csv")),
        model=ModelConfig(backbone="toy", hidden_widths=(16, 16)),
        train=TrainConfig(
            batch_size=4,
            phases=(PhaseLayout(1, epochs_per_phase, 1, (0, 1)), PhaseLayout(1, epochs_per_phase, 1, ())),
            output_dir=str(root / "run"),
        ),
        eval=EvalConfig(tta=True, n_aug=2),
    )


def write_toy_config(root: str | Path, **kwargs) -> Path:
    # paths inside a config file resolve against the file's directory
    path = Path(root) / "config.toml"
    path.write_text(dump_config(toy_config(".", **kwargs)), encoding="utf-8")
    return path

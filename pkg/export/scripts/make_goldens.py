"""Regenerate the committed sample corpus and golden export artifacts.

Run from the export package root:
    python3 scripts/make_goldens.py
"""

from pathlib import Path

import numpy as np
from PIL import Image

from shapeminer_export import AugmentationSpec, ExportJob, export_features

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "tests" / "data"
GOLDEN = ROOT / "tests" / "golden"


def sample_image(seed: int, size: int = 64) -> Image.Image:
    """A colored disk or box on a gray gradient background."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size].astype(np.float32) / size
    bg = 0.35 + 0.2 * x
    img = np.stack([bg, bg, bg], axis=-1)
    cx, cy = rng.uniform(0.35, 0.65, 2)
    r = rng.uniform(0.15, 0.28)
    color = rng.uniform(0.55, 1.0, 3)
    if seed % 2 == 0:
        inside = (x - cx) ** 2 + (y - cy) ** 2 < r**2
    else:
        inside = (np.abs(x - cx) < r) & (np.abs(y - cy) < r)
    img[inside] = color
    return Image.fromarray((img * 255).astype(np.uint8), mode="RGB")


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(5):
        name = f"img{i}.png"
        sample_image(i).save(DATA / name)
        entries.append({"id": f"img{i}", "silhouette": name, "raster": name})
    (DATA / "manifest.json").write_text(
        __import__("json").dumps({"entries": entries}, indent=1)
    )

    GOLDEN.mkdir(parents=True, exist_ok=True)
    export_features(ExportJob(
        manifest=DATA / "manifest.json",
        out_dir=GOLDEN,
        augmentations=AugmentationSpec(count=10, seed=0),
        backbone="fallback",
    ))
    print(f"wrote sample corpus to {DATA} and goldens to {GOLDEN}")


if __name__ == "__main__":
    main()

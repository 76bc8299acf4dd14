"""Dataset directories: ``manifest.csv``, ``dataset.yaml`` and ``images/``.

Images are stored either as ``.npy`` (lossless float64) or as 8-bit ``.png``
(quantised to 1/255 steps).
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import numpy as np
from PIL import Image

from diffound_mad.core.model import BONA_FIDE, PairSample
from diffound_mad.errors import ArtifactIOError, CompatibilityError, ProtocolError
from diffound_mad.provenance import input_hash
from diffound_mad.storage.run_store import read_yaml, write_yaml
from diffound_mad.storage.score_files import LABEL_VALUES, LABELS

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
METADATA = "dataset.yaml"
IMAGES = "images"
MANIFEST_COLUMNS = ["pair_id", "suspected_path", "live_path", "label", "tool_tag", "split"]

ImageFormat = Literal["npy", "png"]


def save_image(path: Path, image: np.ndarray, fmt: ImageFormat) -> None:
    if fmt == "npy":
        np.save(path, np.asarray(image, dtype=np.float64), allow_pickle=False)
        return
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    if pixels.shape[0] == 1:
        Image.fromarray(pixels[0]).save(path)
    elif pixels.shape[0] == 3:
        Image.fromarray(np.ascontiguousarray(np.transpose(pixels, (1, 2, 0)))).save(path)
    else:
        raise ArtifactIOError(f"PNG storage needs 1 or 3 channels, got {pixels.shape[0]}", path)


def load_image(path: Path) -> np.ndarray:
    try:
        if path.suffix == ".npy":
            return np.load(path, allow_pickle=False)
        with Image.open(path) as img:
            pixels = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ArtifactIOError(f"cannot read image ({exc})", path) from exc
    return pixels[None] if pixels.ndim == 2 else np.transpose(pixels, (2, 0, 1))


@dataclass
class Dataset:
    """Pairs grouped by split name, plus the sidecar metadata."""

    splits: Dict[str, List[PairSample]]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def split(self, name: str) -> List[PairSample]:
        if name not in self.splits:
            raise ProtocolError(f"dataset has no split '{name}' (has {sorted(self.splits)})")
        return self.splits[name]

    @property
    def input_hash(self) -> str:
        return self.metadata["input_hash"]


class DatasetStore:
    """Reads and writes one dataset directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def save(
        self,
        splits: Mapping[str, List[PairSample]],
        fmt: ImageFormat = "npy",
        metadata: Optional[Mapping[str, Any]] = None,
    ) -> Path:
        images = self.root / IMAGES
        try:
            images.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ArtifactIOError(f"cannot create dataset directory ({exc.strerror})", images) from exc
        shape = None
        rows = []
        for split, pairs in splits.items():
            for pair in pairs:
                shape = shape or pair.suspected.shape
                if pair.suspected.shape != shape:
                    raise CompatibilityError(
                        f"pair {pair.pair_id} has shape {pair.suspected.shape}, dataset uses {shape}"
                    )
                sus = f"{IMAGES}/{pair.pair_id}_s.{fmt}"
                live = f"{IMAGES}/{pair.pair_id}_l.{fmt}"
                save_image(self.root / sus, pair.suspected, fmt)
                save_image(self.root / live, pair.live, fmt)
                rows.append([pair.pair_id, sus, live, LABELS[pair.label], pair.tool_tag, split])
        if shape is None:
            raise ProtocolError("refusing to write an empty dataset")
        manifest = self.root / MANIFEST
        try:
            with open(manifest, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(MANIFEST_COLUMNS)
                writer.writerows(rows)
        except OSError as exc:
            raise ArtifactIOError(f"cannot write manifest ({exc.strerror})", manifest) from exc
        channels, size = shape[0], shape[-1]
        write_yaml(
            self.root / METADATA,
            {
                "image_size": int(size),
                "channels": int(channels),
                "storage_format": fmt,
                "input_hash": input_hash(int(size), int(channels)),
                "counts": {
                    split: {
                        "bonafide": sum(p.label == BONA_FIDE for p in pairs),
                        "morph": sum(p.label != BONA_FIDE for p in pairs),
                    }
                    for split, pairs in splits.items()
                },
                **(metadata or {}),
            },
        )
        logger.info("wrote %d pairs to %s", len(rows), self.root)
        return self.root

    def load(self) -> Dataset:
        manifest = self.root / MANIFEST
        metadata = read_yaml(self.root / METADATA)
        splits: Dict[str, List[PairSample]] = {}
        try:
            with open(manifest, newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
                if missing:
                    raise ArtifactIOError(f"manifest lacks columns {sorted(missing)}", manifest)
                for row in reader:
                    label = LABEL_VALUES.get(row["label"])
                    if label is None:
                        raise ArtifactIOError(f"unknown label '{row['label']}'", manifest)
                    pair = PairSample(
                        pair_id=row["pair_id"],
                        suspected=load_image(self.root / row["suspected_path"]),
                        live=load_image(self.root / row["live_path"]),
                        label=label,
                        tool_tag=row["tool_tag"],
                    )
                    splits.setdefault(row["split"], []).append(pair)
        except ArtifactIOError:
            raise
        except OSError as exc:
            raise ArtifactIOError(f"cannot read manifest ({exc.strerror})", manifest) from exc
        expected = input_hash(int(metadata.get("image_size", -1)), int(metadata.get("channels", -1)))
        if metadata.get("input_hash") != expected:
            raise CompatibilityError(f"{self.root}: dataset metadata hash does not match its geometry")
        logger.info("loaded %s from %s", {k: len(v) for k, v in splits.items()}, self.root)
        return Dataset(splits, metadata)

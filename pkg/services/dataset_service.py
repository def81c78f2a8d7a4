import logging
import struct
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.rotation import make_rotation
from errors import CifarFormatError, DataNotFoundError, DimensionError, IdxFormatError
from models import Provenance
from storage import Container, read_container, write_container

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Split = Literal["train", "test"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
# subdirectories the standard archives unpack into
MNIST_SUBDIRS = ("", "mnist", "MNIST/raw")
CIFAR_SUBDIRS = ("", "cifar-10-batches-bin", "cifar10")


class Dataset(BaseModel):
    """Images [N, C, H, W] in [0, 1] with integer labels [N] in [0, 10)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    images: np.ndarray
    labels: np.ndarray
    split: Split = "train"
    name: str = "custom"
    provenance: Provenance = Field(default_factory=Provenance)

    @model_validator(mode="after")
    def check_arrays(self):
        if self.images.ndim != 4:
            raise DimensionError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError(f"{self.images.shape[0]} images but labels of shape {self.labels.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels must lie in [0, 10)")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)
        return self

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def head(self, limit: Optional[int]) -> "Dataset":
        """Первые limit образцов (все, если limit равен None)"""
        if limit is None or limit >= len(self):
            return self
        return Dataset(
            images=self.images[:limit].copy(),
            labels=self.labels[:limit].copy(),
            split=self.split,
            name=self.name,
            provenance=self.provenance,
        )


def rot_mnist_seed(split: Split, seed: int) -> int:
    # the two splits never share an angle sequence
    return seed if split == "train" else seed + 1


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataNotFoundError(f"no such file: {path}")
    return path.read_bytes()


def _parse_idx(buf: bytes, path: str, magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError(f"truncated {what} header", path, len(buf))
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IdxFormatError(f"{what} file: expected magic 0x{magic:08X}, found 0x{found:08X}", path, 0)
    ndim = found & 0xFF
    header_len = 4 + 4 * ndim
    if len(buf) < header_len:
        raise IdxFormatError(f"truncated {what} dimension header", path, len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(buf) - header_len
    if payload < expected:
        raise IdxFormatError(
            f"truncated {what} payload: expected {expected} bytes, found {payload}", path, len(buf)
        )
    if payload > expected:
        raise IdxFormatError(f"{payload - expected} trailing bytes after the {what} payload", path, header_len + expected)
    return np.frombuffer(buf, dtype=np.uint8, offset=header_len).reshape(dims)


class DatasetService:
    def __init__(self, data_dir: PathLike):
        self.data_dir = Path(data_dir)

    # -- format readers ---------------------------------------------------

    @staticmethod
    def load_mnist_idx(images_path: PathLike, labels_path: PathLike, split: Split = "train") -> Dataset:
        """Чтение пары IDX-файлов MNIST"""
        images = _parse_idx(_read_bytes(images_path), str(images_path), IDX_IMAGES_MAGIC, "images")
        labels = _parse_idx(_read_bytes(labels_path), str(labels_path), IDX_LABELS_MAGIC, "labels")
        if images.shape[0] != labels.shape[0]:
            raise IdxFormatError(
                f"{images.shape[0]} images but {labels.shape[0]} labels", str(labels_path), 4
            )
        bad = np.flatnonzero(labels > 9)
        if bad.size:
            raise IdxFormatError(f"label {labels[bad[0]]} out of range", str(labels_path), 8 + int(bad[0]))
        return Dataset(
            images=(images.astype(np.float64) / 255.0)[:, None],
            labels=labels.astype(np.int64),
            split=split,
            name="mnist",
            provenance=Provenance(sources=[str(images_path), str(labels_path)]),
        )

    @staticmethod
    def load_cifar10(batch_paths: Sequence[PathLike], split: Split = "train") -> Dataset:
        """Чтение бинарных батчей CIFAR-10"""
        images: List[np.ndarray] = []
        labels: List[np.ndarray] = []
        for path in batch_paths:
            buf = _read_bytes(path)
            if not buf:
                logger.warning("CIFAR-10 batch %s is empty", path)
                continue
            if len(buf) % CIFAR_RECORD:
                raise CifarFormatError(
                    f"size {len(buf)} is not a multiple of {CIFAR_RECORD}", str(path), len(buf) - len(buf) % CIFAR_RECORD
                )
            records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
            bad = np.flatnonzero(records[:, 0] > 9)
            if bad.size:
                raise CifarFormatError(
                    f"label byte {records[bad[0], 0]} out of range", str(path), int(bad[0]) * CIFAR_RECORD
                )
            labels.append(records[:, 0].astype(np.int64))
            images.append(records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0)
        if not images:
            images, labels = [np.zeros((0, *CIFAR_SHAPE))], [np.zeros((0,), dtype=np.int64)]
        return Dataset(
            images=np.concatenate(images),
            labels=np.concatenate(labels),
            split=split,
            name="cifar10",
            provenance=Provenance(sources=[str(p) for p in batch_paths]),
        )

    @staticmethod
    def generate_rot_mnist(base: Dataset, seed: int) -> Dataset:
        """Поворот каждого изображения на свой случайный угол из [0, 360), билинейно, с нулевым заполнением"""
        if base.images.ndim != 4 or base.images.shape[1] != 1:
            raise DimensionError(f"rot-MNIST needs single-channel images, got {base.images.shape}")
        rng = np.random.default_rng(seed)
        angles = rng.uniform(0.0, 360.0, size=len(base))
        grid = base.images.shape[-2:]
        rotated = np.empty_like(base.images)
        for i, angle in enumerate(angles):
            rotated[i] = make_rotation(angle, grid, kind="bilinear").forward(base.images[i])
        logger.info("rotated %d images (seed %d)", len(base), seed)
        return Dataset(
            images=np.clip(rotated, 0.0, 1.0),
            labels=base.labels.copy(),
            split=base.split,
            name="rot-mnist",
            provenance=Provenance(sources=list(base.provenance.sources), seed=seed),
        )

    # -- container persistence --------------------------------------------

    @staticmethod
    def save_dataset(dataset: Dataset, path: PathLike) -> None:
        """Сохранение датасета в контейнер"""
        write_container(
            path,
            Container(
                kind="dataset",
                metadata={
                    "name": dataset.name,
                    "split": dataset.split,
                    "provenance": dataset.provenance.model_dump(),
                },
                tensors={"images": dataset.images, "labels": dataset.labels.astype(np.int64)},
            ),
        )

    @staticmethod
    def load_dataset(path: PathLike) -> Dataset:
        """Загрузка датасета из контейнера"""
        container = read_container(path, kind="dataset")
        meta = container.metadata
        return Dataset(
            images=container.tensors["images"],
            labels=container.tensors["labels"],
            split=meta.get("split", "test"),
            name=meta.get("name", "custom"),
            provenance=Provenance.model_validate(meta.get("provenance", {})),
        )

    # -- standard file layout ---------------------------------------------

    def _find(self, subdirs: Sequence[str], filename: str) -> Path:
        for sub in subdirs:
            candidate = self.data_dir / sub / filename
            if candidate.is_file():
                return candidate
        raise DataNotFoundError(f"{filename} not found under {self.data_dir}")

    def load_mnist(self, split: Split) -> Dataset:
        """Загрузка MNIST из data_dir"""
        images_name, labels_name = MNIST_FILES[split]
        return self.load_mnist_idx(self._find(MNIST_SUBDIRS, images_name), self._find(MNIST_SUBDIRS, labels_name), split)

    def load_cifar(self, split: Split) -> Dataset:
        """Загрузка CIFAR-10 из data_dir"""
        return self.load_cifar10([self._find(CIFAR_SUBDIRS, name) for name in CIFAR_FILES[split]], split)

    def load_rot_mnist(self, split: Split, seed: int = 0, limit: Optional[int] = None) -> Dataset:
        """Повёрнутый MNIST: углы обучающей выборки от seed, тестовой от seed + 1"""
        return self.generate_rot_mnist(self.load_mnist(split).head(limit), rot_mnist_seed(split, seed))

    def load(self, name: str, split: Split, seed: int = 0) -> Dataset:
        """Стандартный датасет по имени"""
        if name == "mnist":
            return self.load_mnist(split)
        if name == "cifar10":
            return self.load_cifar(split)
        if name == "rot-mnist":
            return self.load_rot_mnist(split, seed)
        raise ValueError(f"unknown dataset {name!r}")

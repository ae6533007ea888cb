"""Bit-exact file formats: the UDTF binary tensor container, the JSON mask
set document with run-length encoded masks, panoptic label files (a rank-3
tensor of category and instance planes) and centroid store documents.

All writes are atomic (temp file + rename) and all formats round-trip
losslessly for in-range values; readers reject malformed inputs with a
distinct error per failure mode.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import (
    NO_INSTANCE,
    VOID,
    BinaryMask,
    CategoryDistribution,
    CentroidStore,
    FeatureMap,
    PanopticLabel,
    PseudoMask,
    PseudoMaskSet,
)
from .hmc import CalibratedMask

MAGIC = b"UDTF"
VERSION = 1

DTYPE_F32 = 1
DTYPE_U8 = 2
DTYPE_U32 = 3

_DTYPES = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_U8: np.dtype("u1"),
    DTYPE_U32: np.dtype("<u4"),
}
_CODES = {np.dtype("float32"): DTYPE_F32, np.dtype("uint8"): DTYPE_U8,
          np.dtype("uint32"): DTYPE_U32}

_LABEL_SENTINEL = np.uint32(0xFFFFFFFF)


class FormatError(ValueError):
    """Base class for malformed file contents."""


class MagicMismatch(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class RleSumMismatch(FormatError):
    pass


class DocumentError(FormatError):
    pass


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_to_bytes(array: np.ndarray) -> bytes:
    """Serialize an ndarray as a UDTF tensor (float32/uint8/uint32)."""
    arr = np.asarray(array)
    key = arr.dtype.newbyteorder("=")
    if key not in _CODES:
        raise UnsupportedDtype(f"dtype {arr.dtype} has no UDTF code")
    code = _CODES[key]
    if arr.ndim > 255:
        raise FormatError("rank exceeds the format limit")
    header = struct.pack("<4sBBB", MAGIC, VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr.astype(_DTYPES[code])).tobytes()
    return header + dims + payload


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 7:
        raise TruncatedPayload(f"header needs 7 bytes, got {len(blob)}")
    magic, version, code, rank = struct.unpack_from("<4sBBB", blob)
    if magic != MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtype(f"unknown dtype code {code}")
    need = 7 + 4 * rank
    if len(blob) < need:
        raise TruncatedPayload("dimension table truncated")
    dims = struct.unpack_from(f"<{rank}I", blob, 7)
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = need + count * dtype.itemsize
    if len(blob) != expected:
        raise TruncatedPayload(
            f"payload length {len(blob) - need} does not match dims {dims}"
        )
    data = np.frombuffer(blob, dtype=dtype, offset=need)
    return data.reshape(dims).copy()


def write_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    atomic_write_bytes(path, tensor_to_bytes(array))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def write_feature_map(path: Union[str, Path], f: FeatureMap) -> None:
    write_tensor(path, f.values)


def read_feature_map(path: Union[str, Path]) -> FeatureMap:
    arr = read_tensor(path)
    if arr.ndim == 2:
        arr = arr[None, ...]
    if arr.ndim != 3:
        raise DocumentError(f"feature maps must be rank 2 or 3, got rank {arr.ndim}")
    return FeatureMap(arr.astype(np.float32))


def rle_encode(bits: np.ndarray) -> list[int]:
    """Row-major RLE of alternating 0/1 run lengths, starting with zeros."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return []
    edges = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [flat.size]])
    runs = (ends - starts).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    total = 0
    for r in runs:
        if r < 0:
            raise RleSumMismatch("run lengths must be non-negative")
        total += int(r)
    if total != height * width:
        raise RleSumMismatch(f"run sum {total} != {height}x{width}")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for r in runs:
        if value:
            flat[pos : pos + int(r)] = True
        pos += int(r)
        value = not value
    return flat.reshape(height, width)


@dataclass(frozen=True)
class MaskEntry:
    """One mask record in a document; corrected fields appear after
    calibration."""

    category: int
    probs: tuple[float, ...]
    mask: BinaryMask
    corrected_category: Optional[int] = None
    corrected_mask: Optional[BinaryMask] = None
    dropped: Optional[bool] = None


@dataclass(frozen=True)
class MaskSetDocument:
    """Structured-text mask set: grid dims, category universe, mask records."""

    height: int
    width: int
    num_categories: int
    category_names: tuple[str, ...]
    entries: tuple[MaskEntry, ...]

    def to_pseudo_masks(self) -> PseudoMaskSet:
        masks = tuple(
            PseudoMask(e.category, CategoryDistribution(np.asarray(e.probs)), e.mask)
            for e in self.entries
        )
        return PseudoMaskSet(masks)

    def to_calibrated(self) -> tuple[CalibratedMask, ...]:
        out = []
        for e in self.entries:
            if e.corrected_category is None or e.corrected_mask is None:
                raise DocumentError("document has no corrected fields")
            out.append(
                CalibratedMask(
                    original=PseudoMask(
                        e.category, CategoryDistribution(np.asarray(e.probs)), e.mask
                    ),
                    corrected_category=e.corrected_category,
                    corrected_mask=e.corrected_mask,
                    dropped=bool(e.dropped),
                )
            )
        return tuple(out)


def default_names(num_categories: int) -> tuple[str, ...]:
    return tuple(f"cat{c}" for c in range(num_categories))


def document_from_pseudo_masks(
    ms: PseudoMaskSet,
    height: int,
    width: int,
    num_categories: int,
    category_names: Optional[Sequence[str]] = None,
) -> MaskSetDocument:
    names = tuple(category_names) if category_names else default_names(num_categories)
    entries = tuple(
        MaskEntry(pm.category, tuple(float(x) for x in pm.dist.probs), pm.mask)
        for pm in ms
    )
    return MaskSetDocument(height, width, num_categories, names, entries)


def document_from_calibrated(
    calibrated: Sequence[CalibratedMask],
    height: int,
    width: int,
    num_categories: int,
    category_names: Optional[Sequence[str]] = None,
) -> MaskSetDocument:
    names = tuple(category_names) if category_names else default_names(num_categories)
    entries = tuple(
        MaskEntry(
            cm.original.category,
            tuple(float(x) for x in cm.original.dist.probs),
            cm.original.mask,
            corrected_category=cm.corrected_category,
            corrected_mask=cm.corrected_mask,
            dropped=cm.dropped,
        )
        for cm in calibrated
    )
    return MaskSetDocument(height, width, num_categories, names, entries)


def maskset_to_text(doc: MaskSetDocument) -> str:
    masks = []
    for e in doc.entries:
        record: dict = {
            "category": int(e.category),
            "probs": [float(x) for x in e.probs],
            "rle": rle_encode(e.mask.bits),
        }
        if e.corrected_category is not None:
            record["corrected_category"] = int(e.corrected_category)
        if e.corrected_mask is not None:
            record["corrected_rle"] = rle_encode(e.corrected_mask.bits)
        if e.dropped is not None:
            record["dropped"] = bool(e.dropped)
        masks.append(record)
    body = {
        "format": "maskset",
        "version": 1,
        "height": doc.height,
        "width": doc.width,
        "num_categories": doc.num_categories,
        "category_names": list(doc.category_names),
        "masks": masks,
    }
    return json.dumps(body, indent=2) + "\n"


def maskset_from_text(text: str) -> MaskSetDocument:
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(body, dict) or body.get("format") != "maskset":
        raise DocumentError("not a maskset document")
    if body.get("version") != 1:
        raise UnsupportedVersion(f"unsupported maskset version {body.get('version')}")
    try:
        height = int(body["height"])
        width = int(body["width"])
        num_categories = int(body["num_categories"])
        names = tuple(str(n) for n in body["category_names"])
        raw_masks = body["masks"]
    except (KeyError, TypeError) as exc:
        raise DocumentError(f"missing or malformed field: {exc}") from exc
    if not isinstance(raw_masks, list):
        raise DocumentError("masks must be a list of records")
    if num_categories < 2:
        raise DocumentError("mask sets require at least 2 categories")
    if len(names) != num_categories:
        raise DocumentError("category_names length must equal num_categories")
    entries = []
    for k, rec in enumerate(raw_masks):
        try:
            category = int(rec["category"])
            probs = tuple(float(x) for x in rec["probs"])
            runs = rec["rle"]
        except (KeyError, TypeError) as exc:
            raise DocumentError(f"mask {k}: missing or malformed field: {exc}") from exc
        if len(probs) != num_categories:
            raise DocumentError(f"mask {k}: probability vector length != C")
        mask = BinaryMask(rle_decode(runs, height, width))
        corrected_category = rec.get("corrected_category")
        corrected_mask = None
        if "corrected_rle" in rec:
            corrected_mask = BinaryMask(rle_decode(rec["corrected_rle"], height, width))
        dropped = rec.get("dropped")
        entries.append(
            MaskEntry(
                category,
                probs,
                mask,
                None if corrected_category is None else int(corrected_category),
                corrected_mask,
                None if dropped is None else bool(dropped),
            )
        )
    return MaskSetDocument(height, width, num_categories, names, tuple(entries))


def write_maskset(path: Union[str, Path], doc: MaskSetDocument) -> None:
    atomic_write_bytes(path, maskset_to_text(doc).encode("utf-8"))


def read_maskset(path: Union[str, Path]) -> MaskSetDocument:
    return maskset_from_text(Path(path).read_text(encoding="utf-8"))


def label_to_tensor(label: PanopticLabel) -> np.ndarray:
    planes = np.empty((2, label.height, label.width), dtype=np.uint32)
    cat = label.category.astype(np.int64)
    inst = label.instance.astype(np.int64)
    planes[0] = np.where(cat == VOID, _LABEL_SENTINEL, cat).astype(np.uint32)
    planes[1] = np.where(inst == NO_INSTANCE, _LABEL_SENTINEL, inst).astype(np.uint32)
    return planes


def label_from_tensor(planes: np.ndarray) -> PanopticLabel:
    if planes.ndim != 3 or planes.shape[0] != 2:
        raise DocumentError("panoptic labels must be a (2,H,W) tensor")
    cat = planes[0].astype(np.int64)
    inst = planes[1].astype(np.int64)
    cat = np.where(cat == int(_LABEL_SENTINEL), VOID, cat)
    inst = np.where(inst == int(_LABEL_SENTINEL), NO_INSTANCE, inst)
    if cat.max(initial=0) >= 2**31 or inst.max(initial=0) >= 2**31:
        raise DocumentError("label ids exceed the supported range")
    return PanopticLabel(cat.astype(np.int32), inst.astype(np.int32))


def write_label(path: Union[str, Path], label: PanopticLabel) -> None:
    write_tensor(path, label_to_tensor(label))


def read_label(path: Union[str, Path]) -> PanopticLabel:
    return label_from_tensor(read_tensor(path))


def centroids_to_text(store: CentroidStore) -> str:
    body = {
        "format": "centroids",
        "version": 1,
        "gamma_prime": float(store.gamma_prime),
        "valid": [bool(v) for v in store.valid],
        "centroids": [[float(x) for x in row] for row in store.centroids],
    }
    return json.dumps(body, indent=2) + "\n"


def centroids_from_text(text: str) -> CentroidStore:
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(body, dict) or body.get("format") != "centroids":
        raise DocumentError("not a centroid document")
    if body.get("version") != 1:
        raise UnsupportedVersion(f"unsupported centroid version {body.get('version')}")
    try:
        return CentroidStore(
            np.asarray(body["centroids"], dtype=np.float64),
            np.asarray(body["valid"], dtype=bool),
            float(body["gamma_prime"]),
        )
    except (KeyError, TypeError) as exc:
        raise DocumentError(f"missing or malformed field: {exc}") from exc


def write_centroids(path: Union[str, Path], store: CentroidStore) -> None:
    atomic_write_bytes(path, centroids_to_text(store).encode("utf-8"))


def read_centroids(path: Union[str, Path]) -> CentroidStore:
    return centroids_from_text(Path(path).read_text(encoding="utf-8"))

"""
On-disk formats: AVA-style CSVs, the CRCN binary tensor container and the
newline-delimited feature bank, plus key-frame clip sampling.
"""
import csv
import json
import logging
import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple
import numpy as np

import config
from config import SamplingSpec
from context import FeatureBank
from evaluator import Detection, GroundTruth
from geometry import Box
from utils import format_float, stable_rank

logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b"CRCN"
CONTAINER_VERSION = 1


class ParseError(ValueError):
    def __init__(self, path: str, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


@dataclass(frozen=True)
class Proposal:
    video_id: str
    timestamp: int
    box: Box
    score: float


def sample_clip_indices(key_frame: int, spec: SamplingSpec, video_len: int) -> List[int]:
    """T indices starting half a neighborhood before the key frame, clamped to the video."""
    if video_len < 1:
        raise ValueError(f"video_len must be >= 1, got {video_len}")
    start = key_frame - spec.neighborhood // 2
    return [min(max(start + i * spec.stride, 0), video_len - 1) for i in range(spec.num_frames)]


# ---------------------------------------------------------------- CSV formats

def _read_rows(path: str, width: int) -> Iterable[Tuple[int, List[str]]]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        for line_number, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise ParseError(path, line_number, f"expected {width} fields, got {len(row)}")
            yield line_number, [field.strip() for field in row]


def _parse_box(path: str, line_number: int, fields: Sequence[str]) -> Box:
    try:
        coords = [float(v) for v in fields]
    except ValueError as e:
        raise ParseError(path, line_number, f"bad coordinate: {e}") from e
    if not all(0.0 <= c <= 1.0 for c in coords):
        raise ParseError(path, line_number, f"coordinates outside [0, 1]: {coords}")
    try:
        return Box(*coords)
    except ValueError as e:
        raise ParseError(path, line_number, str(e)) from e


def _parse_int(path: str, line_number: int, value: str, what: str) -> int:
    try:
        return int(value)
    except ValueError as e:
        raise ParseError(path, line_number, f"bad {what} {value!r}") from e


def _parse_score(path: str, line_number: int, value: str) -> float:
    try:
        score = float(value)
    except ValueError as e:
        raise ParseError(path, line_number, f"bad score {value!r}") from e
    if not 0.0 <= score <= 1.0:
        raise ParseError(path, line_number, f"score {score} outside [0, 1]")
    return score


def _box_fields(box: Box) -> List[str]:
    return [format_float(c) for c in box.as_tuple()]


def parse_annotations(path: str) -> List[GroundTruth]:
    """Rows video_id,timestamp,x1,y1,x2,y2,action_id,person_id; one GroundTruth per person and frame."""
    merged: "OrderedDict[Tuple[str, int, int], Tuple[Box, set]]" = OrderedDict()
    for line_number, row in _read_rows(path, 8):
        video_id = row[0]
        timestamp = _parse_int(path, line_number, row[1], "timestamp")
        box = _parse_box(path, line_number, row[2:6])
        action = _parse_int(path, line_number, row[6], "action_id")
        person = _parse_int(path, line_number, row[7], "person_id")
        key = (video_id, timestamp, person)
        if key in merged:
            if merged[key][0] != box:
                raise ParseError(path, line_number, f"person {person} has two different boxes in one frame")
            merged[key][1].add(action)
        else:
            merged[key] = (box, {action})
    return [
        GroundTruth(vid, ts, box, frozenset(labels), pid)
        for (vid, ts, pid), (box, labels) in sorted(merged.items(), key=lambda kv: kv[0])
    ]


def write_annotations(path: str, gts: Iterable[GroundTruth]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        for gt in sorted(gts, key=lambda g: (g.video_id, g.timestamp, g.person_id)):
            for action in sorted(gt.class_ids):
                writer.writerow([gt.video_id, gt.timestamp, *_box_fields(gt.box), action, gt.person_id])


def parse_proposals(path: str) -> List[Proposal]:
    """Rows video_id,timestamp,x1,y1,x2,y2,score."""
    proposals = []
    for line_number, row in _read_rows(path, 7):
        proposals.append(Proposal(
            row[0],
            _parse_int(path, line_number, row[1], "timestamp"),
            _parse_box(path, line_number, row[2:6]),
            _parse_score(path, line_number, row[6]),
        ))
    return proposals


def write_proposals(path: str, proposals: Iterable[Proposal]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        for p in proposals:
            writer.writerow([p.video_id, p.timestamp, *_box_fields(p.box), format_float(p.score)])


def parse_detections(path: str) -> List[Detection]:
    """Rows video_id,timestamp,x1,y1,x2,y2,class_id,score."""
    detections = []
    for line_number, row in _read_rows(path, 8):
        detections.append(Detection(
            row[0],
            _parse_int(path, line_number, row[1], "timestamp"),
            _parse_box(path, line_number, row[2:6]),
            _parse_int(path, line_number, row[6], "class_id"),
            _parse_score(path, line_number, row[7]),
        ))
    return detections


def write_detections(path: str, detections: Iterable[Detection]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        for d in detections:
            writer.writerow([d.video_id, d.timestamp, *_box_fields(d.box), d.class_id, format_float(d.score)])


# ---------------------------------------------------------- tensor container

def write_tensors(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    """
    Little-endian layout: magic "CRCN", version u32, count u32, then per tensor
    name length u32 + utf-8 name, rank u32, extents u64[rank], payload f64[].
    """
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(tensors)))
        for name, tensor in tensors.items():
            array = np.ascontiguousarray(tensor, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            f.write(array.tobytes())


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedContainerError(
                f"{self.path}: needed {n} bytes at offset {self.offset}, file has {len(self.data)}"
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensors(path: str) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    magic = reader.data[:len(CONTAINER_MAGIC)]
    if magic != CONTAINER_MAGIC:
        raise BadMagicError(f"{path}: not a CRCN container (magic {magic!r})")
    reader.offset = len(CONTAINER_MAGIC)
    version, count = reader.unpack("<II")
    if version != CONTAINER_VERSION:
        raise UnsupportedVersionError(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        if name in tensors:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = reader.take(8 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if reader.offset != len(reader.data):
        raise ContainerError(f"{path}: {len(reader.data) - reader.offset} trailing bytes after {count} tensors")
    return tensors


# --------------------------------------------------------------- feature bank

def write_bank(path: str, bank: FeatureBank) -> None:
    """One JSON record per entry, ordered by (video_id, timestamp, person_id)."""
    with open(path, "w", encoding="utf-8") as f:
        for video_id, timestamp, person_id, feature in bank.entries():
            record = {
                "video_id": video_id,
                "timestamp": timestamp,
                "person_id": person_id,
                "feature": [float(v) for v in feature],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_bank(path: str) -> FeatureBank:
    bank = FeatureBank()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                bank.add(record["video_id"], int(record["timestamp"]), int(record["person_id"]),
                         np.asarray(record["feature"], dtype=np.float64))
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise ParseError(path, line_number, f"bad bank record: {e}") from e
            except ValueError as e:
                raise ParseError(path, line_number, str(e)) from e
    return bank.seal()


def split_videos(video_ids: Sequence[str], train_fraction: float = 0.7) -> Tuple[List[str], List[str]]:
    """Rank videos by a content hash of their id; the first share goes to train."""
    ordered = sorted(video_ids, key=lambda v: (stable_rank(v), v))
    n = len(ordered)
    if n < 2:
        return list(ordered), []
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return sorted(ordered[:n_train]), sorted(ordered[n_train:])


def records_to_jsonl(path: str, records: Iterable[Dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def jsonl_to_records(path: str) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ------------------------------------------------------------ dataset on disk

MANIFEST_NAME = "manifest.json"


class VideoDataset:
    """
    A dataset directory: manifest.json, annotations.csv, proposals.csv and one
    tensor container per video holding a (N, H, W, 3) "frames" tensor.
    """
    def __init__(self, root: str, cache_size: int = None):
        self.root = root
        self.cache_size = cache_size or config.FRAME_CACHE_VIDEOS
        if self.cache_size < 1:
            raise ValueError(f"cache_size must be >= 1, got {self.cache_size}")
        self.logger = logging.getLogger(self.__class__.__name__)
        manifest_path = os.path.join(root, MANIFEST_NAME)
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                self.manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{manifest_path}: malformed manifest: {e}") from e
        self.fps = int(self.manifest["fps"])
        self.num_classes = int(self.manifest["num_classes"])
        self.videos = {v["video_id"]: v for v in self.manifest["videos"]}
        self.annotations = parse_annotations(os.path.join(root, self.manifest["annotations"]))
        self.proposals = parse_proposals(os.path.join(root, self.manifest["proposals"]))
        self._frames: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._lock = threading.Lock()

    @property
    def video_ids(self) -> List[str]:
        return sorted(self.videos)

    def frames(self, video_id: str) -> np.ndarray:
        """Decoded frames of one video; the least recently used video is evicted past cache_size."""
        with self._lock:
            if video_id in self._frames:
                self._frames.move_to_end(video_id)
                return self._frames[video_id]
            path = os.path.join(self.root, self.videos[video_id]["path"])
            frames = read_tensors(path)["frames"]
            self._frames[video_id] = frames
            self.logger.debug("Loaded %s (%s frames)", video_id, frames.shape[0])
            while len(self._frames) > self.cache_size:
                evicted, _ = self._frames.popitem(last=False)
                self.logger.debug("Evicted %s from the frame cache", evicted)
            return frames

    @property
    def cached_video_ids(self) -> List[str]:
        with self._lock:
            return list(self._frames)

    def key_frame(self, timestamp: int) -> int:
        """Frame index of a key-frame second."""
        return int(timestamp) * self.fps

    def clip(self, video_id: str, timestamp: int, spec: SamplingSpec) -> np.ndarray:
        frames = self.frames(video_id)
        indices = sample_clip_indices(self.key_frame(timestamp), spec, frames.shape[0])
        return frames[indices]

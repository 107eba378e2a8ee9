"""
End-to-end orchestration: feature extraction along either actor path, bank
construction, context fusion, head training, inference, evaluation and the
RoI-pooling vs crop+resize comparison.
"""
import logging
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np

import config
from backbone import BackboneWeights, actor_feature, forward, init_backbone
from config import PipelineConfig
from context import FeatureBank, LfbParams, init_lfb_params, long_term_feature
from dataio import (Proposal, VideoDataset, jsonl_to_records, read_bank, read_tensors, records_to_jsonl,
                    split_videos, write_bank, write_tensors)
from evaluator import Detection, GroundTruth, binned_map, compare_per_class, frame_map
from geometry import Box, augment_box, expand_box, flip_clip, iou, resize_scene_clip, roi_pool_3d
from head import ClassifierParams, FeatureScaler, classify, fuse, train_classifier
from tensor_core import global_avg_pool
from utils import stable_rank

logger = logging.getLogger(__name__)

FEATURES_TENSORS = "features.crcn"
FEATURES_INDEX = "features.jsonl"
BANK_FILE = "bank.jsonl"
BACKBONE_FILE = "backbone.crcn"


@dataclass
class FeatureSet:
    """Per-proposal features; row i of every array belongs to records[i]."""
    records: List[Dict]
    actor: np.ndarray
    scene: np.ndarray
    skipped_keyframes: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def dim(self) -> int:
        return self.actor.shape[1]

    def box(self, i: int) -> Box:
        return Box(*self.records[i]["box"])

    def keyframes(self) -> Dict[Tuple[str, int], List[int]]:
        groups = defaultdict(list)
        for i, record in enumerate(self.records):
            groups[(record["video_id"], record["timestamp"])].append(i)
        return dict(sorted(groups.items()))

    def subset(self, video_ids: Sequence[str]) -> "FeatureSet":
        wanted = set(video_ids)
        rows = [i for i, r in enumerate(self.records) if r["video_id"] in wanted]
        return FeatureSet([self.records[i] for i in rows], self.actor[rows], self.scene[rows])

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        write_tensors(os.path.join(out_dir, FEATURES_TENSORS), {"actor": self.actor, "scene": self.scene})
        records_to_jsonl(os.path.join(out_dir, FEATURES_INDEX), self.records)

    @classmethod
    def load(cls, directory: str) -> "FeatureSet":
        tensors = read_tensors(os.path.join(directory, FEATURES_TENSORS))
        records = jsonl_to_records(os.path.join(directory, FEATURES_INDEX))
        if tensors["actor"].shape[0] != len(records) or tensors["scene"].shape[0] != len(records):
            raise ValueError(f"{directory}: feature rows do not match the {len(records)} index records")
        return cls(records, tensors["actor"], tensors["scene"])


def frame_proposals(proposals: Sequence[Proposal]) -> Dict[Tuple[str, int], List[Proposal]]:
    """Proposals grouped per key frame; position in the list is the person id."""
    groups = defaultdict(list)
    for p in proposals:
        groups[(p.video_id, p.timestamp)].append(p)
    return {key: sorted(group, key=lambda p: (-p.score, p.box.as_tuple())) for key, group in groups.items()}


class FeatureExtractor:
    """
    Runs the shared backbone over key-frame clips. Holds exactly one weights
    object; scene features and both actor paths read it.
    """
    def __init__(self, cfg: PipelineConfig, weights: Optional[BackboneWeights] = None, num_workers: int = None):
        self.cfg = cfg
        self.weights = weights if weights is not None else init_backbone(cfg.backbone)
        self.num_workers = num_workers or config.NUM_WORKERS
        self.logger = logging.getLogger(self.__class__.__name__)

    def _actor_box(self, proposal: Proposal, person_id: int, training: bool) -> Tuple[Box, bool]:
        if not training:
            return expand_box(proposal.box, self.cfg.expand_scale), False
        key = f"{proposal.video_id}/{proposal.timestamp}/{person_id}"
        rng = np.random.default_rng([self.cfg.seed, stable_rank(key) % (2 ** 32)])
        return augment_box(proposal.box, self.cfg.expand_scale, rng)

    def keyframe_features(self, dataset: VideoDataset, video_id: str, timestamp: int,
                          proposals: Sequence[Proposal], training: bool = False):
        cfg = self.cfg
        clip = dataset.clip(video_id, timestamp, cfg.sampling)
        scene_clip = resize_scene_clip(clip, cfg.scene_size)
        featmaps = {False: forward(self.weights, scene_clip)}
        scene = global_avg_pool(featmaps[False])
        crop = cfg.crop_train if training else cfg.crop_test
        rows = []
        for person_id, proposal in enumerate(proposals):
            box, flipped = self._actor_box(proposal, person_id, training)
            if cfg.feature_path == "cropresize":
                source = flip_clip(clip) if flipped else clip
                actor = actor_feature(self.weights, source, box, crop)
            else:
                if flipped not in featmaps:
                    featmaps[flipped] = forward(self.weights, flip_clip(scene_clip))
                actor = roi_pool_3d(featmaps[flipped], box, cfg.roi_output, cfg.roi_sampling_ratio)
            record = {
                "video_id": video_id,
                "timestamp": int(timestamp),
                "person_id": person_id,
                "box": list(proposal.box.as_tuple()),
                "score": proposal.score,
            }
            rows.append((record, actor, scene))
        self.logger.debug("Extracted %d actors at %s/%s", len(rows), video_id, timestamp)
        return rows

    def extract(self, dataset: VideoDataset, video_ids: Optional[Sequence[str]] = None,
                training: bool = False) -> FeatureSet:
        wanted = set(video_ids if video_ids is not None else dataset.video_ids)
        grouped = frame_proposals([p for p in dataset.proposals if p.video_id in wanted])
        annotated = {gt.frame for gt in dataset.annotations if gt.video_id in wanted}
        keyframes = sorted(annotated | set(grouped))
        missing = [key for key in keyframes if key not in grouped]
        if missing:
            self.logger.warning("Skipping %d key frames without proposals", len(missing))
        todo = [key for key in keyframes if key in grouped]
        self.logger.info("Extracting %s features for %d key frames (%s)", self.cfg.feature_path, len(todo),
                         "train" if training else "test")

        def run(key):
            return self.keyframe_features(dataset, key[0], key[1], grouped[key], training)

        with ThreadPoolExecutor(max_workers=max(self.num_workers, 1)) as pool:
            results = list(pool.map(run, todo))
        rows = [row for chunk in results for row in chunk]
        if not rows:
            raise ValueError("no proposals found for the requested videos; nothing to extract")
        return FeatureSet(
            records=[r for r, _, _ in rows],
            actor=np.stack([a for _, a, _ in rows]),
            scene=np.stack([s for _, _, s in rows]),
            skipped_keyframes=len(missing),
        )


def build_bank(features: FeatureSet) -> FeatureBank:
    bank = FeatureBank()
    for record, actor in zip(features.records, features.actor):
        bank.add(record["video_id"], record["timestamp"], record["person_id"], actor)
    return bank.seal()


def assign_labels(features: FeatureSet, annotations: Sequence[GroundTruth], iou_thr: float = 0.5) -> List[frozenset]:
    """Labels of the best-overlapping ground truth (IoU >= iou_thr), else empty."""
    by_frame = defaultdict(list)
    for gt in annotations:
        by_frame[gt.frame].append(gt)
    labels = []
    for i, record in enumerate(features.records):
        box = features.box(i)
        best, best_iou = frozenset(), iou_thr
        for gt in by_frame.get((record["video_id"], record["timestamp"]), []):
            overlap = iou(box, gt.box)
            if overlap >= best_iou:
                best, best_iou = gt.class_ids, overlap
        labels.append(best)
    return labels


def fused_dims(cfg: PipelineConfig, actor_dim: int) -> Tuple[int, Optional[int], Optional[int]]:
    return (actor_dim, actor_dim if cfg.use_scene else None, cfg.lfb.dim if cfg.use_lfb else None)


def fuse_features(cfg: PipelineConfig, features: FeatureSet, bank: Optional[FeatureBank] = None,
                  lfb_params: Optional[LfbParams] = None, training: bool = False) -> np.ndarray:
    """Concatenate (actor, scene, long-term) per proposal as the config asks."""
    dims = fused_dims(cfg, features.dim)
    longterm = [None] * len(features)
    if cfg.use_lfb:
        if bank is None:
            raise ValueError("use_lfb requires a feature bank")
        if bank.dim is not None and bank.dim != features.dim:
            raise ValueError(f"bank dimension {bank.dim} does not match actor feature dimension {features.dim}")
        lfb_params = lfb_params or init_lfb_params(features.dim, cfg.lfb)
        for (video_id, ts), rows in features.keyframes().items():
            rng = np.random.default_rng([cfg.seed, stable_rank(f"lfb/{video_id}/{ts}") % (2 ** 32)])
            out = long_term_feature(lfb_params, features.actor[rows], bank, video_id, ts, training, rng)
            for row, vec in zip(rows, out):
                longterm[row] = vec
    fused = [
        fuse(features.actor[i], features.scene[i] if cfg.use_scene else None, longterm[i], dims)
        for i in range(len(features))
    ]
    return np.stack(fused)


@dataclass(frozen=True)
class TrainedHead:
    params: ClassifierParams
    scaler: FeatureScaler
    dims: Tuple[int, int, int]

    def save(self, path: str) -> None:
        write_tensors(path, {
            "weights": self.params.weights,
            "bias": self.params.bias,
            "mode": np.array([0.0 if self.params.mode == "multilabel" else 1.0]),
            "scaler.mean": self.scaler.mean,
            "scaler.std": self.scaler.std,
            "dims": np.array(self.dims, dtype=np.float64),
        })

    @classmethod
    def load(cls, path: str) -> "TrainedHead":
        t = read_tensors(path)
        try:
            mode = "multilabel" if t["mode"][0] == 0.0 else "singlelabel"
            params = ClassifierParams(t["weights"], t["bias"], mode)
            dims = tuple(int(d) for d in t["dims"])
            return cls(params, FeatureScaler(t["scaler.mean"], t["scaler.std"]), dims)
        except KeyError as e:
            raise ValueError(f"{path}: head container is missing tensor {e}") from e


def _dims_record(cfg: PipelineConfig, actor_dim: int) -> Tuple[int, int, int]:
    return tuple(d or 0 for d in fused_dims(cfg, actor_dim))


def train_head(cfg: PipelineConfig, features: FeatureSet, annotations: Sequence[GroundTruth],
               num_classes: int, bank: Optional[FeatureBank] = None) -> TrainedHead:
    labels = assign_labels(features, annotations, cfg.label_iou)
    fused = fuse_features(cfg, features, bank, training=True)
    rows = list(range(len(features)))
    if cfg.head.mode == "singlelabel":
        # background proposals carry no class under a softmax head
        rows = [i for i in rows if labels[i]]
        if not rows:
            raise ValueError("no proposal overlaps a ground truth; cannot train a single-label head")
    scaler = FeatureScaler.fit(fused[rows])
    scaled = scaler(fused)
    if cfg.head.mode == "singlelabel":
        dataset = [(scaled[i], min(labels[i])) for i in rows]
    else:
        dataset = [(scaled[i], sorted(labels[i])) for i in rows]
    logger.info("Training %s head on %d proposals (fused dim %d)", cfg.head.mode, len(dataset), fused.shape[1])
    params = train_classifier(dataset, cfg.head, num_classes)
    return TrainedHead(params, scaler, _dims_record(cfg, features.dim))


def infer(cfg: PipelineConfig, features: FeatureSet, head: TrainedHead,
          bank: Optional[FeatureBank] = None) -> List[Detection]:
    """One detection per (proposal, class)."""
    expected = _dims_record(cfg, features.dim)
    if tuple(head.dims) != expected:
        raise ValueError(f"head was trained for feature dims {head.dims}, config and features give {expected}")
    fused = fuse_features(cfg, features, bank, training=False)
    scores = classify(head.params, head.scaler(fused))
    detections = []
    for i, record in enumerate(features.records):
        box = features.box(i)
        for class_id, score in enumerate(scores[i]):
            detections.append(Detection(record["video_id"], record["timestamp"], box, class_id,
                                        float(min(max(score, 0.0), 1.0))))
    return detections


def evaluate(detections: Sequence[Detection], annotations: Sequence[GroundTruth],
             bins: Sequence[str] = ("size", "count"), iou_thr: float = 0.5) -> Dict:
    det_classes = {d.class_id for d in detections}
    gt_classes = {c for g in annotations for c in g.class_ids}
    if not det_classes & gt_classes:
        raise ValueError("detections and ground truth share no class")
    mean_ap, per_class = frame_map(detections, annotations, iou_thr=iou_thr)
    gt_counts = defaultdict(int)
    for gt in annotations:
        for c in gt.class_ids:
            gt_counts[c] += 1
    report = {
        "map": mean_ap,
        "per_class": {str(c): ap for c, ap in per_class.items()},
        "gt_counts": {str(c): gt_counts[c] for c in per_class},
        "num_detections": len(detections),
        "num_ground_truth": len(annotations),
    }
    for binning in bins:
        report[f"{binning}_bins"] = binned_map(detections, annotations, binning, iou_thr=iou_thr)
    return report


def _val_annotations(dataset: VideoDataset, video_ids: Sequence[str]) -> List[GroundTruth]:
    wanted = set(video_ids)
    return [gt for gt in dataset.annotations if gt.video_id in wanted]


def run_path(dataset: VideoDataset, cfg: PipelineConfig, weights: BackboneWeights,
             train_ids: Sequence[str], val_ids: Sequence[str]) -> Dict:
    """Extract, train on train_ids, evaluate on val_ids for one configuration."""
    extractor = FeatureExtractor(cfg, weights)
    train_features = extractor.extract(dataset, train_ids, training=True)
    val_features = extractor.extract(dataset, val_ids, training=False)
    train_bank = build_bank(train_features) if cfg.use_lfb else None
    val_bank = build_bank(val_features) if cfg.use_lfb else None
    train_gts = _val_annotations(dataset, train_ids)
    head = train_head(cfg, train_features, train_gts, dataset.num_classes, train_bank)
    detections = infer(cfg, val_features, head, val_bank)
    return evaluate(detections, _val_annotations(dataset, val_ids))


def run_compare(dataset: VideoDataset, cfg: PipelineConfig, scales: Sequence[float] = (),
                crop_sizes: Sequence[int] = ()) -> Dict:
    """
    Same split, weights, seeds and head hyperparameters for both actor paths;
    only the feature extractor differs.
    """
    train_ids, val_ids = split_videos(dataset.video_ids, cfg.train_fraction)
    if not val_ids:
        raise ValueError("compare needs at least two videos for a train/val split")
    weights = init_backbone(cfg.backbone)
    logger.info("Comparing actor paths on %d train / %d val videos", len(train_ids), len(val_ids))
    paths = {}
    for path in ("roipool", "cropresize"):
        paths[path] = run_path(dataset, replace(cfg, feature_path=path), weights, train_ids, val_ids)
        logger.info("%s: mAP %.4f", path, paths[path]["map"])

    roi, crop = paths["roipool"], paths["cropresize"]
    delta = {"overall": crop["map"] - roi["map"]}
    for table in ("size_bins", "count_bins"):
        delta[table] = {name: crop[table][name] - roi[table][name] for name in crop[table] if name in roi[table]}
    per_class = compare_per_class(
        {int(c): ap for c, ap in roi["per_class"].items()},
        {int(c): ap for c, ap in crop["per_class"].items()},
        {int(c): n for c, n in crop["gt_counts"].items()},
    )
    report = {
        "train_videos": list(train_ids),
        "val_videos": list(val_ids),
        "paths": paths,
        "delta": delta,
        "per_class_comparison": per_class,
    }
    if scales:
        report["scales"] = {}
        for s in scales:
            result = run_path(dataset, replace(cfg, feature_path="cropresize", expand_scale=float(s)),
                              weights, train_ids, val_ids)
            report["scales"][f"{float(s):g}"] = result["map"]
            logger.info("expand scale %g: mAP %.4f", s, result["map"])
    if crop_sizes:
        report["crop_sizes"] = {}
        for size in crop_sizes:
            result = run_path(dataset, replace(cfg, feature_path="cropresize", crop_train=(size, size),
                                               crop_test=(size, size)), weights, train_ids, val_ids)
            report["crop_sizes"][str(int(size))] = result["map"]
            logger.info("crop size %d: mAP %.4f", size, result["map"])
    return report


def save_backbone(path: str, weights: BackboneWeights) -> None:
    write_tensors(path, weights.to_named_tensors())


def load_backbone(path: str) -> BackboneWeights:
    return BackboneWeights.from_named_tensors(read_tensors(path))


def load_bank_if_needed(cfg: PipelineConfig, path: Optional[str]) -> Optional[FeatureBank]:
    if not cfg.use_lfb:
        return None
    if not path:
        raise ValueError("use_lfb requires --bank")
    return read_bank(path)


def write_extraction(out_dir: str, features: FeatureSet, weights: BackboneWeights) -> Dict:
    features.save(out_dir)
    bank = build_bank(features)
    write_bank(os.path.join(out_dir, BANK_FILE), bank)
    save_backbone(os.path.join(out_dir, BACKBONE_FILE), weights)
    return {
        "entries": len(features),
        "bank_entries": len(bank),
        "feature_dim": features.dim,
        "skipped_keyframes": features.skipped_keyframes,
        "backbone_fingerprint": weights.fingerprint,
    }

"""Single-step 2D zoom-in environment.

A scene is symbolic: a frame size plus annotated objects (boxes, categories,
optional masks). The sensing channel crops a box and resizes it to a fixed
resolution; the simulated task model detects an object when its apparent
area at that zoom crosses a threshold, so the global view misses small
objects and a good zoom reveals them.

Detection episodes consume their proposals in parallel (one step).
Segmentation episodes consume them one per step against an oracle that
copies ground truth into the chosen region.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np

from .codec import (
    DETECTION_COUNT,
    SEGMENTATION_COUNT,
    ParseOutcome,
    StructuredResponse,
    ValidationError,
    check_response,
    validate_proposals,
    Proposal,
)
from .geometry import (
    BBox,
    BitMask,
    CropTransform,
    GeometryError,
    boxes_array,
    mask_iou,
    remap_to_crop,
    remap_to_full,
)
from .heuristic import HeuristicConfig, RewardBreakdown, score_heuristic
from .metrics import Detection, GroundTruth, r_detect, suppress_duplicates

REWARD_MODES = {"task": (0.0, 1.0), "heuristic": (1.0, 0.0), "combined": (1.0, 1.0)}


class BudgetExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    bbox: BBox
    category: str
    area: int | None = None
    mask: BitMask | None = None

    def __post_init__(self):
        expected = self.mask.popcount() if self.mask is not None else self.bbox.area
        if self.area is None:
            object.__setattr__(self, "area", expected)
        elif self.area != expected:
            raise GeometryError(f"object area {self.area} != {expected}")


@dataclass(frozen=True, eq=False)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...] = ()
    merged_gt_mask: BitMask | None = None
    scene_id: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"bad frame {self.width}x{self.height}")
        for o in self.objects:
            if not o.bbox.in_frame(self.width, self.height):
                raise GeometryError(f"object {o.bbox.as_list()} outside {self.width}x{self.height}")
            if o.mask is not None and (o.mask.width, o.mask.height) != (self.width, self.height):
                raise GeometryError("instance mask frame differs from scene frame")
        m = self.merged_gt_mask
        if m is not None and (m.width, m.height) != (self.width, self.height):
            raise GeometryError("merged mask frame differs from scene frame")

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.width == other.width
            and self.height == other.height
            and self.objects == other.objects
            and self.merged_gt_mask == other.merged_gt_mask
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def frame(self) -> BBox:
        return BBox.full(self.width, self.height)

    def gt_boxes(self) -> list[BBox]:
        return [o.bbox for o in self.objects]

    def ground_truth(self) -> list[GroundTruth]:
        return [GroundTruth(o.bbox, o.category, o.area) for o in self.objects]

    @cached_property
    def _arrays(self):
        b = boxes_array(self.gt_boxes())
        centers = np.column_stack(((b[:, 0] + b[:, 2]) / 2.0, (b[:, 1] + b[:, 3]) / 2.0)) if len(b) else np.zeros((0, 2))
        areas = np.array([o.area for o in self.objects], dtype=np.float64)
        return b, centers, areas


def scene_key(scene_id: str) -> int:
    return zlib.crc32(scene_id.encode("utf-8"))


def episode_rng(seed: int, scene_id: str, sample: int = 0) -> np.random.Generator:
    """Per-episode stream; identical whether episodes run serially or in parallel."""
    return np.random.default_rng([int(seed), scene_key(scene_id), int(sample)])


@dataclass(frozen=True)
class SensingConfig:
    budget_k: int = 3
    init_shorter_side: int = 1024
    crop_resolution: int = 840
    k_parallel: int = 3

    def __post_init__(self):
        if self.budget_k < 1:
            raise ValueError("budget_k must be >= 1")
        if self.init_shorter_side <= 0 or self.crop_resolution <= 0 or self.k_parallel < 1:
            raise ValueError("resolutions and k_parallel must be positive")


@dataclass(frozen=True)
class TaskModelConfig:
    min_apparent_area: float = 100.0
    miss_rate: float = 0.0
    jitter_sigma: float = 0.0
    score_scale: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must be in [0, 1]")
        if self.min_apparent_area <= 0 or self.jitter_sigma < 0 or self.score_scale <= 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class Observation:
    transform: CropTransform

    @property
    def effective_scale(self) -> float:
        return min(self.transform.scale_x, self.transform.scale_y)

    @property
    def visible_frame(self) -> BBox:
        return self.transform.source

    def as_dict(self) -> dict:
        t = self.transform
        return {
            "source": t.source.as_list(),
            "target": [t.target_w, t.target_h],
            "effective_scale": self.effective_scale,
        }


def initial_observation(scene: Scene, cfg: SensingConfig) -> Observation:
    """Global thumbnail: the full frame resized so its shorter side is ``init_shorter_side``."""
    s = cfg.init_shorter_side / min(scene.width, scene.height)
    tw = max(1, int(round(scene.width * s)))
    th = max(1, int(round(scene.height * s)))
    return Observation(CropTransform(scene.frame, tw, th))


def apply_sensing(scene: Scene, a_cam: BBox, cfg: SensingConfig) -> Observation:
    if not a_cam.in_frame(scene.width, scene.height):
        raise GeometryError(f"sensing action {a_cam.as_list()} outside {scene.width}x{scene.height}")
    return Observation(CropTransform(a_cam, cfg.crop_resolution, cfg.crop_resolution))


def simulated_task_model(
    obs: Observation, scene: Scene, tm: TaskModelConfig, rng: np.random.Generator | None = None
) -> list[Detection]:
    """Detect every object centred in the crop whose zoomed area clears the threshold."""
    boxes, centers, areas = scene._arrays
    if len(boxes) == 0:
        return []
    v = obs.visible_frame
    s = obs.effective_scale
    inside = (
        (centers[:, 0] >= v.x1) & (centers[:, 0] <= v.x2) & (centers[:, 1] >= v.y1) & (centers[:, 1] <= v.y2)
    )
    apparent = areas * s * s
    hit = inside & (apparent >= tm.min_apparent_area)
    idx = np.flatnonzero(hit)
    if tm.miss_rate > 0.0 and len(idx):
        if rng is None:
            raise ValueError("an rng is required when miss_rate > 0")
        idx = idx[rng.random(len(idx)) >= tm.miss_rate]
    t = obs.transform
    out = []
    for i in idx.tolist():
        o = scene.objects[i]
        clipped = o.bbox.intersection(v)
        local = remap_to_crop(t, clipped)
        if tm.jitter_sigma > 0.0:
            if rng is None:
                raise ValueError("an rng is required when jitter_sigma > 0")
            j = rng.normal(0.0, tm.jitter_sigma, 4)
            c = [int(round(a + d)) for a, d in zip(local.as_list(), j)]
            c[0], c[2] = sorted((min(max(c[0], 0), t.target_w - 1), min(max(c[2], 0), t.target_w - 1)))
            c[1], c[3] = sorted((min(max(c[1], 0), t.target_h - 1), min(max(c[3], 0), t.target_h - 1)))
            local = BBox(*c)
        score = min(max(apparent[i] / (tm.score_scale * tm.min_apparent_area), 0.0), 1.0)
        out.append(Detection(remap_to_full(t, local), o.category, float(score)))
    return out


@dataclass(frozen=True)
class SegState:
    pred_mask: BitMask
    gt_mask: BitMask
    steps_used: int = 0
    budget_k: int = 3

    def __post_init__(self):
        if self.pred_mask.bits.shape != self.gt_mask.bits.shape:
            raise GeometryError("pred and gt masks differ in size")
        if not 0 <= self.steps_used <= self.budget_k:
            raise ValueError("steps_used outside [0, budget_k]")

    @property
    def miou(self) -> float:
        return mask_iou(self.pred_mask, self.gt_mask)


def oracle_refine(state: SegState, a_cam: BBox) -> SegState:
    """Copy ground truth into ``a_cam``; pixels outside it are untouched."""
    if state.steps_used >= state.budget_k:
        raise BudgetExhausted(f"budget of {state.budget_k} zoom-in steps already used")
    if not a_cam.in_frame(state.gt_mask.width, state.gt_mask.height):
        raise GeometryError(f"action {a_cam.as_list()} outside mask frame")
    bits = state.pred_mask.bits.copy()
    sl = (slice(a_cam.y1, a_cam.y2 + 1), slice(a_cam.x1, a_cam.x2 + 1))
    bits[sl] = state.gt_mask.bits[sl]
    return SegState(BitMask(bits), state.gt_mask, state.steps_used + 1, state.budget_k)


def disagreement(pred: BitMask, gt: BitMask) -> BitMask:
    return BitMask(pred.bits ^ gt.bits)


@dataclass(frozen=True)
class EpisodeContext:
    """What a sensing policy sees: the scene handle, the global view and an rng.

    ``pred_mask`` is set in segmentation episodes (the mask under review).
    Only oracle baselines read ground truth off ``scene``.
    """

    scene: Scene
    observation: Observation
    rng: np.random.Generator
    task: str = "detection"
    pred_mask: BitMask | None = None


class Policy(Protocol):
    def propose(self, ctx: EpisodeContext): ...


@dataclass
class EpisodeRecord:
    scene_id: str
    seed: int
    actions: list[BBox]
    observations: list[Observation]
    reward: RewardBreakdown
    detections: list[Detection] | None = None
    seg_trajectory: list[float] | None = None
    raw_text: str | None = None
    format_error: str | None = None
    log_prob: float = 0.0
    policy_error: str | None = None

    def as_dict(self) -> dict:
        d = {
            "scene_id": self.scene_id,
            "seed": self.seed,
            "actions": [a.as_list() for a in self.actions],
            "observations": [o.as_dict() for o in self.observations],
            "reward": self.reward.as_dict(),
            "format_error": self.format_error,
            "log_prob": self.log_prob,
            "policy_error": self.policy_error,
        }
        if self.detections is not None:
            d["detections"] = [
                {"bbox": x.bbox.as_list(), "category": x.category, "score": x.score} for x in self.detections
            ]
        if self.seg_trajectory is not None:
            d["seg_trajectory"] = list(self.seg_trajectory)
        if self.raw_text is not None:
            d["raw_text"] = self.raw_text
        return d


def detect_in_crops(
    scene: Scene, observations: Sequence[Observation], tm: TaskModelConfig, rng: np.random.Generator | None
) -> list[Detection]:
    """Run the task model on every crop, then drop cross-crop duplicates (NMS at 0.5)."""
    dets: list[Detection] = []
    for obs in observations:
        dets.extend(simulated_task_model(obs, scene, tm, rng))
    return suppress_duplicates(dets, 0.5)


def _outcome(output, scene: Scene, counts: tuple[int, int]) -> tuple[ParseOutcome, list[BBox]]:
    """Format check for a policy output, plus its full-frame boxes when valid."""
    k_min, k_max = counts
    if output.raw_text is not None:
        fw, fh = output.text_frame or (scene.width, scene.height)
        outcome = check_response(output.raw_text, fw, fh, k_min, k_max)
        return outcome, list(output.proposals) if outcome.ok else []
    resp = StructuredResponse("", "", tuple(Proposal(tuple(b.as_list())) for b in output.proposals))
    try:
        boxes = validate_proposals(resp, scene.width, scene.height, k_min, k_max)
    except ValidationError as exc:
        return ParseOutcome(resp, (), exc), []
    return ParseOutcome(resp, tuple(boxes), None), boxes


def evaluate_detection(
    scene: Scene,
    output,
    sensing: SensingConfig,
    tm: TaskModelConfig,
    hcfg: HeuristicConfig,
    rng: np.random.Generator | None,
    weights: tuple[float, float] = (1.0, 1.0),
    seed: int = 0,
    iou_thr: float = 0.5,
) -> EpisodeRecord:
    """Score one policy output on a detection scene (sense, detect, merge, reward)."""
    outcome, boxes = _outcome(output, scene, DETECTION_COUNT)
    actions = boxes[: min(sensing.k_parallel, sensing.budget_k)]
    observations = [apply_sensing(scene, a, sensing) for a in actions]
    dets = detect_in_crops(scene, observations, tm, rng)
    h = score_heuristic(
        ParseOutcome(outcome.response, tuple(boxes), outcome.error),
        scene.width,
        scene.height,
        hcfg,
        gt_mask=scene.merged_gt_mask,
        gt_boxes=scene.gt_boxes(),
    )
    reward = h.with_task(r_detect(dets, scene.ground_truth(), iou_thr), *weights)
    return EpisodeRecord(
        scene.scene_id,
        seed,
        actions,
        observations,
        reward,
        detections=dets,
        raw_text=output.raw_text,
        format_error=None if outcome.ok else str(outcome.error),
        log_prob=output.log_prob,
        policy_error=getattr(output, "error", None),
    )


def run_detection_episode(
    scene: Scene,
    policy: Policy,
    sensing: SensingConfig,
    tm: TaskModelConfig,
    hcfg: HeuristicConfig,
    seed: int,
    weights: tuple[float, float] = (1.0, 1.0),
    sample: int = 0,
    iou_thr: float = 0.5,
) -> EpisodeRecord:
    rng = episode_rng(seed, scene.scene_id, sample)
    policy_rng, model_rng = rng.spawn(2)
    ctx = EpisodeContext(scene, initial_observation(scene, sensing), policy_rng, "detection")
    output = policy.propose(ctx)
    return evaluate_detection(scene, output, sensing, tm, hcfg, model_rng, weights, seed, iou_thr)


def evaluate_segmentation(
    scene: Scene,
    output,
    pred0: BitMask,
    budget: int,
    hcfg: HeuristicConfig,
    weights: tuple[float, float] = (1.0, 1.0),
    seed: int = 0,
    sensing: SensingConfig | None = None,
) -> EpisodeRecord:
    """Apply up to ``budget`` proposals in order through :func:`oracle_refine`."""
    if scene.merged_gt_mask is None:
        raise ValueError(f"scene {scene.scene_id} has no ground-truth mask")
    gt = scene.merged_gt_mask
    outcome, boxes = _outcome(output, scene, SEGMENTATION_COUNT)
    state = SegState(pred0, gt, 0, budget)
    trajectory = [state.miou]
    actions = boxes[:budget]
    for a in actions:
        state = oracle_refine(state, a)
        trajectory.append(state.miou)
    h = score_heuristic(
        ParseOutcome(outcome.response, tuple(boxes), outcome.error),
        scene.width,
        scene.height,
        hcfg,
        target_mask=disagreement(pred0, gt),
    )
    reward = h.with_task(trajectory[-1], *weights)
    crop = (sensing or SensingConfig()).crop_resolution
    return EpisodeRecord(
        scene.scene_id,
        seed,
        actions,
        [Observation(CropTransform(a, crop, crop)) for a in actions],
        reward,
        seg_trajectory=trajectory,
        raw_text=output.raw_text,
        format_error=None if outcome.ok else str(outcome.error),
        log_prob=output.log_prob,
        policy_error=getattr(output, "error", None),
    )


def run_segmentation_episode(
    scene: Scene,
    policy: Policy,
    pred0: BitMask,
    budget: int = 3,
    seed: int = 0,
    hcfg: HeuristicConfig | None = None,
    sensing: SensingConfig | None = None,
    weights: tuple[float, float] = (1.0, 1.0),
    sample: int = 0,
) -> EpisodeRecord:
    sensing = sensing or SensingConfig()
    rng = episode_rng(seed, scene.scene_id, sample)
    ctx = EpisodeContext(scene, initial_observation(scene, sensing), rng, "segmentation", pred0)
    output = policy.propose(ctx)
    return evaluate_segmentation(scene, output, pred0, budget, hcfg or HeuristicConfig(), weights, seed, sensing)


def miou_at_budget(trajectory: Sequence[float], budget: int) -> float:
    return trajectory[min(budget, len(trajectory) - 1)]


@dataclass
class DetectionEnv:
    """A fixed scene set plus configs; the unit the trainer samples from."""

    scenes: Sequence[Scene]
    sensing: SensingConfig = field(default_factory=SensingConfig)
    task_model: TaskModelConfig = field(default_factory=TaskModelConfig)
    heuristic: HeuristicConfig = field(default_factory=HeuristicConfig)
    iou_thr: float = 0.5
    task: str = "detection"

    def __post_init__(self):
        if not self.scenes:
            raise ValueError("environment needs at least one scene")
        frames = {(s.width, s.height) for s in self.scenes}
        if len(frames) != 1:
            raise ValueError(f"all scenes must share one frame size, got {sorted(frames)}")
        self._cache: dict = {}

    @property
    def frame(self) -> tuple[int, int]:
        s = self.scenes[0]
        return s.width, s.height

    @property
    def deterministic(self) -> bool:
        return self.task_model.miss_rate == 0.0 and self.task_model.jitter_sigma == 0.0

    def score(self, i: int, output, rng: np.random.Generator | None) -> RewardBreakdown:
        key = (i, output.indices) if output.indices is not None and self.deterministic else None
        if key is not None and key in self._cache:
            return self._cache[key]
        rec = evaluate_detection(
            self.scenes[i], output, self.sensing, self.task_model, self.heuristic, rng, iou_thr=self.iou_thr
        )
        if key is not None:
            self._cache[key] = rec.reward
        return rec.reward

    def episode(self, i: int, policy: Policy, seed: int, sample: int = 0, weights=(1.0, 1.0)) -> EpisodeRecord:
        return run_detection_episode(
            self.scenes[i], policy, self.sensing, self.task_model, self.heuristic, seed, weights, sample, self.iou_thr
        )


@dataclass
class SegmentationEnv:
    """Scenes with ground-truth masks and one fixed corrupted starting mask each."""

    scenes: Sequence[Scene]
    initial_masks: Sequence[BitMask]
    budget: int = 3
    heuristic: HeuristicConfig = field(default_factory=HeuristicConfig)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    task: str = "segmentation"

    def __post_init__(self):
        if not self.scenes or len(self.scenes) != len(self.initial_masks):
            raise ValueError("need one initial mask per scene")
        frames = {(s.width, s.height) for s in self.scenes}
        if len(frames) != 1:
            raise ValueError(f"all scenes must share one frame size, got {sorted(frames)}")
        self._cache: dict = {}

    @property
    def frame(self) -> tuple[int, int]:
        s = self.scenes[0]
        return s.width, s.height

    def score(self, i: int, output, rng=None) -> RewardBreakdown:
        key = (i, output.indices) if output.indices is not None else None
        if key is not None and key in self._cache:
            return self._cache[key]
        rec = evaluate_segmentation(
            self.scenes[i], output, self.initial_masks[i], self.budget, self.heuristic, sensing=self.sensing
        )
        if key is not None:
            self._cache[key] = rec.reward
        return rec.reward

    def episode(self, i: int, policy: Policy, seed: int, sample: int = 0, weights=(1.0, 1.0), budget=None) -> EpisodeRecord:
        return run_segmentation_episode(
            self.scenes[i],
            policy,
            self.initial_masks[i],
            self.budget if budget is None else budget,
            seed,
            self.heuristic,
            self.sensing,
            weights,
            sample,
        )

"""Avatar training: batched gradient accumulation over frames, Adam updates, density
control on schedule, metrics logging, evaluation and checkpointing."""

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn
from tqdm import tqdm

from app.src.models.avatar import AvatarModel
from app.src.models.body_model import PoseParams, SkinnedTemplate, clamp_pose
from app.src.models.checkpoint import Checkpoint, load_checkpoint, restore_optimizer, save_checkpoint
from app.src.models.splat_model import anchor_positions
from app.src.rendering.camera import Camera, project_points
from app.src.rendering.rasterizer import (
    RenderOutput,
    RenderSettings,
    ScreenGradAccumulator,
    render_backward,
    render_gaussians,
)
from app.src.rendering.sh import rgb_to_dc
from app.src.roles.stage import BaseStage
from app.src.schemas.base import CheckpointMeta, EvalReport, FrameMetrics, LossReport
from app.src.schemas.config import StudioConfig, TrainerConfig
from app.src.training.dataset import CAMERAS_FILE, Dataset, DatasetError, TrainingFrame, load_dataset
from app.src.training.density_control import densify, expansion_sizes, prune, select_candidates
from app.src.training.losses import image_loss, psnr, ssim
from app.src.training.regularizer import Regularizer, sh_active_degree
from app.src.utils.determinism import seed_everything

logger = logging.getLogger(__name__)

METRICS_COLUMNS: List[str] = [
    "iteration",
    "batch",
    "l1",
    "dssim",
    "var",
    "disp",
    "total",
    "psnr",
    "ssim",
    "active_splats",
]
ADAM_BETAS: Tuple[float, float] = (0.9, 0.999)
ADAM_EPS: float = 1e-8
CHECKPOINT_DIR: str = "checkpoint"
METRICS_FILE: str = "metrics.csv"
EVAL_FILE: str = "eval.json"
TORCH_DTYPES: Dict[str, torch.dtype] = {"float32": torch.float32, "float64": torch.float64}

PoseLookup = Callable[[TrainingFrame], PoseParams]


class PoseBank(nn.Module):
    """Refinable theta and psi per frame_id. Shape and the global transform stay fixed."""

    def __init__(self, poses: Dict[int, PoseParams]):
        super().__init__()
        if not poses:
            raise ValueError("a pose bank needs at least one pose")
        self.frame_ids: List[int] = sorted(poses)
        ordered: List[PoseParams] = [poses[i] for i in self.frame_ids]
        self.theta = nn.Parameter(torch.stack([p.theta.detach() for p in ordered]).clone())
        self.psi = nn.Parameter(torch.stack([p.psi.detach() for p in ordered]).clone())
        self.register_buffer("beta", torch.stack([p.beta.detach() for p in ordered]).clone())
        self.register_buffer("global_rot", torch.stack([p.global_rot.detach() for p in ordered]).clone())
        self.register_buffer("global_trans", torch.stack([p.global_trans.detach() for p in ordered]).clone())
        self._rows: Dict[int, int] = {frame_id: row for row, frame_id in enumerate(self.frame_ids)}

    def __contains__(self, frame_id: object) -> bool:
        return frame_id in self._rows

    def pose(self, frame_id: int) -> PoseParams:
        row: int = self._rows[frame_id]
        return PoseParams(
            beta=self.beta[row],
            psi=self.psi[row],
            theta=self.theta[row],
            global_rot=self.global_rot[row],
            global_trans=self.global_trans[row],
        )

    @torch.no_grad()
    def clamp_(self, template: SkinnedTemplate) -> None:
        lower = template.joint_limits[..., 0].to(self.theta.dtype)
        upper = template.joint_limits[..., 1].to(self.theta.dtype)
        theta = torch.minimum(torch.maximum(self.theta.data, lower), upper)
        self.theta.data.copy_(torch.where(template.locked, torch.zeros_like(theta), theta))

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {"pose.theta": self.theta, "pose.psi": self.psi}

    @torch.no_grad()
    def load_tensors(self, tensors: Dict[str, torch.Tensor], frame_ids: Sequence[int]) -> None:
        if list(frame_ids) != self.frame_ids:
            raise ValueError("stored pose bank covers different frame ids than the dataset")
        for name, param in self.tensors().items():
            if name in tensors:
                param.copy_(tensors[name].to(param.dtype))


@dataclass
class TrainingState:
    avatar: AvatarModel
    optimizer: torch.optim.Adam
    regularizer: Regularizer
    accumulator: ScreenGradAccumulator
    settings: RenderSettings
    background: torch.Tensor
    beta: torch.Tensor
    pose_bank: Optional[PoseBank] = None
    iteration: int = 0
    active_sh_degree: int = 0

    def pose_for(self, frame: TrainingFrame) -> PoseParams:
        if self.pose_bank is not None and frame.frame_id in self.pose_bank:
            return self.pose_bank.pose(frame.frame_id)
        return frame.pose

    def named_inputs(self) -> Dict[str, torch.Tensor]:
        inputs: Dict[str, torch.Tensor] = self.avatar.named_inputs()
        if self.pose_bank is not None:
            inputs.update(self.pose_bank.tensors())
        return inputs


@dataclass
class StepGradients:
    grads: Dict[str, torch.Tensor]
    report: LossReport
    accumulator: ScreenGradAccumulator


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    iterations: int
    active_splats: int
    final_report: Optional[LossReport] = None
    evaluation: Optional[EvalReport] = None


def build_optimizer(avatar: AvatarModel, cfg: TrainerConfig, pose_bank: Optional[PoseBank] = None) -> torch.optim.Adam:
    groups = avatar.param_groups(cfg)
    if pose_bank is not None:
        groups.append({"name": "pose", "params": [pose_bank.theta, pose_bank.psi], "lr": cfg.lr_pose})
    return torch.optim.Adam(groups, betas=ADAM_BETAS, eps=ADAM_EPS)


@torch.no_grad()
def canonical_anchor_positions(avatar: AvatarModel, beta: torch.Tensor) -> torch.Tensor:
    """Active splat centres on the displaced canonical mesh."""
    pose = replace(PoseParams.identity(avatar.template), beta=beta)
    canonical, _, _ = avatar.meshes(pose)
    splats = avatar.splats
    ids = splats.active_ids()
    return anchor_positions(
        splats.face_id[ids],
        splats.convex_k(ids),
        splats.offsets(ids),
        canonical.vertices,
        avatar.template.faces,
        canonical.face_normals,
    )


def rebuild_neighborhoods(state: TrainingState) -> None:
    state.regularizer.rebuild(
        state.avatar.splats,
        canonical_anchor_positions(state.avatar, state.beta),
        state.avatar.template.faces,
    )


def create_state(
    avatar: AvatarModel,
    cfg: StudioConfig,
    background: torch.Tensor,
    poses: Optional[Dict[int, PoseParams]] = None,
) -> TrainingState:
    """Optimizer, regularizer and bookkeeping around an avatar.

    Args:
        avatar (AvatarModel): The model to train.
        cfg (StudioConfig): Learning rates, regularizer weights and render settings.
        background (torch.Tensor): RGB compositing background.
        poses (Optional[Dict[int, PoseParams]]): Poses by frame_id. They become a
            refinable pose bank when trainer.refine_pose is on.
    """
    dtype: torch.dtype = avatar.template.rest_vertices.dtype
    pose_bank: Optional[PoseBank] = None
    if poses and cfg.trainer.refine_pose:
        pose_bank = PoseBank(poses)
    beta = poses[min(poses)].beta.detach().clone() if poses else torch.zeros(avatar.template.n_shape, dtype=dtype)
    state = TrainingState(
        avatar=avatar,
        optimizer=build_optimizer(avatar, cfg.trainer, pose_bank),
        regularizer=Regularizer(cfg.regularizer, cfg.body.caps()),
        accumulator=ScreenGradAccumulator(avatar.splats.capacity, dtype),
        settings=RenderSettings.from_config(cfg.render),
        background=torch.as_tensor(background, dtype=dtype),
        beta=beta,
        pose_bank=pose_bank,
    )
    rebuild_neighborhoods(state)
    return state


def render_frame(
    avatar: AvatarModel,
    pose: PoseParams,
    camera: Camera,
    background: torch.Tensor,
    settings: RenderSettings,
    active_sh_degree: int = 0,
    inputs: Optional[Dict[str, torch.Tensor]] = None,
) -> RenderOutput:
    frame = avatar(pose)
    return render_gaussians(frame.gaussians, camera, background, settings, active_sh_degree, inputs)


def _add_into(total: Dict[str, torch.Tensor], grads: Dict[str, Optional[torch.Tensor]]) -> None:
    for name, grad in grads.items():
        if grad is not None and name in total:
            total[name] = total[name] + grad


def _autograd(value: torch.Tensor, inputs: Dict[str, torch.Tensor], retain_graph: bool = False) -> Dict[str, Optional[torch.Tensor]]:
    names: List[str] = [n for n, t in inputs.items() if t.requires_grad]
    if not value.requires_grad or not names:
        return {}
    computed = torch.autograd.grad(
        value, [inputs[n] for n in names], allow_unused=True, retain_graph=retain_graph
    )
    return dict(zip(names, computed))


def frame_gradients(
    state: TrainingState,
    frames: Sequence[TrainingFrame],
    cfg: TrainerConfig,
    with_metrics: bool = False,
) -> Optional[StepGradients]:
    """Batch-averaged gradients of the training objective, without touching the model.

    Each frame contributes its image loss through `render_backward` and its displacement
    penalty; the sums are divided by the batch size and the neighborhood variance term is
    added once.

    Returns:
        Optional[StepGradients]: None when a loss term is not finite.

    Raises:
        ValueError: If `frames` is empty.
    """
    if not frames:
        raise ValueError("an accumulation step needs at least one frame")
    avatar = state.avatar
    inputs: Dict[str, torch.Tensor] = state.named_inputs()
    grads: Dict[str, torch.Tensor] = {n: torch.zeros_like(t) for n, t in inputs.items()}
    local = ScreenGradAccumulator(avatar.splats.capacity, state.accumulator.grad_sum.dtype)
    n: int = len(frames)
    sums: Dict[str, float] = {"l1": 0.0, "dssim": 0.0, "image": 0.0, "disp": 0.0, "psnr": 0.0, "ssim": 0.0}

    for frame in frames:
        avatar_frame = avatar(state.pose_for(frame))
        output = render_gaussians(
            avatar_frame.gaussians, frame.camera, state.background, state.settings, state.active_sh_degree, inputs
        )
        terms = image_loss(output.image, frame.image, cfg.weight_l1, cfg.weight_dssim)
        disp = state.regularizer.displacement_term(avatar_frame.displacement, avatar.template.segment)
        if not (bool(torch.isfinite(terms.total)) and bool(torch.isfinite(disp))):
            logger.warning(
                f"Non-finite loss on frame {frame.index} at iteration {state.iteration} "
                f"(image {float(terms.total)}, displacement {float(disp)}); step aborted"
            )
            return None
        if output.image.requires_grad:
            (image_grad,) = torch.autograd.grad(terms.total, output.image, retain_graph=True)
            _add_into(grads, render_backward(image_grad, output.context, local, retain_graph=disp.requires_grad))
        _add_into(grads, _autograd(disp, inputs))
        sums["l1"] += float(terms.l1)
        sums["dssim"] += float(terms.dssim)
        sums["image"] += float(terms.total)
        sums["disp"] += float(disp)
        if with_metrics:
            sums["psnr"] += psnr(output.image, frame.image)
            sums["ssim"] += float(ssim(output.image.detach(), frame.image))

    for name in grads:
        grads[name] = grads[name] / n
    variance = torch.zeros((), dtype=state.background.dtype)
    if state.regularizer.cfg.enabled:
        variance = state.regularizer.weighted_variance(state.regularizer.variance_terms(avatar.splats), variance)
        if not bool(torch.isfinite(variance)):
            logger.warning(f"Non-finite variance loss at iteration {state.iteration}; step aborted")
            return None
        _add_into(grads, _autograd(variance, inputs))

    report = LossReport(
        l1=sums["l1"] / n,
        dssim=sums["dssim"] / n,
        variance=float(variance),
        displacement=sums["disp"] / n,
        total=sums["image"] / n + float(variance) + sums["disp"] / n,
        psnr=sums["psnr"] / n if with_metrics else None,
        ssim=sums["ssim"] / n if with_metrics else None,
    )
    return StepGradients(grads=grads, report=report, accumulator=local)


def accumulate_step(
    state: TrainingState,
    frames: Sequence[TrainingFrame],
    cfg: TrainerConfig,
    with_metrics: bool = False,
) -> Optional[LossReport]:
    """One Adam step on the batch-averaged gradient of `frames`.

    Returns:
        Optional[LossReport]: The batch report, or None when the step was aborted on a
            non-finite loss (the model, optimizer and accumulators are left untouched).
    """
    step = frame_gradients(state, frames, cfg, with_metrics)
    if step is None:
        return None
    for name, param in state.named_inputs().items():
        if param.requires_grad:
            param.grad = step.grads[name]
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.avatar.splats.project_constraints()
    if state.pose_bank is not None:
        state.pose_bank.clamp_(state.avatar.template)
    state.accumulator.merge(step.accumulator)
    return step.report


def density_step(state: TrainingState, cfg: StudioConfig) -> bool:
    """Densifies and prunes when the iteration is on the schedule. Returns True when the
    splat set changed."""
    iteration: int = state.iteration
    policy = cfg.densify
    if iteration == 0 or iteration % policy.interval or not policy.start <= iteration <= policy.stop:
        return False
    avatar = state.avatar
    splats = avatar.splats
    template = avatar.template
    changed: bool = False
    if policy.enabled:
        expansion = expansion_sizes(splats, template.rest_vertices, template.faces)
        candidates = select_candidates(state.accumulator, policy, splats.active, expansion, splats.n_active)
        result = densify(
            candidates,
            splats,
            template.rest_vertices,
            template.faces,
            avatar.s_max,
            policy,
            state.optimizer,
            state.accumulator,
        )
        changed = bool(result.new_ids)
    if cfg.prune.enabled:
        changed = bool(prune(splats, cfg.prune, avatar.s_max, state.optimizer)) or changed
    if changed:
        rebuild_neighborhoods(state)
    return changed


@torch.no_grad()
def init_colors_from_frames(state: TrainingState, frames: Sequence[TrainingFrame]) -> int:
    """Sets base DC colours from the first frame in which each splat centre projects
    inside the image. Returns the number of splats coloured."""
    splats = state.avatar.splats
    assigned = torch.zeros(splats.capacity, dtype=torch.bool)
    for frame in frames:
        gaussians = state.avatar(state.pose_for(frame)).gaussians
        cam = frame.camera
        depth = cam.to_camera(gaussians.mu)[:, 2]
        uv = project_points(gaussians.mu, cam)
        col = torch.nan_to_num(torch.round(uv[:, 0]), nan=-1.0)
        row = torch.nan_to_num(torch.round(uv[:, 1]), nan=-1.0)
        visible = (
            (depth > cam.near)
            & (col >= 0)
            & (col < cam.width)
            & (row >= 0)
            & (row < cam.height)
            & ~assigned[gaussians.ids]
        )
        ids = gaussians.ids[visible]
        rgb = frame.image[row[visible].long(), col[visible].long()]
        splats.sh_dc.data[ids, 0] = rgb_to_dc(rgb).to(splats.sh_dc.dtype)
        assigned[ids] = True
        if bool(assigned[splats.active].all()):
            break
    n_coloured: int = int(assigned.sum())
    logger.info(f"Initialised colours of {n_coloured}/{splats.n_active} splats from {len(frames)} frames")
    return n_coloured


def refine_eval_pose(
    avatar: AvatarModel,
    frame: TrainingFrame,
    pose: PoseParams,
    background: torch.Tensor,
    settings: RenderSettings,
    active_sh_degree: int,
    cfg: TrainerConfig,
) -> PoseParams:
    """Fits theta and psi (not beta) of one frame by image loss with the model frozen."""
    theta = pose.theta.detach().clone().requires_grad_(True)
    psi = pose.psi.detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([theta, psi], lr=cfg.lr_pose, betas=ADAM_BETAS, eps=ADAM_EPS)
    for _ in range(cfg.eval_pose_refine_steps):
        output = render_frame(avatar, replace(pose, theta=theta, psi=psi), frame.camera, background, settings, active_sh_degree)
        loss = image_loss(output.image, frame.image, cfg.weight_l1, cfg.weight_dssim).total
        if not loss.requires_grad or not bool(torch.isfinite(loss)):
            break
        grad_theta, grad_psi = torch.autograd.grad(loss, [theta, psi], allow_unused=True)
        theta.grad = grad_theta if grad_theta is not None else torch.zeros_like(theta)
        psi.grad = grad_psi if grad_psi is not None else torch.zeros_like(psi)
        optimizer.step()
        with torch.no_grad():
            theta.copy_(clamp_pose(avatar.template, replace(pose, theta=theta.detach())).theta)
    return replace(pose, theta=theta.detach(), psi=psi.detach())


def evaluate(
    avatar: AvatarModel,
    frames: Sequence[TrainingFrame],
    background: torch.Tensor,
    settings: RenderSettings,
    active_sh_degree: int,
    cfg: TrainerConfig,
    pose_for: Optional[PoseLookup] = None,
) -> EvalReport:
    """PSNR and SSIM per frame and their means (NaN means for no frames)."""
    metrics: List[FrameMetrics] = []
    for frame in frames:
        pose: PoseParams = pose_for(frame) if pose_for is not None else frame.pose
        if cfg.eval_pose_refine_steps:
            pose = refine_eval_pose(avatar, frame, pose, background, settings, active_sh_degree, cfg)
        with torch.no_grad():
            image = render_frame(avatar, pose, frame.camera, background, settings, active_sh_degree).image
            metrics.append(FrameMetrics(frame_id=frame.index, psnr=psnr(image, frame.image), ssim=float(ssim(image, frame.image))))
    mean_psnr: float = sum(m.psnr for m in metrics) / len(metrics) if metrics else math.nan
    mean_ssim: float = sum(m.ssim for m in metrics) / len(metrics) if metrics else math.nan
    return EvalReport(frames=metrics, mean_psnr=mean_psnr, mean_ssim=mean_ssim)


class MetricsLog:
    """CSV metrics log, one row per logged iteration."""

    def __init__(self, path: str | Path):
        self.path: Path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, iteration: int, batch: int, report: LossReport, active_splats: int) -> None:
        row: List[object] = [
            iteration,
            batch,
            report.l1,
            report.dssim,
            report.variance,
            report.displacement,
            report.total,
            "" if report.psnr is None else report.psnr,
            "" if report.ssim is None else report.ssim,
            active_splats,
        ]
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(row)


class FrameSampler:
    """Deterministic shuffled batches, reshuffling after every pass over the frames."""

    def __init__(self, frames: Sequence[TrainingFrame], batch: int, seed: int):
        if not frames:
            raise ValueError("no frames to sample from")
        self.frames: List[TrainingFrame] = list(frames)
        self.batch: int = batch
        self.generator: torch.Generator = torch.Generator().manual_seed(seed)
        self.order: List[int] = []

    def next_batch(self) -> List[TrainingFrame]:
        batch: List[TrainingFrame] = []
        while len(batch) < self.batch:
            if not self.order:
                self.order = torch.randperm(len(self.frames), generator=self.generator).tolist()
            batch.append(self.frames[self.order.pop(0)])
        return batch


def checkpoint_meta(state: TrainingState, cfg: StudioConfig) -> CheckpointMeta:
    return CheckpointMeta(
        iteration=state.iteration,
        active_sh_degree=state.active_sh_degree,
        n_splats=state.avatar.splats.n_active,
        dtype=cfg.trainer.dtype,
        pose_frame_ids=state.pose_bank.frame_ids if state.pose_bank is not None else [],
        config=cfg.model_dump(mode="json"),
    )


def pose_bank_from_checkpoint(checkpoint: Checkpoint, poses: Dict[int, PoseParams]) -> Optional[PoseBank]:
    if "pose.theta" not in checkpoint.extra:
        return None
    stored = {i: poses[i] for i in checkpoint.meta.pose_frame_ids if i in poses}
    if len(stored) != len(checkpoint.meta.pose_frame_ids):
        raise ValueError("checkpoint refines poses of frames missing from the dataset")
    bank = PoseBank(stored)
    bank.load_tensors(checkpoint.extra, checkpoint.meta.pose_frame_ids)
    return bank


class AvatarTrainer(BaseStage):
    """Trains an avatar on a dataset directory and writes checkpoint, metrics and
    held-out evaluation into paths.output."""

    def setup(self, dataset: Dataset) -> TrainingState:
        cfg: StudioConfig = self.config
        if cfg.paths.checkpoint:
            checkpoint = load_checkpoint(cfg.paths.checkpoint)
            state = create_state(checkpoint.avatar, cfg, dataset.background, dataset.poses)
            bank = pose_bank_from_checkpoint(checkpoint, dataset.poses)
            if bank is not None and state.pose_bank is not None:
                state.pose_bank.load_tensors(checkpoint.extra, bank.frame_ids)
            restore_optimizer(state.optimizer, checkpoint.optimizer_state)
            state.iteration = checkpoint.meta.iteration
            state.active_sh_degree = checkpoint.meta.active_sh_degree
            self.logger.info(f"Resuming from {cfg.paths.checkpoint} at iteration {state.iteration}")
            return state
        avatar = AvatarModel.create(dataset.rig, cfg.splats, cfg.body)
        state = create_state(avatar, cfg, dataset.background, dataset.poses)
        if cfg.trainer.init_colors_from_frames:
            init_colors_from_frames(state, dataset.train_frames)
        return state

    def _run(self, *args, **kwargs) -> TrainResult:
        cfg: StudioConfig = self.config
        trainer_cfg: TrainerConfig = cfg.trainer
        dtype: torch.dtype = TORCH_DTYPES[trainer_cfg.dtype]
        seed_everything(trainer_cfg.seed)
        dataset = load_dataset(kwargs.get("dataset_dir") or cfg.paths.dataset, dtype=dtype)
        if not dataset.train_frames:
            raise DatasetError(dataset.root / CAMERAS_FILE, "no camera has split 'train'")
        state = self.setup(dataset)

        output = Path(cfg.paths.output)
        output.mkdir(parents=True, exist_ok=True)
        metrics = MetricsLog(output / METRICS_FILE)
        sampler = FrameSampler(dataset.train_frames, trainer_cfg.batch, trainer_cfg.seed)
        last_report: Optional[LossReport] = None
        self.logger.info(
            f"Training {state.avatar.splats.n_active} splats for {trainer_cfg.iterations} iterations, "
            f"batch {trainer_cfg.batch}, {len(dataset.train_frames)} training frames"
        )
        progress = tqdm(range(state.iteration, trainer_cfg.iterations), desc=self.name, leave=False)
        for _ in progress:
            state.iteration += 1
            degree: int = sh_active_degree(state.iteration, trainer_cfg.iterations, cfg.regularizer.sh_schedule)
            state.active_sh_degree = min(degree, state.avatar.sh_degree)
            log_now: bool = (
                state.iteration % trainer_cfg.log_interval == 0 or state.iteration == trainer_cfg.iterations
            )
            report = accumulate_step(state, sampler.next_batch(), trainer_cfg, with_metrics=log_now)
            if report is None:
                continue
            last_report = report
            density_step(state, cfg)
            if log_now:
                metrics.append(state.iteration, trainer_cfg.batch, report, state.avatar.splats.n_active)
                self.logger.info(
                    f"Iteration {state.iteration}: loss {report.total:.5f}, PSNR {report.psnr:.2f} dB, "
                    f"{state.avatar.splats.n_active} active splats"
                )
            progress.set_postfix(loss=f"{report.total:.4f}")

        extra: Dict[str, torch.Tensor] = state.pose_bank.tensors() if state.pose_bank is not None else {}
        checkpoint_path = save_checkpoint(
            output / CHECKPOINT_DIR, state.avatar, checkpoint_meta(state, cfg), state.optimizer, extra
        )
        evaluation: Optional[EvalReport] = None
        if dataset.test_frames:
            evaluation = evaluate(
                state.avatar,
                dataset.test_frames,
                state.background,
                state.settings,
                state.active_sh_degree,
                trainer_cfg,
                state.pose_for,
            )
            (output / EVAL_FILE).write_text(evaluation.model_dump_json(indent=2), encoding="utf-8")
            self.logger.info(f"Held-out PSNR {evaluation.mean_psnr:.2f} dB, SSIM {evaluation.mean_ssim:.4f}")
        return TrainResult(
            checkpoint=checkpoint_path,
            metrics=metrics.path,
            iterations=state.iteration,
            active_splats=state.avatar.splats.n_active,
            final_report=last_report,
            evaluation=evaluation,
        )


class AvatarEvaluator(BaseStage):
    """Scores a checkpoint on the held-out (or all) frames of a dataset."""

    def _run(self, *args, **kwargs) -> EvalReport:
        cfg: StudioConfig = self.config
        checkpoint_dir = kwargs.get("checkpoint") or cfg.paths.checkpoint
        if not checkpoint_dir:
            self.logger.error("No checkpoint given to evaluate")
            raise ValueError("a checkpoint path is required (paths.checkpoint or --checkpoint)")
        checkpoint = load_checkpoint(checkpoint_dir)
        dtype: torch.dtype = TORCH_DTYPES[checkpoint.meta.dtype]
        dataset = load_dataset(kwargs.get("dataset_dir") or cfg.paths.dataset, dtype=dtype)
        frames = dataset.test_frames or dataset.frames
        bank = pose_bank_from_checkpoint(checkpoint, dataset.poses)

        def pose_for(frame: TrainingFrame) -> PoseParams:
            if bank is not None and frame.frame_id in bank:
                return bank.pose(frame.frame_id)
            return frame.pose

        report = evaluate(
            checkpoint.avatar,
            frames,
            dataset.background,
            RenderSettings.from_config(cfg.render),
            checkpoint.meta.active_sh_degree,
            cfg.trainer,
            pose_for,
        )
        output = Path(cfg.paths.output)
        output.mkdir(parents=True, exist_ok=True)
        (output / EVAL_FILE).write_text(report.model_dump_json(indent=2), encoding="utf-8")
        self.logger.info(f"Evaluated {len(frames)} frames: PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}")
        return report

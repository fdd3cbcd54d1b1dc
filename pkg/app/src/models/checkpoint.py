"""Checkpoint directory I/O.

A checkpoint is a directory holding

- ``splats.ply``: binary little-endian PLY, one ``splat`` element per active splat,
- ``weights.bin``: ``SPLW`` magic, uint32 header length, a JSON header listing named
  tensor sections (dtype, shape, offset, size) and the raw little-endian payload,
- ``meta.json``: iteration counters, active SH degree and the config snapshot,
- ``rig.json``: the upsampled rig the splats are anchored on.

Deactivated splats are dropped on save, together with their optimizer moments.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from plyfile import PlyData, PlyElement, PlyParseError
from pydantic import ValidationError

from app.src.models.avatar import AvatarModel
from app.src.models.rig_io import save_rig, template_from_record
from app.src.models.splat_model import SH_COEFFS, SPLAT_PARAMS, SplatModel
from app.src.schemas.base import CheckpointMeta, RigRecord, WeightSection
from app.src.schemas.config import StudioConfig

logger = logging.getLogger(__name__)

SPLATS_FILE: str = "splats.ply"
WEIGHTS_FILE: str = "weights.bin"
META_FILE: str = "meta.json"
RIG_FILE: str = "rig.json"
WEIGHTS_MAGIC: bytes = b"SPLW"
SPLAT_ELEMENT: str = "splat"

_NUMPY_DTYPES: Dict[str, str] = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}
_TORCH_DTYPES: Dict[str, torch.dtype] = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(ValueError):
    """Unreadable checkpoint; `section` names the first inconsistent file or section."""

    def __init__(self, section: str, message: str):
        self.section: str = section
        super().__init__(f"checkpoint section '{section}': {message}")


@dataclass
class Checkpoint:
    avatar: AvatarModel
    meta: CheckpointMeta
    config: StudioConfig
    optimizer_state: Dict[str, torch.Tensor] = field(default_factory=dict)
    extra: Dict[str, torch.Tensor] = field(default_factory=dict)


def _dtype_name(dtype: torch.dtype) -> str:
    for name, torch_dtype in _TORCH_DTYPES.items():
        if torch_dtype == dtype:
            return name
    if dtype == torch.int64:
        return "int64"
    raise CheckpointError(WEIGHTS_FILE, f"unsupported tensor dtype {dtype}")


def _ply_attributes(float_type: str) -> List[tuple[str, str]]:
    attributes: List[tuple[str, str]] = [("face_id", "u4")]
    attributes += [(f"k_logit_{i}", float_type) for i in range(3)]
    attributes += [("l", float_type)]
    attributes += [(f"log_scale_{i}", float_type) for i in range(3)]
    attributes += [(f"rot_{i}", float_type) for i in range(4)]
    attributes += [("opacity_logit", float_type)]
    attributes += [(f"sh_{i}", float_type) for i in range(SH_COEFFS * 3)]
    attributes += [("origin", "u1"), ("segment", "u1")]
    return attributes


def save_splats_ply(splats: SplatModel, path: str | Path) -> None:
    """Writes the active splats; SH values are stored coefficient-major (c * 3 + channel)."""
    compact = splats.compacted()
    float_type: str = "f8" if compact.log_scale.dtype == torch.float64 else "f4"
    elements = np.empty(compact.capacity, dtype=_ply_attributes(float_type))

    def column(tensor: torch.Tensor) -> np.ndarray:
        return tensor.detach().cpu().numpy().reshape(compact.capacity, -1)

    elements["face_id"] = compact.face_id.cpu().numpy().astype(np.uint32)
    for name, tensor in (
        ("k_logit", compact.k_logits),
        ("log_scale", compact.log_scale),
        ("rot", compact.rotation),
        ("sh", compact.sh),
    ):
        values = column(tensor)
        for i in range(values.shape[1]):
            elements[f"{name}_{i}"] = values[:, i]
    elements["l"] = column(compact.l)[:, 0]
    elements["opacity_logit"] = column(compact.opacity)[:, 0]
    elements["origin"] = compact.is_original.cpu().numpy().astype(np.uint8)
    elements["segment"] = compact.segment.cpu().numpy().astype(np.uint8)
    PlyData([PlyElement.describe(elements, SPLAT_ELEMENT)], byte_order="<").write(str(path))


def load_splats_ply(path: str | Path, l_max: float, dtype: Optional[torch.dtype] = None) -> SplatModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(SPLATS_FILE, "file is missing")
    try:
        ply = PlyData.read(str(path))
        data = ply[SPLAT_ELEMENT].data
    except (PlyParseError, KeyError, ValueError, EOFError) as e:
        raise CheckpointError(SPLATS_FILE, f"unreadable PLY: {e}") from e
    names: List[str] = [n for n, _ in _ply_attributes("f4")]
    missing: List[str] = [n for n in names if n not in data.dtype.names]
    if missing:
        raise CheckpointError(SPLATS_FILE, f"missing property '{missing[0]}'")
    dtype = dtype or torch.get_default_dtype()

    def stack(prefix: str, count: int) -> torch.Tensor:
        values = np.stack([np.asarray(data[f"{prefix}_{i}"]) for i in range(count)], axis=1)
        return torch.as_tensor(values, dtype=dtype)

    n: int = len(data)
    return SplatModel(
        face_id=torch.as_tensor(np.asarray(data["face_id"]).astype(np.int64)),
        k_logits=stack("k_logit", 3),
        l=torch.as_tensor(np.asarray(data["l"]), dtype=dtype),
        log_scale=stack("log_scale", 3),
        rotation=stack("rot", 4),
        opacity=torch.as_tensor(np.asarray(data["opacity_logit"]), dtype=dtype),
        sh=stack("sh", SH_COEFFS * 3).reshape(n, SH_COEFFS, 3),
        is_original=torch.as_tensor(np.asarray(data["origin"]).astype(bool)),
        segment=torch.as_tensor(np.asarray(data["segment"]).astype(np.int64)),
        l_max=l_max,
    )


def write_weights(tensors: Dict[str, torch.Tensor], path: str | Path, header_extra: Optional[Dict[str, Any]] = None) -> None:
    sections: List[Dict[str, Any]] = []
    payload: List[bytes] = []
    offset: int = 0
    for name, tensor in tensors.items():
        dtype_name: str = _dtype_name(tensor.dtype)
        raw: bytes = tensor.detach().contiguous().cpu().numpy().astype(_NUMPY_DTYPES[dtype_name]).tobytes()
        sections.append(
            {"name": name, "dtype": dtype_name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)}
        )
        payload.append(raw)
        offset += len(raw)
    header: bytes = json.dumps({**(header_extra or {}), "sections": sections}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in payload:
            f.write(raw)


def read_weights(path: str | Path) -> tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Reads a weights file.

    Returns:
        tuple[Dict[str, torch.Tensor], Dict[str, Any]]: Tensors by section name, and the header.

    Raises:
        CheckpointError: Naming the file, the header or the first truncated section.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(WEIGHTS_FILE, "file is missing")
    blob: bytes = path.read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise CheckpointError(WEIGHTS_FILE, "bad magic")
    if len(blob) < 8:
        raise CheckpointError("header", "header length is truncated")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise CheckpointError("header", f"needs {header_len} bytes, file has {len(blob) - 8}")
    try:
        header: Dict[str, Any] = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("header", f"invalid JSON: {e}") from e
    payload: bytes = blob[8 + header_len :]
    tensors: Dict[str, torch.Tensor] = {}
    try:
        sections = [WeightSection.model_validate(s) for s in header.get("sections", [])]
    except (AttributeError, ValidationError) as e:
        raise CheckpointError("header", f"invalid section table: {e}") from e
    for section in sections:
        end: int = section.offset + section.nbytes
        if end > len(payload):
            raise CheckpointError(section.name, f"truncated: needs {end} payload bytes, file has {len(payload)}")
        np_dtype = np.dtype(_NUMPY_DTYPES[section.dtype])
        if section.nbytes != int(np.prod(section.shape)) * np_dtype.itemsize:
            raise CheckpointError(section.name, f"{section.nbytes} bytes do not hold shape {section.shape}")
        array = np.frombuffer(payload, dtype=np_dtype, count=section.nbytes // np_dtype.itemsize, offset=section.offset)
        tensors[section.name] = torch.from_numpy(array.reshape(section.shape).astype(np_dtype.newbyteorder("=")))
    return tensors, header


def optimizer_sections(optimizer: torch.optim.Optimizer, keep: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """Adam moments and step counts by ``adam.<group>.<index>.<key>``. Rows of splat
    groups are restricted to `keep` when given."""
    sections: Dict[str, torch.Tensor] = {}
    for group in optimizer.param_groups:
        for index, param in enumerate(group["params"]):
            state = optimizer.state.get(param)
            if not state:
                continue
            prefix: str = f"adam.{group['name']}.{index}"
            for key in ("exp_avg", "exp_avg_sq"):
                value = state[key]
                if keep is not None and group["name"] in SPLAT_PARAMS:
                    value = value[keep]
                sections[f"{prefix}.{key}"] = value
            sections[f"{prefix}.step"] = torch.as_tensor(state["step"]).reshape(())
    return sections


def restore_optimizer(optimizer: torch.optim.Optimizer, sections: Dict[str, torch.Tensor]) -> None:
    for group in optimizer.param_groups:
        for index, param in enumerate(group["params"]):
            prefix: str = f"adam.{group['name']}.{index}"
            if f"{prefix}.exp_avg" not in sections:
                continue
            exp_avg = sections[f"{prefix}.exp_avg"]
            if exp_avg.shape != param.shape:
                raise CheckpointError(
                    f"{prefix}.exp_avg", f"shape {tuple(exp_avg.shape)} does not match parameter {tuple(param.shape)}"
                )
            optimizer.state[param] = {
                "step": sections[f"{prefix}.step"].clone(),
                "exp_avg": exp_avg.clone(),
                "exp_avg_sq": sections[f"{prefix}.exp_avg_sq"].clone(),
            }


def save_checkpoint(
    path: str | Path,
    avatar: AvatarModel,
    meta: CheckpointMeta,
    optimizer: Optional[torch.optim.Optimizer] = None,
    extra: Optional[Dict[str, torch.Tensor]] = None,
) -> Path:
    """Writes a checkpoint directory; deactivated splats are compacted away."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    keep = avatar.splats.active_ids()
    save_splats_ply(avatar.splats, path / SPLATS_FILE)

    tensors: Dict[str, torch.Tensor] = {"displacement": avatar.displacement}
    for name, value in avatar.predictor.state_dict().items():
        tensors[f"predictor.{name}"] = value
    if avatar.displacement_predictor is not None:
        for name, value in avatar.displacement_predictor.state_dict().items():
            tensors[f"displacement_predictor.{name}"] = value
    for name, value in (extra or {}).items():
        tensors[f"extra.{name}"] = value
    if optimizer is not None:
        tensors.update(optimizer_sections(optimizer, keep))
    write_weights(tensors, path / WEIGHTS_FILE, {"layer_order": avatar.predictor.layer_order()})

    meta = meta.model_copy(update={"n_splats": int(keep.numel())})
    (path / META_FILE).write_text(meta.model_dump_json(indent=2), encoding="utf-8")
    save_rig(avatar.template, path / RIG_FILE)
    logger.info(f"Saved checkpoint at iteration {meta.iteration} with {meta.n_splats} splats to {path}")
    return path


def _load_meta(path: Path) -> CheckpointMeta:
    meta_path: Path = path / META_FILE
    if not meta_path.is_file():
        raise CheckpointError(META_FILE, "file is missing")
    try:
        return CheckpointMeta.model_validate_json(meta_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CheckpointError(META_FILE, f"invalid contents: {e.errors()[0]['msg']}") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Reads a checkpoint directory written by `save_checkpoint`.

    Raises:
        CheckpointError: Naming the first missing file or inconsistent section.
    """
    path = Path(path)
    if not path.is_dir():
        raise CheckpointError(str(path), "checkpoint directory does not exist")
    meta = _load_meta(path)
    dtype: torch.dtype = _TORCH_DTYPES[meta.dtype]
    try:
        config = StudioConfig.model_validate(meta.config)
    except ValidationError as e:
        raise CheckpointError(META_FILE, f"invalid config snapshot: {e.errors()[0]['msg']}") from e

    rig_path: Path = path / RIG_FILE
    if not rig_path.is_file():
        raise CheckpointError(RIG_FILE, "file is missing")
    try:
        template = template_from_record(RigRecord.model_validate_json(rig_path.read_text(encoding="utf-8")), dtype=dtype)
    except (ValidationError, ValueError) as e:
        raise CheckpointError(RIG_FILE, f"invalid rig: {e}") from e

    splats = load_splats_ply(path / SPLATS_FILE, l_max=config.splats.l_max, dtype=dtype)
    if splats.capacity != meta.n_splats:
        raise CheckpointError(SPLATS_FILE, f"holds {splats.capacity} splats, meta.json declares {meta.n_splats}")
    if splats.capacity and int(splats.face_id.max()) >= len(template.faces):
        raise CheckpointError(SPLATS_FILE, "face_id out of range for the stored rig")

    tensors, _ = read_weights(path / WEIGHTS_FILE)
    avatar = AvatarModel(template, splats, config.splats, config.body)
    if "displacement" not in tensors:
        raise CheckpointError("displacement", "section is missing")
    if tensors["displacement"].shape != avatar.displacement.shape:
        raise CheckpointError("displacement", f"shape {tuple(tensors['displacement'].shape)} does not match the rig")
    with torch.no_grad():
        avatar.displacement.copy_(tensors["displacement"])
    modules = {"predictor": avatar.predictor, "displacement_predictor": avatar.displacement_predictor}
    for prefix, module in modules.items():
        if module is None:
            continue
        state: Dict[str, torch.Tensor] = {}
        for name in module.state_dict():
            key: str = f"{prefix}.{name}"
            if key not in tensors:
                raise CheckpointError(key, "section is missing")
            state[name] = tensors[key]
        try:
            module.load_state_dict(state)
        except RuntimeError as e:
            raise CheckpointError(prefix, str(e)) from e

    extra = {k[len("extra.") :]: v for k, v in tensors.items() if k.startswith("extra.")}
    optimizer_state = {k: v for k, v in tensors.items() if k.startswith("adam.")}
    logger.info(f"Loaded checkpoint {path}: iteration {meta.iteration}, {splats.capacity} splats")
    return Checkpoint(avatar=avatar, meta=meta, config=config, optimizer_state=optimizer_state, extra=extra)

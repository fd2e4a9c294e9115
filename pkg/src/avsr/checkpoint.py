"""Versioned single-file checkpoints: JSON config header + tensor container."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .container import pack_container, unpack_container
from .errors import IncompatibleCheckpoint
from .model import AvsrModel, ModelConfig
from .video_frontend import VideoFrontendConfig

MAGIC = b"AVCK"
VERSION = 1


def config_to_dict(config: ModelConfig) -> Dict:
    out = asdict(config)
    if config.video is not None:
        out["video"] = asdict(config.video)
        out["video"]["block_channels"] = list(config.video.block_channels)
    return out


def config_from_dict(data: Dict) -> ModelConfig:
    video = data.get("video")
    video_cfg = None
    if video is not None:
        video_cfg = VideoFrontendConfig(
            block_channels=tuple(video["block_channels"]),
            gn_groups=video["gn_groups"],
            in_channels=video["in_channels"],
            input_size=video["input_size"],
        )
    fields = {k: v for k, v in data.items() if k != "video"}
    return ModelConfig(video=video_cfg, **fields)


def save_checkpoint(path: str, model: AvsrModel, extra: Optional[Dict] = None) -> None:
    header = {
        "format_version": VERSION,
        "model_config": config_to_dict(model.config),
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = {
        name: param.detach().cpu().numpy()
        for name, param in model.state_dict().items()
    }
    tensor_blob = pack_container(tensors)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(header_bytes)))
            f.write(header_bytes)
            f.write(tensor_blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str) -> Tuple[ModelConfig, Dict[str, np.ndarray], Dict]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise IncompatibleCheckpoint(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise IncompatibleCheckpoint(f"{path}: unsupported version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        tensor_blob = f.read()
    tensors = unpack_container(tensor_blob, path)
    config = config_from_dict(header["model_config"])
    return config, tensors, header.get("extra", {})


def load_model(path: str, seed: int = 0) -> Tuple[AvsrModel, Dict]:
    config, tensors, extra = read_checkpoint(path)
    model = AvsrModel(config, seed=seed)
    state = model.state_dict()
    if set(state) != set(tensors):
        missing = set(state) ^ set(tensors)
        raise IncompatibleCheckpoint(f"{path}: parameter set mismatch ({missing})")
    restored = {}
    for name, arr in tensors.items():
        if tuple(state[name].shape) != arr.shape:
            raise IncompatibleCheckpoint(
                f"{path}: shape mismatch for {name}: "
                f"{tuple(state[name].shape)} vs {arr.shape}"
            )
        restored[name] = torch.as_tensor(arr, dtype=state[name].dtype)
    model.load_state_dict(restored)
    return model, extra

"""Pydantic request/response models for the HTTP service.

Request models accept the same field names as the config files; `lambda`
is accepted as an alias for the decode-loss weight. Unset fields fall back
to the core defaults, so the service and the CLI resolve configuration
identically.
"""
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class EncoderSpec(StrictModel):
    input_channels: Optional[int] = None
    input_size: Optional[int] = None
    stages: Optional[list] = None
    feature_dim: Optional[int] = None


class GenDataRequest(StrictModel):
    out_dir: str
    n_base_classes: Optional[int] = None
    n_novel_classes: Optional[int] = None
    examples_per_class: Optional[int] = None
    image_size: Optional[int] = None
    seed: Optional[int] = None
    test_fraction: Optional[float] = None
    noise_std: Optional[float] = None


class GenDataResponse(StrictModel):
    dataset_dir: str
    n_images: int
    n_classes: int
    n_base_classes: int
    n_novel_classes: int
    class_names: list


class PretrainRequest(StrictModel):
    data_dir: str
    out_dir: str
    resume: Optional[str] = None
    encoder: Optional[EncoderSpec] = None
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    base_lr: Optional[float] = None
    decay_rate: Optional[float] = None
    decay_every: Optional[int] = None
    momentum: Optional[float] = None
    weight_decay: Optional[float] = None
    decode_weight: Optional[float] = Field(None, alias="lambda")
    transform_magnitude: Optional[float] = None
    mode: Optional[Literal["flat", "baseline", "naive_augment"]] = None
    crop_pad: Optional[int] = None
    flip_prob: Optional[float] = None
    eval_each_epoch: Optional[bool] = None
    seed: Optional[int] = None


class FinetuneRequest(StrictModel):
    checkpoint: str
    data_dir: str
    out_dir: str
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr: Optional[float] = None
    momentum: Optional[float] = None
    weight_decay: Optional[float] = None
    setting: Optional[Literal["all_classes", "novel_classes", "transfer"]] = None
    freeze_encoder: Optional[bool] = None
    init: Optional[Literal["imprint", "random"]] = None
    k_shot: Optional[int] = None
    seed: Optional[int] = None


class EvaluateRequest(StrictModel):
    checkpoint: str
    data_dir: str
    out_dir: Optional[str] = None
    protocol: Literal["episodic", "setting"] = "episodic"
    setting: Optional[Literal["all_classes", "novel_classes", "transfer"]] = None
    n_way: Optional[int] = None
    k_shot: Optional[int] = None
    n_query: Optional[int] = None
    n_runs: Optional[int] = None
    seed: Optional[int] = None
    finetune_epochs: Optional[int] = None
    finetune_lr: Optional[float] = None
    finetune_batch_size: Optional[int] = None
    freeze_encoder: Optional[bool] = None


class JobInfo(StrictModel):
    job_id: str
    kind: str
    status: Literal["queued", "running", "succeeded", "failed"]
    error: Optional[str] = None
    error_type: Optional[str] = None
    exit_code: Optional[int] = None
    result: Optional[dict] = None
    n_metrics: int = 0


class MetricsPage(StrictModel):
    job_id: str
    status: str
    offset: int
    next_offset: int
    lines: list


class HealthResponse(StrictModel):
    status: str
    version: str

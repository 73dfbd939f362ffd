"""Shared implementations of the four commands.

Both frontends go through here: the CLI calls these directly, the HTTP
service runs them inside jobs. Every command resolves its configuration
(defaults, then config file, then explicit overrides), emits the resolved
config before doing any work, and streams metric lines through `emit`.
"""
from __future__ import annotations

import dataclasses
import json
import os

from .data import (
    SyntheticShapesConfig,
    generate_synthetic,
    load_image_folder,
    save_image_folder,
)
from .errors import CheckpointError, ConfigError
from .evaluation import EpisodeProtocol, evaluate_setting, run_episodes
from .model import EncoderConfig, FlatModel, load_checkpoint, save_checkpoint
from .optim import SgdState
from .rng import restore_rng
from .training import (
    FinetuneConfig,
    PretrainConfig,
    TrainState,
    finetune,
    init_train_state,
    pretrain,
)

# accepted spellings for config keys that cannot be Python identifiers
_ALIASES = {"lambda": "decode_weight"}


def resolve_config(cls, *layers):
    """Build a config dataclass from layered dicts (later layers win)."""
    fields = {f.name for f in dataclasses.fields(cls)}
    merged = {}
    for layer in layers:
        if not layer:
            continue
        for key, value in layer.items():
            name = _ALIASES.get(key, key)
            if name not in fields:
                raise ConfigError(f"unknown {cls.__name__} field '{key}'")
            if value is not None:
                merged[name] = value
    return cls(**merged)


def config_dict(cfg):
    out = dataclasses.asdict(cfg)
    for alias, name in _ALIASES.items():
        if name in out:
            out[alias] = out.pop(name)
    return out


def _emit_config(emit, command, resolved, extra=None):
    payload = {"event": "config", "command": command, "config": resolved}
    if extra:
        payload.update(extra)
    emit(payload)


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_dataset(data_dir, image_size):
    spec_path = os.path.join(data_dir, "split_spec.json")
    return load_image_folder(data_dir, spec_path, image_size=image_size)


def run_gen_data(payload, emit=lambda e: None):
    """Write a synthetic dataset as PNG folders plus its split spec."""
    payload = dict(payload or {})
    out_dir = payload.pop("out_dir", None)
    if not out_dir:
        raise ConfigError("gen-data needs out_dir")
    cfg = resolve_config(SyntheticShapesConfig, payload)
    resolved = dataclasses.asdict(cfg)
    resolved["out_dir"] = out_dir
    _emit_config(emit, "gen-data", resolved)

    dataset = generate_synthetic(cfg)
    n = save_image_folder(dataset, out_dir)
    summary = {
        "n_images": n,
        "n_classes": dataset.n_base + dataset.n_novel,
        "n_base_classes": dataset.n_base,
        "n_novel_classes": dataset.n_novel,
        "class_names": dataset.class_names,
    }
    # written file stays path-free so equal seeds give equal directory content
    _write_json(os.path.join(out_dir, "gen_summary.json"), summary)
    return {"dataset_dir": out_dir, **summary}


def _encoder_from(payload):
    enc = payload.pop("encoder", None)
    return resolve_config(EncoderConfig, enc) if enc else EncoderConfig()


def _velocity_arrays(state):
    return {f"velocity/{name}": v for name, v in state.sgd.velocity.items()}


def _trainer_state(state, cfg):
    return {
        "stage": "pretrain",
        "rng_state": state.rng.bit_generator.state,
        "optimizer": {
            "momentum": cfg.momentum,
            "weight_decay": cfg.weight_decay,
        },
        "step": state.step,
    }


def run_pretrain(payload, emit=lambda e: None):
    payload = dict(payload or {})
    data_dir = payload.pop("data_dir", None)
    out_dir = payload.pop("out_dir", None)
    resume = payload.pop("resume", None)
    if not data_dir or not out_dir:
        raise ConfigError("pretrain needs data_dir and out_dir")
    encoder = _encoder_from(payload)
    cfg = resolve_config(PretrainConfig, payload)

    dataset = _load_dataset(data_dir, encoder.input_size)

    state = None
    if resume:
        ckpt = load_checkpoint(resume)
        model = ckpt.model
        encoder = model.encoder
        if ckpt.state.get("stage") != "pretrain":
            raise CheckpointError(f"{resume} is not a pretraining checkpoint")
        sgd = SgdState(
            learning_rate=cfg.base_lr,
            momentum=ckpt.state["optimizer"]["momentum"],
            weight_decay=ckpt.state["optimizer"]["weight_decay"],
            velocity={
                name[len("velocity/"):]: arr
                for name, arr in ckpt.extra_arrays.items()
                if name.startswith("velocity/")
            },
        )
        state = TrainState(
            rng=restore_rng(ckpt.state["rng_state"]),
            sgd=sgd,
            epoch=ckpt.epoch,
            step=ckpt.state.get("step", 0),
        )
    else:
        model = FlatModel(encoder, n_base=dataset.n_base, seed=cfg.seed)
        state = init_train_state(model, cfg)

    resolved = config_dict(cfg)
    resolved.update({
        "data_dir": data_dir, "out_dir": out_dir, "resume": resume,
        "encoder": dataclasses.asdict(encoder),
    })
    _emit_config(emit, "pretrain", resolved)

    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), resolved)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    best_path = os.path.join(out_dir, "checkpoint_best")
    final_path = os.path.join(out_dir, "checkpoint_final")
    best = {"score": None}

    log = open(metrics_path, "a" if resume else "w")
    try:
        def on_epoch(entry):
            emit(entry)
            log.write(json.dumps(entry, sort_keys=True) + "\n")
            log.flush()
            score = entry.get("eval_acc", -entry["total_loss"])
            if best["score"] is None or score > best["score"]:
                best["score"] = score
                save_checkpoint(model, best_path, epoch=entry["epoch"] + 1,
                                extra_arrays=_velocity_arrays(state),
                                extra_state=_trainer_state(state, cfg))

        history, state = pretrain(model, dataset, cfg, state=state, on_epoch=on_epoch)
    finally:
        log.close()

    save_checkpoint(model, final_path, epoch=state.epoch,
                    extra_arrays=_velocity_arrays(state),
                    extra_state=_trainer_state(state, cfg))
    summary = {
        "checkpoint_final": final_path,
        "checkpoint_best": best_path if best["score"] is not None else None,
        "epochs_run": len(history),
        "epoch": state.epoch,
        "final_metrics": history[-1] if history else None,
    }
    return summary


def run_finetune(payload, emit=lambda e: None):
    payload = dict(payload or {})
    checkpoint = payload.pop("checkpoint", None)
    data_dir = payload.pop("data_dir", None)
    out_dir = payload.pop("out_dir", None)
    if not checkpoint or not data_dir or not out_dir:
        raise ConfigError("finetune needs checkpoint, data_dir and out_dir")
    cfg = resolve_config(FinetuneConfig, payload)

    ckpt = load_checkpoint(checkpoint)
    model = ckpt.model
    dataset = _load_dataset(data_dir, model.encoder.input_size)

    resolved = config_dict(cfg)
    resolved.update({"checkpoint": checkpoint, "data_dir": data_dir,
                     "out_dir": out_dir})
    _emit_config(emit, "finetune", resolved)

    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), resolved)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as log:
        def on_epoch(entry):
            emit(entry)
            log.write(json.dumps(entry, sort_keys=True) + "\n")
            log.flush()

        history = finetune(model, dataset, cfg, on_epoch=on_epoch)

    out_path = os.path.join(out_dir, "checkpoint_final")
    save_checkpoint(model, out_path, epoch=ckpt.epoch,
                    extra_state={"stage": "finetune", "finetune": config_dict(cfg)})
    return {
        "checkpoint_final": out_path,
        "epochs_run": len(history),
        "n_novel": model.n_novel,
        "final_metrics": history[-1] if history else None,
    }


def run_evaluate(payload, emit=lambda e: None):
    payload = dict(payload or {})
    checkpoint = payload.pop("checkpoint", None)
    data_dir = payload.pop("data_dir", None)
    out_dir = payload.pop("out_dir", None)
    protocol_kind = payload.pop("protocol", "episodic")
    setting = payload.pop("setting", None)
    k_shot_report = payload.pop("k_shot", None)
    if not checkpoint or not data_dir:
        raise ConfigError("evaluate needs checkpoint and data_dir")

    ckpt = load_checkpoint(checkpoint)
    model = ckpt.model
    dataset = _load_dataset(data_dir, model.encoder.input_size)

    if protocol_kind == "episodic":
        extra = {"k_shot": k_shot_report} if k_shot_report is not None else {}
        proto = resolve_config(EpisodeProtocol, payload, extra)
        resolved = dataclasses.asdict(proto)
        resolved.update({"protocol": "episodic", "checkpoint": checkpoint,
                         "data_dir": data_dir, "out_dir": out_dir})
        _emit_config(emit, "evaluate", resolved)
        report = run_episodes(model, dataset, proto)
    elif protocol_kind == "setting":
        if setting is None:
            raise ConfigError("protocol=setting requires a setting "
                              "(all_classes, novel_classes, or transfer)")
        if payload:
            raise ConfigError(f"unknown evaluate field(s) {sorted(payload)}")
        if k_shot_report is None:
            k_shot_report = (ckpt.state.get("finetune") or {}).get("k_shot")
        resolved = {"protocol": "setting", "setting": setting,
                    "checkpoint": checkpoint, "data_dir": data_dir,
                    "out_dir": out_dir, "k_shot": k_shot_report}
        _emit_config(emit, "evaluate", resolved)
        report = evaluate_setting(model, dataset, setting, k_shot=k_shot_report)
    else:
        raise ConfigError(
            f"protocol must be 'episodic' or 'setting', got '{protocol_kind}'"
        )

    payload_out = report.to_json()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_json(os.path.join(out_dir, "report.json"), payload_out)
    return payload_out

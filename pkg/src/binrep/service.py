"""HTTP service wrapping the training stack and the packed engine.

All artifacts (checkpoints, CSVs, packed models) are written to the
server-side output directory named in each request; responses return the
paths plus summary numbers.
"""

import csv
import os
import time

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, Field

from . import engine
from .activation import LINEAR, STEP
from .analysis import (detect_splits, firing_matrix, write_firing_matrix_csv,
                       write_split_report)
from .data import DataFormatError, load_cifar10, load_mnist, resolve_data_dir
from .metrics import (NotBinaryError, binarization_report, write_history_csv,
                      write_report_csv)
from .network import PRESETS, build_preset
from .schedule import (CheckpointError, GrowthConfig, SolverConfig,
                       TrainingDiverged, apply_checkpoint, finetune_head,
                       init_network, load_checkpoint, save_checkpoint,
                       ternarize_and_finetune, train_two_phase)

app = FastAPI(title="binrep", version="0.1.0")

DEFAULT_PRESET = {"mnist": "lenet-small", "cifar10": "cifar-small"}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: str = "mnist"
    data_dir: str | None = None
    preset: str | None = None
    width_mult: float = 1.0
    binarize_layers: str = "last"
    phase1_lambda: float = 1e-4
    phase2_lambda: float = 1e-2
    epochs1: int = 10
    epochs2: int = 10
    growth_cap: float = 0.5
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    seed: int = 0
    # Shift init biases so pre-activations are zero-mean on a training
    # batch; wide all-bounded stacks start saturated without it.
    center_init: bool = False
    finetune_head_epochs: int = 0
    ternarize: bool = False
    ternarize_epochs: int = 8
    out: str = "runs/default"

    def resolved_preset(self):
        return self.preset or DEFAULT_PRESET.get(self.dataset, "lenet-small")


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    dataset: str = "mnist"
    data_dir: str | None = None
    preset: str | None = None
    width_mult: float = 1.0
    binarize_layers: str = "last"
    mode: str = "linear"
    out: str | None = None

    def resolved_preset(self):
        return self.preset or DEFAULT_PRESET.get(self.dataset, "lenet-small")


class AnalyzeRequest(EvalRequest):
    layer: str | None = None  # default: last rectifier
    tau_pos: float = 0.95
    tau_neg: float = 0.05
    min_binary: float = 0.999
    out: str = "runs/analysis"


class ExportRequest(EvalRequest):
    out: str = "runs/export"


class InferRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: str
    dataset: str = "mnist"
    data_dir: str | None = None
    out: str = "runs/infer"


def _load_dataset(name, data_dir):
    directory = resolve_data_dir(data_dir)
    if name == "mnist":
        return load_mnist(directory)
    if name == "cifar10":
        return load_cifar10(directory)
    raise DataFormatError(f"unknown dataset {name!r}")


def _bad_request(exc):
    raise HTTPException(status_code=400, detail=str(exc))


def _build_net(cfg):
    return build_preset(cfg.resolved_preset(), cfg.width_mult, cfg.binarize_layers)


def _restore(cfg):
    net = _build_net(cfg)
    try:
        apply_checkpoint(net, load_checkpoint(cfg.checkpoint))
    except FileNotFoundError:
        raise HTTPException(status_code=404, detail=f"{cfg.checkpoint}: not found")
    except CheckpointError as e:
        _bad_request(e)
    return net


@app.get("/health")
def health():
    return {"status": "ok", "version": app.version}


@app.post("/train")
def train(cfg: RunConfig):
    try:
        train_ds, test_ds = _load_dataset(cfg.dataset, cfg.data_dir)
    except (DataFormatError, FileNotFoundError) as e:
        _bad_request(e)
    os.makedirs(cfg.out, exist_ok=True)
    calibration = train_ds.images[:512] if cfg.center_init else None
    net = init_network(_build_net(cfg), seed=cfg.seed, calibration=calibration)
    growth = GrowthConfig(cfg.phase1_lambda, cfg.phase2_lambda,
                          cfg.epochs1, cfg.epochs2, cfg.growth_cap)
    solver = SolverConfig(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size)
    try:
        state = train_two_phase(net, train_ds, test_ds, growth, solver,
                                seed=cfg.seed)
    except TrainingDiverged as e:
        _bad_request(f"training diverged: {e}")

    stages = {}
    net.set_mode(LINEAR)
    stages["linear_acc"] = net.accuracy(test_ds.images, test_ds.labels)
    net.set_mode(STEP)
    stages["step_acc"] = net.accuracy(test_ds.images, test_ds.labels)
    net.set_mode(LINEAR)

    if cfg.finetune_head_epochs > 0:
        finetune_head(net, train_ds, solver, cfg.finetune_head_epochs,
                      seed=cfg.seed)
        stages["finetuned_step_acc"] = net.accuracy(test_ds.images, test_ds.labels)
        net.set_mode(LINEAR)
    if cfg.ternarize:
        ternarize_and_finetune(net, train_ds, solver, cfg.ternarize_epochs,
                               seed=cfg.seed)
        net.set_mode(STEP)
        stages["ternary_step_acc"] = net.accuracy(test_ds.images, test_ds.labels)
        net.set_mode(LINEAR)

    checkpoint = os.path.join(cfg.out, "model.brck")
    history_csv = os.path.join(cfg.out, "history.csv")
    report_csv = os.path.join(cfg.out, "binarization.csv")
    save_checkpoint(checkpoint, net)
    write_history_csv(history_csv, state.history)
    write_report_csv(report_csv, state.history)
    return {
        "checkpoint": checkpoint,
        "history_csv": history_csv,
        "report_csv": report_csv,
        "stages": stages,
        "history": [{k: v for k, v in rec.items() if k != "report"}
                    for rec in state.history],
    }


@app.post("/eval")
def evaluate(req: EvalRequest):
    if req.mode not in (LINEAR, STEP):
        raise HTTPException(status_code=422, detail=f"unknown mode {req.mode!r}")
    try:
        _, test_ds = _load_dataset(req.dataset, req.data_dir)
    except (DataFormatError, FileNotFoundError) as e:
        _bad_request(e)
    net = _restore(req)
    net.set_mode(req.mode)
    acc = net.accuracy(test_ds.images, test_ds.labels)
    result = {"mode": req.mode, "top1": acc, "n": len(test_ds)}
    if req.out:
        os.makedirs(req.out, exist_ok=True)
        path = os.path.join(req.out, f"accuracy_{req.mode}.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mode", "top1", "n"])
            w.writerow([req.mode, acc, len(test_ds)])
        result["accuracy_csv"] = path
    return result


@app.post("/analyze")
def analyze(req: AnalyzeRequest):
    try:
        _, test_ds = _load_dataset(req.dataset, req.data_dir)
    except (DataFormatError, FileNotFoundError) as e:
        _bad_request(e)
    net = _restore(req)
    rects = net.rectifiers()
    if not rects:
        _bad_request("network has no bounded rectifiers to analyze")
    layer = req.layer or rects[-1].name
    net.set_mode(LINEAR)
    report = binarization_report(net, test_ds.images,
                                 thresholds=(req.min_binary,))
    if layer not in report.layers:
        _bad_request(f"no bounded rectifier named {layer!r}")
    fracs = report.layers[layer].unit_fractions
    if np.any(fracs < req.min_binary):
        raise HTTPException(status_code=400, detail={
            "error": f"layer {layer} is not fully binary",
            "min_unit_fraction": float(fracs.min()),
            "units_below": int(np.sum(fracs < req.min_binary)),
        })
    fm = firing_matrix(net, test_ds.images, test_ds.labels, layer)
    splits = detect_splits(fm, req.tau_pos, req.tau_neg)
    os.makedirs(req.out, exist_ok=True)
    fm_csv = os.path.join(req.out, "firing_matrix.csv")
    split_txt = os.path.join(req.out, "unit_splits.txt")
    write_firing_matrix_csv(fm_csv, fm)
    write_split_report(split_txt, splits)
    separating = sum(1 for s in splits if s.positive and s.negative)
    return {"layer": layer, "firing_matrix_csv": fm_csv,
            "split_report": split_txt, "units": len(splits),
            "separating_units": separating}


@app.post("/export")
def export(req: ExportRequest):
    net = _restore(req)
    net.set_mode(STEP)
    try:
        packed = engine.export_packed(net)
    except engine.ExportError as e:
        _bad_request(e)
    os.makedirs(req.out, exist_ok=True)
    path = os.path.join(req.out, "model.bnet")
    engine.save_packed(path, packed)
    return {
        "model": path,
        "packed_bytes": engine.packed_storage_bytes(packed),
        "float32_bytes": engine.float32_storage_bytes(packed),
    }


@app.post("/infer")
def infer(req: InferRequest):
    try:
        model = engine.load_packed(req.model)
    except FileNotFoundError:
        raise HTTPException(status_code=404, detail=f"{req.model}: not found")
    except engine.ModelFormatError as e:
        _bad_request(e)
    try:
        _, test_ds = _load_dataset(req.dataset, req.data_dir)
    except (DataFormatError, FileNotFoundError) as e:
        _bad_request(e)
    timings = []
    t0 = time.perf_counter()
    preds = []
    for i in range(0, len(test_ds), 512):
        batch_t = []
        scores = engine.packed_forward(model, test_ds.images[i:i + 512],
                                       timings=batch_t)
        preds.append(scores.argmax(axis=1))
        if not timings:
            timings = batch_t
    elapsed = time.perf_counter() - t0
    preds = np.concatenate(preds)
    acc = float(np.mean(preds == test_ds.labels))
    os.makedirs(req.out, exist_ok=True)
    timing_csv = os.path.join(req.out, "layer_timings.csv")
    with open(timing_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer_index", "kind", "seconds"])
        for idx, (kind, secs) in enumerate(timings):
            w.writerow([idx, kind, secs])
    pred_csv = os.path.join(req.out, "predictions.csv")
    with open(pred_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "prediction", "label"])
        for i, (p, l) in enumerate(zip(preds, test_ds.labels)):
            w.writerow([i, int(p), int(l)])
    return {"top1": acc, "n": len(test_ds), "seconds": elapsed,
            "timing_csv": timing_csv, "predictions_csv": pred_csv}

"""
Module for the end-to-end training loop (forward, double loss, backward, Adam) and for
writing edge-map predictions of a trained checkpoint.
"""
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from .architecture import ParamStore, build, forward, predict_maps
from .benchmark import evaluate
from .checkpoint import load_checkpoint, load_training_state, save_checkpoint
from .data import Batch, DatasetManifest, batches, load_sample
from .numerics import GradTape, backward
from .objectives import dloss_terms
from .optimizer import OptimState, adam_step, init_state, lr_at_epoch
from .utils.config import LossConfig, RunConfig
from .utils.errors import ContractError, DataError, NonFiniteError
from .utils.image_io import Converter, list_images, write_edge_png
from .utils.utils import LOSS_LOG_COLUMNS, TEEDUP_SCALE, set_deterministic

MAP_SUFFIXES = ("_y1", "_y2", "_y3", "_dfuse")
LOSS_LOG = "loss_log.csv"
VAL_LOG = "val_log.csv"


@dataclass
class TrainResult:
    params: ParamStore
    state: OptimState
    checkpoints: list = field(default_factory=list)
    loss_log: str = ""
    history: pd.DataFrame = field(default=None, repr=False)


def train_step(params: ParamStore, state: OptimState, batch: Batch, config: LossConfig = None) -> tuple:
    """One optimisation step on a batch

    Returns:
        tuple: (ParamStore, OptimState, dict with dloss and its four terms)

    Raises:
        NonFiniteError: carrying the ids of the batch
    """
    tape = GradTape()
    try:
        maps = forward(params, batch.images, tape=tape)
        loss, terms = dloss_terms(maps, batch.gts, config, tape=tape)
        grads = backward(tape, loss)
        params, state = adam_step(params, grads, state)
    except NonFiniteError as e:
        raise NonFiniteError(f"Non-finite value at step {state.step + 1} on batch {batch.ids}: {e}",
                             where=e.where, batch_ids=batch.ids) from e
    return params, state, {"dloss": loss.item(), **terms}


def checkpoint_path(config: RunConfig, epoch: int) -> str:
    """File of the checkpoint written after 0-based epoch"""
    return os.path.join(config.checkpoint_dir, f"epoch_{epoch + 1}.ckpt")

def _manifest(config: RunConfig) -> DatasetManifest:
    if config.train_manifest:
        manifest = DatasetManifest.from_csv(config.train_manifest, split=config.split)
    else:
        manifest = DatasetManifest.from_directory(config.train_root, split=config.split)
    if len(manifest) == 0:
        raise DataError(f"Training manifest is empty ({config.train_manifest or config.train_root})")
    return manifest

def _resume(config: RunConfig, resume: str) -> tuple:
    """params, optimizer state, first epoch and kept log rows of a resumed run"""
    params, state, meta = load_training_state(resume)
    if state is None:
        raise DataError(f"Checkpoint {resume} holds no optimizer state and cannot be resumed")
    if params.config != config.model:
        raise ContractError(f"Checkpoint {resume} was trained with {params.config}, run uses {config.model}")
    start = int(meta.get("epoch", -1)) + 1
    log_fn = os.path.join(config.output_dir, LOSS_LOG)
    rows = []
    if os.path.isfile(log_fn):
        log = pd.read_csv(log_fn)
        rows = log[log["epoch"] < start].to_dict("records")
    print(f"Resuming from {resume} at epoch {start + 1}, step {state.step}")
    return params, state, start, rows


def validate_epoch(params: ParamStore, config: RunConfig, epoch: int, quiet: bool = True) -> dict:
    """Score the validation split and append the summary to val_log.csv. Never touches the parameters."""
    manifest = DatasetManifest.from_directory(config.val_root, split=config.val_split)
    if len(manifest) == 0:
        raise DataError(f"Validation split {config.val_root}/{config.val_split} is empty")
    scale = TEEDUP_SCALE if config.teedup else None
    preds, gts, ids = [], [], []
    for img_fn, gt_fn in manifest.pairs:
        sample = load_sample(img_fn, gt_fn, source=config.val_split)
        preds.append(predict_maps(params, sample.image, input_scale=scale).dfuse.data)
        gts.append(sample.gt.data)
        ids.append(sample.id)
    summary = {"epoch": epoch, **evaluate(preds, gts, ids=ids, quiet=quiet).summary()}
    print("Validation: " + ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))

    fn = os.path.join(config.output_dir, VAL_LOG)
    log = pd.read_csv(fn) if os.path.isfile(fn) else pd.DataFrame(columns=list(summary))
    log = pd.concat([log[log["epoch"] < epoch], pd.DataFrame([summary])], ignore_index=True)
    log.to_csv(fn, index=False)
    return summary


def train(config: RunConfig, resume: str = None, deterministic: bool = False, max_steps: int = None,
          quiet: bool = False) -> TrainResult:
    """Train the edge detector.

    Epochs are 0-based internally and run with lr_at_epoch. After every epoch a checkpoint with
    optimizer state and {epoch, step, config} metadata is written and the loss log
    (iter,epoch,lr,dloss,wce1,wce2,wce3,trcg) is rewritten.

    Args:
        config (RunConfig): run configuration
        resume (str, optional): training checkpoint to continue from. Defaults to None.
        deterministic (bool, optional): single worker thread. Defaults to False.
        max_steps (int, optional): stop after this many optimiser steps in total. Defaults to None.
        quiet (bool, optional): disable progress bars. Defaults to False.

    Returns:
        TrainResult: final parameters, optimizer state, checkpoint paths and the loss history
    """
    config.validate()
    if deterministic:
        set_deterministic(True)
    manifest = _manifest(config)
    os.makedirs(config.checkpoint_dir, exist_ok=True)
    os.makedirs(config.output_dir, exist_ok=True)
    log_fn = os.path.join(config.output_dir, LOSS_LOG)

    if resume:
        params, state, start, rows = _resume(config, resume)
    else:
        params = build(config.model, seed=config.seed)
        state = init_state(params, config.adam)
        start, rows = 0, []
    print(f"Training on {len(manifest)} images, {params.count()} parameters")

    checkpoints = []
    n_batches = math.ceil(len(manifest) / config.batch_size)
    for epoch in range(start, config.epochs):
        lr = lr_at_epoch(epoch, config.adam)
        state = state.with_lr(lr)
        print(f"Epoch {epoch + 1}/{config.epochs} lr={lr:g}")
        t0 = time.perf_counter()
        epoch_losses = []
        for batch in tqdm(batches(manifest, config.batch_size, seed=config.seed, epoch=epoch, config=config.augment),
                          total=n_batches, disable=quiet):
            try:
                params, state, terms = train_step(params, state, batch, config.loss)
            except NonFiniteError as e:
                print(f"Aborting: non-finite loss on batch {e.batch_ids}")
                raise
            rows.append({"iter": state.step, "epoch": epoch, "lr": lr, **terms})
            epoch_losses.append(terms["dloss"])
            if max_steps is not None and state.step >= max_steps:
                break

        pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS).to_csv(log_fn, index=False)
        fn = checkpoint_path(config, epoch)
        save_checkpoint(params, fn, state, meta={"epoch": epoch, "step": state.step, "config": config.to_dict()})
        checkpoints.append(fn)
        print(f"Epoch {epoch + 1} done in {time.perf_counter() - t0:.1f}s, mean dloss {np.mean(epoch_losses):.4f}, saved {fn}")

        if config.val_root:
            validate_epoch(params, config, epoch, quiet=quiet)
        if max_steps is not None and state.step >= max_steps:
            break

    return TrainResult(params=params, state=state, checkpoints=checkpoints, loss_log=log_fn,
                       history=pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS))


def predict(checkpoint, images, out_dir: str, teedup: bool = False, all_maps: bool = False, quiet: bool = False) -> list:
    """Write 8-bit edge maps (round(255 * y)) of a trained model.

    Args:
        checkpoint (str or ParamStore): checkpoint file or loaded parameters
        images (str or list): folder of images or list of image paths
        out_dir (str): output folder; <stem>.png holds the fused map
        teedup (bool, optional): run at 1.5x input scale. Defaults to False.
        all_maps (bool, optional): write <stem>_y1/_y2/_y3/_dfuse.png and the mean map <stem>_avg.png instead. Defaults to False.
        quiet (bool, optional): Defaults to False.

    Returns:
        list: written files

    Raises:
        DataError: no image could be processed
    """
    params = checkpoint if isinstance(checkpoint, ParamStore) else load_checkpoint(checkpoint)
    paths = list_images(images) if isinstance(images, (str, Path)) else list(images)
    if not paths:
        raise DataError(f"No images to predict in {images}")
    scale = TEEDUP_SCALE if teedup else None

    written, elapsed, done = [], 0.0, 0
    for path in tqdm(paths, disable=quiet):
        try:
            image = Converter(path).image_to_array()
            t0 = time.perf_counter()
            maps = predict_maps(params, image, input_scale=scale)
            elapsed += time.perf_counter() - t0
        except (DataError, ContractError) as e:
            tqdm.write(f"Skipping {path}: {e}")
            continue
        stem = os.path.join(out_dir, Path(path).stem)
        if all_maps:
            for suffix, m in zip(MAP_SUFFIXES, maps.maps):
                write_edge_png(m.data, f"{stem}{suffix}.png")
                written.append(f"{stem}{suffix}.png")
            write_edge_png(maps.average(), f"{stem}_avg.png")
            written.append(f"{stem}_avg.png")
        else:
            write_edge_png(maps.dfuse.data, f"{stem}.png")
            written.append(f"{stem}.png")
        done += 1

    if not done:
        raise DataError(f"None of the {len(paths)} images could be processed")
    print(f"Predicted {done} images in {elapsed:.2f}s ({done / max(elapsed, 1e-9):.1f} FPS)")
    return written

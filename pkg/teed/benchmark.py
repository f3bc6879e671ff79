"""
Module for scoring edge maps: non-maximum suppression, tolerance-matched precision/recall,
ODS/OIS F-measures over a threshold sweep and the pixel metrics MSE/MAE/PSNR of raw maps.
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree
from tqdm import tqdm

from .numerics import Tensor
from .utils.errors import ContractError, DataError
from .utils.image_io import Converter, list_images
from .utils.utils import GT_EDGE_LEVEL, MATCH_TOLERANCE, N_THRESHOLDS, NMS_PLATEAU, NMS_SIGMA, NMS_TIE_TOL, PSNR_CAP, PSNR_MIN_MSE, num_threads, thresholds


def _plane(edge) -> np.ndarray:
    arr = edge.data if isinstance(edge, Tensor) else np.asarray(edge)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ContractError(f"Expected an H x W or 1 x H x W map, got shape {arr.shape}")
    return arr.astype(np.float64)


###################
### SUPPRESSION ###
###################

def _normals(smooth: np.ndarray) -> tuple:
    """Unit normals (ux, uy) across ridges of a smoothed map: the Hessian eigenvector whose eigenvalue
    has the largest magnitude. Flat points get (1, 0)."""
    gy, gx = np.gradient(smooth)
    gyy, gyx = np.gradient(gy)
    gxy, gxx = np.gradient(gx)
    hxy = 0.5 * (gxy + gyx)
    half_trace = 0.5 * (gxx + gyy)
    spread = np.hypot(0.5 * (gxx - gyy), hxy)
    # angle of the eigenvector of the larger eigenvalue, turned a quarter when the smaller one dominates
    angle = 0.5 * np.arctan2(2.0 * hxy, gxx - gyy)
    angle = np.where(half_trace < 0, angle + 0.5 * np.pi, angle)
    flat = np.abs(half_trace) + spread < 1e-12
    return np.where(flat, 1.0, np.cos(angle)), np.where(flat, 0.0, np.sin(angle))

def nms(edge, sigma: float = NMS_SIGMA, tie_tol: float = NMS_TIE_TOL, plateau: float = NMS_PLATEAU):
    """Thin an edge map across its local ridge direction.

    The normal at each pixel comes from the second derivatives of the Gaussian-smoothed map (edge orientation
    orthogonal to it). A nonzero pixel survives if neither bilinearly interpolated neighbor at p +/- normal is
    larger. On constant plateaus, where the sample on one side is at least plateau times the centre value, the
    pixel also loses to its grid neighbor along the normal's dominant axis when that neighbor has the same raw
    value and a larger smoothed value. This keeps one centre pixel per cross-section of flat ridges.

    Args:
        edge (Tensor or np.ndarray): 1 x H x W (or H x W) map in [0, 1]
        sigma (float, optional): Defaults to 1.5.
        tie_tol (float, optional): Defaults to 1e-6.
        plateau (float, optional): Defaults to 0.75.

    Returns:
        same type and shape as edge: kept pixels with their value, the rest 0
    """
    e = _plane(edge)
    out = np.zeros_like(e)
    rows, cols = np.nonzero(e > 0)
    if rows.size:
        smooth = ndimage.gaussian_filter(e, sigma, mode="nearest")
        ux, uy = _normals(smooth)
        ux, uy = ux[rows, cols], uy[rows, cols]
        along_rows = np.abs(uy) >= np.abs(ux)
        h, w = e.shape

        raw_c, smooth_c = e[rows, cols], smooth[rows, cols]
        keep = np.ones(rows.size, dtype=bool)
        for sign in (1.0, -1.0):
            coords = np.vstack([rows + sign * uy, cols + sign * ux])
            raw_n = ndimage.map_coordinates(e, coords, order=1, mode="nearest")
            step_r = np.where(along_rows, sign * np.sign(uy), 0.0).astype(int)
            step_c = np.where(along_rows, 0.0, sign * np.sign(ux)).astype(int)
            nr, nc = np.clip(rows + step_r, 0, h - 1), np.clip(cols + step_c, 0, w - 1)
            flat = (raw_n >= plateau * raw_c) & (np.abs(e[nr, nc] - raw_c) <= tie_tol)
            keep &= ~(raw_n > raw_c + tie_tol) & ~(flat & (smooth[nr, nc] > smooth_c + tie_tol))
        out[rows[keep], cols[keep]] = raw_c[keep]

    if isinstance(edge, Tensor):
        return Tensor(out.reshape(edge.shape), dtype=edge.dtype)
    return out.reshape(np.shape(edge))


################
### MATCHING ###
################

class MatchResult(NamedTuple):
    precision: float
    recall: float
    f: float
    tp: int
    fp: int
    fn: int


def match_points(pred_pts: np.ndarray, gt_pts: np.ndarray, radius: float) -> int:
    """Greedy nearest-first one-to-one matching of two point sets (K x 2 arrays).
    Candidate pairs within radius are taken in ascending (distance, pred index, gt index) order.

    Returns:
        int: number of matched pairs
    """
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return 0
    near = cKDTree(pred_pts).query_ball_tree(cKDTree(gt_pts), radius)
    pairs = []
    for i, js in enumerate(near):
        for j in js:
            d = float(np.hypot(*(pred_pts[i] - gt_pts[j])))
            if d <= radius:
                pairs.append((d, i, j))
    pairs.sort()
    used_p, used_g = set(), set()
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    return len(used_p)

def _f_measure(tp, n_pred, n_gt) -> tuple:
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f

def f_at_threshold(pred_nms, gt_binary, t: float, tol: float = MATCH_TOLERANCE) -> MatchResult:
    """Precision, recall and F of a thinned map binarised at pred >= t against a binary gt

    Args:
        pred_nms (Tensor or np.ndarray): thinned map
        gt_binary (Tensor or np.ndarray): gt with values in {0, 1}
        t (float): threshold
        tol (float, optional): matching radius as a fraction of the image diagonal. Defaults to 0.0075.

    Returns:
        MatchResult: with F = 0 when precision + recall = 0
    """
    if tol <= 0:
        raise ContractError(f"tol must be > 0, got {tol}")
    p, g = _plane(pred_nms), _plane(gt_binary)
    if p.shape != g.shape:
        raise ContractError(f"Prediction shape {p.shape} differs from gt shape {g.shape}")
    if not np.isin(g, (0.0, 1.0)).all():
        raise ContractError("gt must be binary (values 0 and 1)")
    pred_pts, gt_pts = np.argwhere(p >= t), np.argwhere(g > 0)
    tp = match_points(pred_pts, gt_pts, tol * float(np.hypot(*p.shape)))
    return MatchResult(*_f_measure(tp, len(pred_pts), len(gt_pts)), tp, len(pred_pts) - tp, len(gt_pts) - tp)

def threshold_counts(pred_nms, gt_binary, levels: np.ndarray, tol: float = MATCH_TOLERANCE) -> np.ndarray:
    """T x 3 array of (TP, FP, FN) per threshold level"""
    return np.array([f_at_threshold(pred_nms, gt_binary, t, tol)[3:] for t in levels], dtype=np.int64)


###################
### AGGREGATION ###
###################

class OdsOis(NamedTuple):
    ods: float
    ods_threshold: float
    ois: float
    image_thresholds: list
    image_f: list
    curve: pd.DataFrame # threshold, precision, recall, f over the whole dataset


def ods_ois(preds: list, gts: list, levels: np.ndarray = None, tol: float = MATCH_TOLERANCE, quiet: bool = True) -> OdsOis:
    """ODS from TP/FP/FN summed over the dataset per threshold, OIS as the mean of per-image best F.
    Ties go to the lowest threshold.

    Args:
        preds (list): thinned maps
        gts (list): binary gts, aligned with preds
        levels (np.ndarray, optional): thresholds. Defaults to 0.01..0.99.
        tol (float, optional): Defaults to 0.0075.
        quiet (bool, optional): disable the progress bar. Defaults to True.

    Returns:
        OdsOis: dataset and per-image optima plus the dataset curve
    """
    if not preds:
        raise DataError("Cannot score an empty dataset")
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions but {len(gts)} gts")
    levels = thresholds(N_THRESHOLDS) if levels is None else np.asarray(levels)

    with ThreadPoolExecutor(max_workers=num_threads()) as pool:
        jobs = pool.map(lambda pg: threshold_counts(pg[0], pg[1], levels, tol), zip(preds, gts))
        counts = list(tqdm(jobs, total=len(preds), disable=quiet))

    image_f, image_t = [], []
    for c in counts:
        f = np.array([_f_measure(tp, tp + fp, tp + fn)[2] for tp, fp, fn in c])
        best = int(np.argmax(f))
        image_f.append(float(f[best]))
        image_t.append(float(levels[best]))

    total = np.sum(counts, axis=0)
    rows = [(float(t), *_f_measure(tp, tp + fp, tp + fn)) for t, (tp, fp, fn) in zip(levels, total)]
    curve = pd.DataFrame(rows, columns=["threshold", "precision", "recall", "f"])
    best = int(curve["f"].values.argmax())
    return OdsOis(ods=float(curve["f"].iloc[best]), ods_threshold=float(curve["threshold"].iloc[best]),
                  ois=float(np.mean(image_f)), image_thresholds=image_t, image_f=image_f, curve=curve)


def pixel_metrics(pred_raw, gt) -> tuple:
    """(MSE, MAE, PSNR in dB with peak 1.0) of a raw map against its gt; PSNR is capped at 99 dB"""
    p, g = _plane(pred_raw), _plane(gt)
    if p.shape != g.shape:
        raise ContractError(f"Prediction shape {p.shape} differs from gt shape {g.shape}")
    diff = p - g
    mse = float(np.mean(diff ** 2))
    mae = float(np.mean(np.abs(diff)))
    psnr = PSNR_CAP if mse < PSNR_MIN_MSE else min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))
    return mse, mae, psnr


###############
### REPORTS ###
###############

@dataclass
class EvalReport:
    ods: float
    ods_threshold: float
    ois: float
    mse: float
    mae: float
    psnr: float
    rows: pd.DataFrame = field(repr=False) # id, best_threshold, best_f, mse, mae, psnr
    curve: pd.DataFrame = field(repr=False)

    @property
    def n_images(self) -> int:
        return len(self.rows)

    @property
    def image_thresholds(self) -> list:
        return self.rows["best_threshold"].tolist()

    def summary(self) -> dict:
        return {"ods": self.ods, "ods_threshold": self.ods_threshold, "ois": self.ois, "mse": self.mse,
                "mae": self.mae, "psnr": self.psnr, "n_images": self.n_images}

    def write(self, fn: str) -> tuple:
        """Write the summary JSON to fn, the per-image rows next to it as <stem>.csv and the dataset curve as <stem>_curve.csv

        Returns:
            tuple: (json path, rows csv path, curve csv path)
        """
        stem = os.path.splitext(fn)[0]
        os.makedirs(os.path.dirname(os.path.abspath(fn)), exist_ok=True)
        with open(fn, "w") as f:
            json.dump(self.summary(), f, indent=2)
        self.rows.to_csv(f"{stem}.csv", index=False)
        self.curve.to_csv(f"{stem}_curve.csv", index=False)
        return fn, f"{stem}.csv", f"{stem}_curve.csv"


def evaluate(preds: list, gts: list, ids: list = None, tol: float = MATCH_TOLERANCE, levels: np.ndarray = None,
             quiet: bool = True) -> EvalReport:
    """Score raw edge maps against gts: ODS/OIS after NMS, MSE/MAE/PSNR on the raw maps.
    gts are binarised at 0.5 for matching. Dataset pixel metrics are means over images.

    Args:
        preds (list): raw maps in [0, 1]
        gts (list): gt maps in [0, 1]
        ids (list, optional): image ids. Defaults to 0..n-1.
        tol (float, optional): Defaults to 0.0075.
        levels (np.ndarray, optional): thresholds. Defaults to 0.01..0.99.
        quiet (bool, optional): Defaults to True.

    Returns:
        EvalReport: report
    """
    if tol <= 0:
        raise ContractError(f"tol must be > 0, got {tol}")
    if not preds:
        raise DataError("Cannot score an empty dataset")
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions but {len(gts)} gts")
    ids = list(range(len(preds))) if ids is None else list(ids)

    metrics = [pixel_metrics(p, g) for p, g in zip(preds, gts)]
    with ThreadPoolExecutor(max_workers=num_threads()) as pool:
        thinned = list(pool.map(nms, [_plane(p) for p in preds]))
    binary = [(_plane(g) >= GT_EDGE_LEVEL).astype(np.float64) for g in gts]
    scores = ods_ois(thinned, binary, levels=levels, tol=tol, quiet=quiet)

    rows = pd.DataFrame({"id": ids, "best_threshold": scores.image_thresholds, "best_f": scores.image_f,
                         "mse": [m[0] for m in metrics], "mae": [m[1] for m in metrics], "psnr": [m[2] for m in metrics]})
    return EvalReport(ods=scores.ods, ods_threshold=scores.ods_threshold, ois=scores.ois,
                      mse=float(rows["mse"].mean()), mae=float(rows["mae"].mean()), psnr=float(rows["psnr"].mean()),
                      rows=rows, curve=scores.curve)


def pair_directories(pred_dir: str, gt_dir: str) -> list:
    """(id, pred path, gt path) triples matched by file stem

    Raises:
        DataError: empty folders or stems present on one side only
    """
    preds = {Path(p).stem: p for p in list_images(pred_dir)}
    gts = {Path(p).stem: p for p in list_images(gt_dir)}
    if not preds or not gts:
        raise DataError(f"No images in {pred_dir if not preds else gt_dir}")
    no_gt, no_pred = sorted(set(preds) - set(gts)), sorted(set(gts) - set(preds))
    if no_gt or no_pred:
        raise DataError(f"Prediction/gt names differ: without gt {no_gt}, without prediction {no_pred}")
    return [(k, preds[k], gts[k]) for k in sorted(preds)]

def evaluate_directories(pred_dir: str, gt_dir: str, tol: float = MATCH_TOLERANCE, quiet: bool = False) -> EvalReport:
    """evaluate() over the PNG/JPEG edge maps of two folders paired by name"""
    pairs = pair_directories(pred_dir, gt_dir)
    print(f"Scoring {len(pairs)} edge maps")
    preds, gts = [], []
    for image_id, p, g in tqdm(pairs, disable=quiet):
        pred, gt = Converter(p).edge_map_to_array(), Converter(g).edge_map_to_array()
        if pred.shape != gt.shape:
            raise DataError(f"'{image_id}': prediction {pred.shape[1:]} and gt {gt.shape[1:]} differ in size")
        preds.append(pred)
        gts.append(gt)
    return evaluate(preds, gts, ids=[k for k, _, _ in pairs], tol=tol, quiet=quiet)

"""Summary metrics over a run directory written by :func:`caveloco.pipeline.write_run`."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import EmptyRunDirectory
from .skeleton import ActionLabel

SETTLE_S = 0.25


def _rows(path: Path) -> np.ndarray:
    """Whitespace table without comments, always 2-D (0 rows when empty)."""
    lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    return np.array(lines, dtype=float) if lines else np.zeros((0, 0))


def id_switches(ids: np.ndarray) -> dict:
    """Track-id changes per (camera, person) and in total.

    ``ids`` rows are ``frame camera track_id gt_person``. A switch is any
    change of the track id that carries a given person in a given camera.
    """
    out, total = {}, 0
    if ids.size:
        for cam in np.unique(ids[:, 1]).astype(int):
            for gt in np.unique(ids[ids[:, 1] == cam, 3]).astype(int):
                if gt < 0:
                    continue
                sel = ids[(ids[:, 1] == cam) & (ids[:, 3] == gt)]
                sel = sel[np.argsort(sel[:, 0], kind="stable")]
                n = int(np.count_nonzero(np.diff(sel[:, 2])))
                out[f"camera{cam}/person{gt}"] = n
                total += n
    return {"total": total, "per_camera_person": out}


def timeline_accuracy(tl: np.ndarray, settle_s: float = SETTLE_S) -> dict:
    """Agreement of emitted and scripted labels, overall and away from transitions.

    ``settled`` skips frames within ``settle_s`` after a scripted label change,
    where the smoothing window still holds the old action by design.
    """
    if not tl.size:
        return {"frames": 0, "accuracy": None, "settled_accuracy": None}
    tl = tl[tl[:, 5] >= 0]
    t, emitted, truth = tl[:, 1], tl[:, 4].astype(int), tl[:, 5].astype(int)
    change_t = t[1:][np.diff(truth) != 0]
    near = np.zeros(len(t), dtype=bool)
    for ct in change_t:
        near |= (t >= ct - 1e-9) & (t <= ct + settle_s)
    hit = emitted == truth
    return {
        "frames": int(len(t)),
        "accuracy": float(hit.mean()) if len(t) else None,
        "settled_accuracy": float(hit[~near].mean()) if np.any(~near) else None,
        "changes": [[float(a), ActionLabel(int(b)).name] for a, b in _changes(t, emitted)],
    }


def _changes(t, labels):
    prev = int(ActionLabel.StandStill)
    for ti, lab in zip(t, labels):
        if lab != prev:
            yield ti, lab
            prev = lab


def build_report(run_dir) -> dict:
    d = Path(run_dir)
    if not d.is_dir() or not any((d / f).is_file() for f in ("latency.json", "timeline.txt", "ids.txt")):
        raise EmptyRunDirectory(f"no run logs in {run_dir}")
    rep: dict = {"run_dir": str(d)}
    if (d / "latency.json").is_file():
        lat = json.loads((d / "latency.json").read_text())
        rep["frames"] = lat.get("frames")
        rep["processed"] = lat.get("processed")
        rep["throughput_fps"] = lat.get("throughput_fps")
        rep["end_to_end_ms"] = lat.get("end_to_end")
        rep["stage_mean_ms"] = {k: v.get("mean_ms") for k, v in lat.get("stages", {}).items()}
        rep["dropped"] = lat.get("dropped")
    if (d / "ids.txt").is_file():
        rep["id_switches"] = id_switches(_rows(d / "ids.txt"))
    if (d / "skeleton_err.txt").is_file():
        err = np.loadtxt(d / "skeleton_err.txt", ndmin=2)
        finite = err[np.isfinite(err)]
        rep["triangulation_rmse_m"] = float(np.sqrt(np.mean(finite**2))) if finite.size else None
    if (d / "timeline.txt").is_file():
        rep["timeline"] = timeline_accuracy(_rows(d / "timeline.txt"))
    if (d / "rate.txt").is_file():
        rate = _rows(d / "rate.txt")
        rep["final_target_fps"] = int(rate[-1, 1]) if rate.size else None
    if (d / "calibration.json").is_file():
        cams = json.loads((d / "calibration.json").read_text()).get("cameras", [])
        rep["calibration_rmse_px"] = {str(c["id"]): c.get("rmse_px") for c in cams}
    return rep


def format_report(rep: dict) -> str:
    lines = [f"run: {rep['run_dir']}"]
    if "throughput_fps" in rep:
        e2e = rep.get("end_to_end_ms") or {}
        lines.append(f"frames processed: {rep['processed']}/{rep['frames']} at {rep['throughput_fps']:.1f} fps")
        if e2e.get("count"):
            lines.append(f"end-to-end latency: mean {e2e['mean_ms']:.2f} ms, p95 {e2e['p95_ms']:.2f} ms")
        stages = ", ".join(f"{k} {v:.2f}" for k, v in rep["stage_mean_ms"].items() if v is not None)
        lines.append(f"stage means (ms): {stages}")
    if "id_switches" in rep:
        lines.append(f"identity switches: {rep['id_switches']['total']}")
    if rep.get("triangulation_rmse_m") is not None:
        lines.append(f"triangulation RMSE: {rep['triangulation_rmse_m'] * 1000:.2f} mm")
    tl = rep.get("timeline")
    if tl and tl["frames"]:
        lines.append(f"label accuracy: {tl['accuracy']:.4f} overall, {tl['settled_accuracy']:.4f} settled")
        lines.append("label changes: " + (", ".join(f"{t:.3f}s {n}" for t, n in tl["changes"]) or "none"))
    if rep.get("calibration_rmse_px"):
        lines.append("calibration RMSE (px): " + ", ".join(
            f"cam{k} {v:.3g}" for k, v in rep["calibration_rmse_px"].items() if v is not None))
    return "\n".join(lines) + "\n"

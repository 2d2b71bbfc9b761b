"""Threaded live pipeline: observe/track -> reconstruct -> recognise -> transmit.

Stages are joined by small bounded queues. In real-time mode a full queue
drops its oldest item so the newest frame always gets through; in lossless
mode producers wait instead, which makes a run a deterministic function of
the scene and seeds (used for evaluation and the report).
"""
from __future__ import annotations

import json
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .reconstruction import Reconstructor
from .recognition import ClassifierModel, Recognizer
from .scene import SceneScript, observe, render_script
from .skeleton import ActionLabel, SkeletonFrame3D
from .tracking import Tracker, write_track_log
from .transport import ReceiverStub, RateController, UdpReceiver, UdpSender, decode, encode, map_action

QUEUE_CAPACITY = 4
STAGES = ("track", "reconstruct", "recognize", "transmit")
_STOP = object()


class DropOldestQueue:
    """Bounded FIFO. ``put`` on a full queue evicts the oldest item, or waits when ``lossless``."""

    def __init__(self, capacity: int = QUEUE_CAPACITY, lossless: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.lossless = lossless
        self._items: deque = deque()
        self._cv = threading.Condition()
        self.dropped = 0

    def put(self, item) -> None:
        with self._cv:
            if self.lossless:
                while len(self._items) >= self.capacity:
                    self._cv.wait()
            elif len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cv.notify_all()

    def close(self) -> None:
        """Enqueue the end-of-stream marker; it is never evicted."""
        with self._cv:
            self._items.append(_STOP)
            self._cv.notify_all()

    def get(self, timeout: float | None = None):
        with self._cv:
            if not self._cv.wait_for(lambda: self._items, timeout):
                raise TimeoutError
            item = self._items.popleft()
            self._cv.notify_all()
            return item

    def __len__(self) -> int:
        with self._cv:
            return len(self._items)


class LatencyGauge:
    """Running latency statistics for one stage (milliseconds)."""

    def __init__(self, alpha: float = 0.1):
        self.alpha = alpha
        self.samples: list[float] = []
        self.ema: float | None = None
        self._lock = threading.Lock()

    def record(self, ms: float) -> None:
        with self._lock:
            self.samples.append(ms)
            self.ema = ms if self.ema is None else self.ema + self.alpha * (ms - self.ema)

    def summary(self) -> dict:
        with self._lock:
            a = np.asarray(self.samples)
        if a.size == 0:
            return {"count": 0}
        return {"count": int(a.size), "mean_ms": float(a.mean()), "p95_ms": float(np.percentile(a, 95)),
                "max_ms": float(a.max()), "ema_ms": float(self.ema)}


@dataclass
class FrameItem:
    index: int
    timestamp: float
    t_start: float
    stage_ms: dict = field(default_factory=dict)
    detections: dict = field(default_factory=dict)
    tracks: dict = field(default_factory=dict)
    people: list = field(default_factory=list)
    decisions: list = field(default_factory=list)


@dataclass
class RunResult:
    n_frames: int
    processed: list[int]
    wall_s: float
    commands: list
    decisions: list  # (frame, timestamp, person_id, gt_person, label, probabilities)
    trajectory: list
    stages: dict
    end_to_end: dict
    dropped: dict
    rate_log: list
    track_log: list
    id_log: list  # (frame, camera, track_id, gt_person)
    fused_log: list  # (frame, person_id, gt_person)
    skeleton_err: list  # per fused frame, per-joint error (m) vs ground truth, NaN where invalid
    truth: list  # per frame ground-truth label of each scripted person: {pid: label}

    @property
    def throughput_fps(self) -> float:
        return len(self.processed) / self.wall_s if self.wall_s > 0 else float("inf")


class Pipeline:
    """Run a scripted scene through the full chain once.

    ``realtime`` paces frames at the rate controller's target (dropping
    source frames when it falls below the scene rate) and uses drop-oldest
    queues. Otherwise frames are pushed as fast as the stages accept them.
    ``inject_ms`` adds an artificial delay per stage name.
    """

    def __init__(self, cameras, model: ClassifierModel, *, realtime: bool = False, speed_mps: float = 1.0,
                 udp_port: int | None = None, inject_ms: dict | None = None, rate: RateController | None = None,
                 capacity: int = QUEUE_CAPACITY):
        self.cameras = list(cameras)
        self.model = model
        self.realtime = realtime
        self.speed = speed_mps
        self.udp_port = udp_port
        self.inject_ms = dict(inject_ms or {})
        self.rate = rate or RateController()
        self.capacity = capacity
        self.gauges = {s: LatencyGauge() for s in STAGES}
        self.e2e = LatencyGauge()

    # -- stage bodies -------------------------------------------------------

    def _stall(self, name):
        ms = self.inject_ms.get(name, 0.0)
        if ms > 0:
            time.sleep(ms / 1000.0)

    def run(self, script: SceneScript) -> RunResult:
        times, people = render_script(script)
        n = len(times)
        trackers = {c.id: Tracker(camera_id=c.id) for c in self.cameras}
        recon = Reconstructor(self.cameras)
        recognizers: dict[int, Recognizer] = {}
        stub = ReceiverStub()
        commands, decisions, id_log, fused_log, skel_err, processed = [], [], [], [], [], []
        lossless = not self.realtime
        queues = [DropOldestQueue(self.capacity, lossless) for _ in range(len(STAGES))]

        def frames_at(k):
            out = []
            for pid, J in people.items():
                if np.all(np.isnan(J[k])):
                    continue
                out.append(SkeletonFrame3D(pid, float(times[k]), J[k]))
            return out

        def track(item: FrameItem):
            dets = observe(frames_at(item.index), self.cameras, script.noise, script.seed, item.index)
            for cam in self.cameras:
                mine = [d for d in dets if d.camera_id == cam.id]
                item.detections[cam.id] = mine
                snaps = trackers[cam.id].step(mine, item.index)
                item.tracks[cam.id] = snaps
                for s in snaps:
                    gt = mine[s.detection_index].gt_person_id if s.detection_index is not None else -1
                    id_log.append((item.index, cam.id, s.track_id, gt))

        def reconstruct(item: FrameItem):
            item.people = recon.process(item.tracks, item.timestamp)
            for fp in item.people:
                votes = Counter()
                for cid, tid in fp.group.members.items():
                    snap = next(s for s in item.tracks[cid] if s.track_id == tid)
                    if snap.detection_index is not None:
                        votes[item.detections[cid][snap.detection_index].gt_person_id] += 1
                gt = votes.most_common(1)[0][0] if votes else -1
                fp.gt_person = gt
                fused_log.append((item.index, fp.person_id, gt))
                if gt in people:
                    err = np.linalg.norm(fp.frame.joints - people[gt][item.index], axis=1)
                    skel_err.append(np.where(fp.frame.valid, err, np.nan))

        def recognize(item: FrameItem):
            for fp in item.people:
                rec = recognizers.get(fp.person_id)
                if rec is None:
                    rec = recognizers[fp.person_id] = Recognizer(self.model, fp.person_id)
                d = rec.update(fp.window, item.timestamp)
                item.decisions.append(d)
                decisions.append((item.index, item.timestamp, fp.person_id, fp.gt_person, int(d.label),
                                  d.probabilities.tolist()))

        sender = receiver = None
        if self.udp_port is not None:
            receiver = UdpReceiver(port=self.udp_port, speed=self.speed)
            sender = UdpSender(port=receiver.port)

        def transmit(item: FrameItem):
            for d in item.decisions:
                cmd = map_action(d, self.speed)
                if sender is not None:
                    sender.send(cmd)
                    got = receiver.receive(1.0)
                else:
                    got = decode(encode(cmd), self.speed)
                commands.append(got)
                stub.apply(got)
            if sender is not None and not item.decisions:
                sender.maybe_heartbeat(int(round(item.timestamp * 1e6)))

        bodies = dict(zip(STAGES, (track, reconstruct, recognize, transmit)))

        def worker(k: int, name: str):
            inbox = queues[k]
            outbox = queues[k + 1] if k + 1 < len(queues) else None
            while True:
                item = inbox.get()
                if item is _STOP:
                    if outbox is not None:
                        outbox.close()
                    return
                t0 = time.perf_counter()
                bodies[name](item)
                self._stall(name)
                ms = (time.perf_counter() - t0) * 1000.0
                item.stage_ms[name] = ms
                self.gauges[name].record(ms)
                if outbox is not None:
                    outbox.put(item)
                else:
                    self.e2e.record((time.perf_counter() - item.t_start) * 1000.0)
                    processed.append(item.index)
                    self.rate.update(item.stage_ms)

        threads = [threading.Thread(target=worker, args=(k, s), name=f"stage-{s}", daemon=True)
                   for k, s in enumerate(STAGES)]
        for t in threads:
            t.start()
        t_begin = time.perf_counter()
        next_due = 0.0
        try:
            for k in range(n):
                if self.realtime:
                    if times[k] + 1e-9 < next_due:
                        continue
                    next_due = max(next_due + 1.0 / self.rate.target, float(times[k]))
                    wait = t_begin + times[k] - time.perf_counter()
                    if wait > 0:
                        time.sleep(wait)
                queues[0].put(FrameItem(k, float(times[k]), time.perf_counter()))
            queues[0].close()
            for t in threads:
                t.join()
        finally:
            if sender is not None:
                sender.close()
                receiver.close()
        wall = time.perf_counter() - t_begin

        truth = []
        for k in range(n):
            row = {}
            for seg in script.segments:
                if seg.start - 1e-9 <= times[k] < seg.end - 1e-9:
                    row[seg.person_id] = int(seg.label)
            truth.append(row)
        track_log = sorted(r for tr in trackers.values() for r in tr.log)
        return RunResult(
            n_frames=n, processed=processed, wall_s=wall, commands=commands, decisions=decisions,
            trajectory=list(stub.trajectory), stages={s: g.summary() for s, g in self.gauges.items()},
            end_to_end=self.e2e.summary(), dropped={s: q.dropped for s, q in zip(STAGES, queues)},
            rate_log=list(self.rate.log), track_log=track_log, id_log=id_log, fused_log=fused_log,
            skeleton_err=skel_err, truth=truth,
        )


# ---------------------------------------------------------------------------
# timeline helpers


def emitted_timeline(result: RunResult, gt_person: int = 0) -> list[tuple[float, int]]:
    """(timestamp, emitted label) per processed frame for the track fused from ``gt_person``."""
    return [(t, lab) for _, t, _, gt, lab, _ in result.decisions if gt == gt_person]


def label_changes(timeline) -> list[tuple[float, int]]:
    out, prev = [], int(ActionLabel.StandStill)
    for t, lab in timeline:
        if lab != prev:
            out.append((t, lab))
            prev = lab
    return out


def script_boundaries(script: SceneScript, person_id: int = 0) -> list[tuple[float, int]]:
    segs = sorted((s for s in script.segments if s.person_id == person_id), key=lambda s: s.start)
    out, prev = [], int(ActionLabel.StandStill)
    for s in segs:
        if int(s.label) != prev:
            out.append((s.start, int(s.label)))
            prev = int(s.label)
    return out


def timeline_matches(timeline, boundaries, tolerance_s: float = 0.25) -> bool:
    """True when the emitted labels change exactly at the scripted boundaries, each within ``tolerance_s`` after."""
    changes = label_changes(timeline)
    if len(changes) != len(boundaries):
        return False
    return all(lab == blab and bt - 1e-9 <= t <= bt + tolerance_s + 1e-9
               for (t, lab), (bt, blab) in zip(changes, boundaries))


# ---------------------------------------------------------------------------
# run directory


def write_run(result: RunResult, outdir, script: SceneScript | None = None, extra: dict | None = None) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    stats = {
        "frames": result.n_frames,
        "processed": len(result.processed),
        "wall_s": result.wall_s,
        "throughput_fps": result.throughput_fps,
        "stages": result.stages,
        "end_to_end": result.end_to_end,
        "dropped": result.dropped,
    }
    (out / "latency.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    lines = ["# timestamp_us person action confidence yaw_deg vx vy"]
    for c in result.commands:
        vx, vy = c.velocity
        lines.append(f"{c.timestamp_us} {c.person_id} {c.label.name} {c.confidence:.4f} "
                     f"{np.degrees(c.yaw):.2f} {vx:.4f} {vy:.4f}")
    (out / "commands.txt").write_text("\n".join(lines) + "\n")
    lines = ["# timestamp_us x_m y_m action"]
    lines += [f"{t} {x:.6f} {y:.6f} {ActionLabel(a).name}" for t, x, y, a in result.trajectory]
    (out / "trajectory.txt").write_text("\n".join(lines) + "\n")
    lines = ["# frame timestamp person gt_person emitted truth"]
    for f, t, pid, gt, lab, _ in result.decisions:
        truth = result.truth[f].get(gt, -1)
        lines.append(f"{f} {t:.6f} {pid} {gt} {lab} {truth}")
    (out / "timeline.txt").write_text("\n".join(lines) + "\n")
    lines = ["# frame camera track_id gt_person"] + [f"{f} {c} {t} {g}" for f, c, t, g in result.id_log]
    (out / "ids.txt").write_text("\n".join(lines) + "\n")
    lines = ["# frame person_id gt_person"] + [f"{f} {p} {g}" for f, p, g in result.fused_log]
    (out / "fused.txt").write_text("\n".join(lines) + "\n")
    lines = ["# total_ms target_fps"] + [f"{ms:.3f} {fps}" for ms, fps in result.rate_log]
    (out / "rate.txt").write_text("\n".join(lines) + "\n")
    err = np.array(result.skeleton_err) if result.skeleton_err else np.zeros((0, 17))
    np.savetxt(out / "skeleton_err.txt", err, fmt="%.6e", header="per-joint 3D error (m) per fused frame; nan = invalid")
    write_track_log(result.track_log, out / "tracks.txt")
    if script is not None or extra:
        meta = dict(extra or {})
        if script is not None:
            meta["scenario"] = [[s.start, s.duration, s.person_id, ActionLabel(s.label).name] for s in script.segments]
        (out / "run.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out

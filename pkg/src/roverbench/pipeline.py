"""Stage orchestration over a manifest-tracked run directory.

Run directory layout::

    world/  world.obj world.stl world.sdf rocks.json
    path/   ground_truth.tum actor.sdf path.json
    scans/  frames/*.ply ground_truth.tum dataset.json
    odom/   odometry.tum odometry.json
    eval/   ate.csv drift.csv *.dat report.json
    manifest.json

Each stage records a key (hash of its config sections and input files) and
the sha256 of every output. A stage whose key and outputs are unchanged is
skipped unless forced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import evaluate, write_report
from .odometry import OdometryParams, run_odometry
from .pathgen import PathSpec, export_actor_sdf, perturb_orientations, sample_trajectory, triangle_path
from .scene import Scene
from .sensorsim import LIDAR_PRESETS, STEREO_PRESETS, LidarModel, load_dataset, simulate_sequence
from .terrain import RockPopulation, build_world, export_world, load_heightfield, read_obj
from .trajectory import read_tum, write_tum
from .validation import RoverBenchError, StageError

log = logging.getLogger(__name__)

STAGES = ("terrain", "path", "simulate", "odom", "eval")
STAGE_GROUPS = {"gen": ("terrain", "path")}
MANIFEST = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def expand_stages(stages) -> list[str]:
    out = []
    for s in stages:
        names = STAGE_GROUPS.get(s, (s,))
        for n in names:
            if n not in STAGES:
                raise ValueError(f"unknown stage {s!r}")
            if n not in out:
                out.append(n)
    return sorted(out, key=STAGES.index)


def sensor_model(cfg):
    """Sensor model from a preset with per-field overrides."""
    s = dict(cfg.sensor)
    kind = s.pop("type", "lidar")
    preset = s.pop("preset", "default")
    presets = LIDAR_PRESETS if kind == "lidar" else STEREO_PRESETS
    if preset not in presets:
        raise KeyError(f"unknown {kind} preset {preset!r}; choose from {sorted(presets)}")
    base = presets[preset]
    names = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(s) - names)
    if unknown:
        raise ValueError(f"{kind} sensors have no parameter {unknown[0]!r}")
    if isinstance(base, LidarModel):
        s.setdefault("seed", cfg.seed)
    return dataclasses.replace(base, **s)


def heightfield(cfg):
    t = cfg.terrain
    return load_heightfield(cfg.raster_path, t["cell_size"], t["z_scale"])


def path_spec(cfg, hf) -> PathSpec:
    p = dict(cfg.path)
    p.pop("orientation_noise_deg")
    waypoints = p.pop("waypoints")
    if waypoints is None:
        x0, x1, y0, y1 = hf.extent
        p.pop("closed")
        return triangle_path(60.0, center=((x0 + x1) / 2, (y0 + y1) / 2), **p)
    return PathSpec(waypoints=waypoints, **p)


def odometry_params(cfg) -> OdometryParams:
    return OdometryParams(**cfg.odometry)


@dataclass
class PipelineResult:
    run_dir: Path
    manifest: dict
    ran: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    report: object = None


class Pipeline:
    """Runs stages of one configuration inside ``run_dir``."""

    def __init__(self, cfg, run_dir=None, force: bool = False):
        self.cfg = cfg
        self.run_dir = Path(run_dir if run_dir is not None else cfg.resolve(cfg["out_dir"]))
        self.force = force
        self.manifest = self._load_manifest()

    # -- manifest ---------------------------------------------------------
    def _load_manifest(self) -> dict:
        path = self.run_dir / MANIFEST
        stages = {}
        if path.is_file():
            try:
                stages = json.loads(path.read_text()).get("stages", {})
            except json.JSONDecodeError:
                log.warning("%s is unreadable; starting afresh", path)
        return {
            "tool": "roverbench",
            "version": __version__,
            "config_hash": self.cfg.hash,
            "seed": self.cfg.seed,
            "stages": stages,
        }

    def _write_manifest(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        stages = self.manifest["stages"]
        self.manifest["stages"] = {k: stages[k] for k in STAGES if k in stages}
        text = json.dumps(self.manifest, indent=2, sort_keys=True) + "\n"
        (self.run_dir / MANIFEST).write_text(text)

    def _outputs(self, rel_dir: str) -> dict:
        root = self.run_dir / rel_dir
        files = sorted(p for p in root.rglob("*") if p.is_file())
        return {p.relative_to(self.run_dir).as_posix(): sha256_file(p) for p in files}

    def _up_to_date(self, stage: str, key: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if self.force or not entry or entry.get("key") != key:
            return False
        for rel, digest in entry["outputs"].items():
            p = self.run_dir / rel
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True

    def _require(self, stage: str, *paths: Path):
        for p in paths:
            if not p.is_file():
                raise StageError(stage, f"missing prerequisite {p}")

    # -- stage keys -------------------------------------------------------
    def _key(self, stage: str) -> str:
        cfg = self.cfg
        if stage == "terrain":
            parts = {"terrain": cfg.terrain, "seed": cfg.seed, "raster": sha256_file(cfg.raster_path)}
        elif stage == "path":
            parts = {"terrain": cfg.terrain, "path": cfg.path, "seed": cfg.seed,
                     "raster": sha256_file(cfg.raster_path)}
        elif stage == "simulate":
            self._require(stage, self.world_obj, self.path_tum)
            parts = {"sensor": dataclasses.asdict(sensor_model(cfg)),
                     "world": sha256_file(self.world_obj), "path": sha256_file(self.path_tum)}
        elif stage == "odom":
            self._require(stage, self.dataset_json)
            parts = {"odometry": cfg.odometry, "dataset": sha256_file(self.dataset_json)}
        else:
            gt, est = self.eval_inputs
            self._require(stage, gt, est)
            parts = {"eval": {k: cfg.eval[k] for k in ("segment_len", "align_fraction", "max_dt")},
                     "gt": sha256_file(gt), "est": sha256_file(est)}
        parts["version"] = __version__
        return _hash_json(parts)

    @property
    def world_obj(self) -> Path:
        return self.run_dir / "world" / "world.obj"

    @property
    def path_tum(self) -> Path:
        return self.run_dir / "path" / "ground_truth.tum"

    @property
    def dataset_json(self) -> Path:
        return self.run_dir / "scans" / "dataset.json"

    @property
    def eval_inputs(self) -> tuple[Path, Path]:
        e = self.cfg.eval
        gt = self.cfg.resolve(e["gt"]) or self.run_dir / "scans" / "ground_truth.tum"
        est = self.cfg.resolve(e["est"]) or self.run_dir / "odom" / "odometry.tum"
        return gt, est

    # -- stages -----------------------------------------------------------
    def stage_terrain(self):
        cfg = self.cfg
        hf = heightfield(cfg)
        pops = [RockPopulation(**r) for r in cfg.terrain["rocks"]]
        scene, placements = build_world(hf, pops, cfg.seed)
        out = self.run_dir / "world"
        export_world(scene, out)
        rocks = [
            {"population": p.population, "diameter": p.diameter, "position": list(p.position),
             "yaw": p.yaw, "mesh_seed": p.mesh_seed}
            for p in placements
        ]
        (out / "rocks.json").write_text(json.dumps(rocks, indent=1) + "\n")
        log.info("terrain: %d triangles, %d rocks", len(scene.triangles), len(placements))

    def stage_path(self):
        cfg = self.cfg
        hf = heightfield(cfg)
        spec = path_spec(cfg, hf)
        traj = sample_trajectory(spec, hf)
        sigma = cfg.path["orientation_noise_deg"]
        if sigma > 0:
            traj = perturb_orientations(traj, sigma, cfg.seed)
        out = self.run_dir / "path"
        out.mkdir(parents=True, exist_ok=True)
        write_tum(traj, out / "ground_truth.tum")
        export_actor_sdf(traj, out / "actor.sdf")
        info = {"waypoints": spec.waypoints.tolist(), "closed": spec.closed, "length": spec.length,
                "poses": len(traj), "arc_length": traj.path_length()}
        (out / "path.json").write_text(json.dumps(info, indent=1) + "\n")
        log.info("path: %d poses over %.2f m", len(traj), traj.path_length())

    def stage_simulate(self):
        scene = Scene(read_obj(self.world_obj))
        traj = read_tum(self.path_tum)
        manifest = simulate_sequence(scene, traj, sensor_model(self.cfg), self.run_dir / "scans")
        log.info("simulate: %d frames", manifest["frame_count"])

    def stage_odom(self):
        data = load_dataset(self.run_dir / "scans")
        result = run_odometry(data.scans, data.stamps, odometry_params(self.cfg))
        out = self.run_dir / "odom"
        out.mkdir(parents=True, exist_ok=True)
        write_tum(result.trajectory, out / "odometry.tum")
        info = {"frames": len(result.trajectory),
                "degenerate_frames": result.degenerate_frames,
                "residuals": [None if not np.isfinite(r) else r for r in result.residuals]}
        (out / "odometry.json").write_text(json.dumps(info) + "\n")
        log.info("odom: %d frames, %d degenerate", len(result.trajectory), len(result.degenerate_frames))

    def stage_eval(self):
        gt_path, est_path = self.eval_inputs
        e = self.cfg.eval
        report = evaluate(read_tum(gt_path), read_tum(est_path), e["segment_len"],
                          e["align_fraction"], e["max_dt"])
        write_report(report, self.run_dir / "eval")
        self.report = report

    _OUT_DIRS = {"terrain": "world", "path": "path", "simulate": "scans", "odom": "odom", "eval": "eval"}

    def run(self, stages=("gen", "simulate", "odom", "eval")) -> PipelineResult:
        result = PipelineResult(self.run_dir, self.manifest)
        self.report = None
        for stage in expand_stages(stages):
            try:
                key = self._key(stage)
                if self._up_to_date(stage, key):
                    log.info("%s: up to date", stage)
                    result.skipped.append(stage)
                    continue
                out_dir = self.run_dir / self._OUT_DIRS[stage]
                if out_dir.exists():
                    _clear(out_dir)
                getattr(self, f"stage_{stage}")()
            except StageError:
                raise
            except (RoverBenchError, ValueError, OSError, KeyError) as exc:
                raise StageError(stage, str(exc)) from exc
            self.manifest["stages"][stage] = {"key": key, "outputs": self._outputs(self._OUT_DIRS[stage])}
            self._write_manifest()
            result.ran.append(stage)
        self._write_manifest()
        if "eval" in expand_stages(stages) and self.report is None:
            gt, est = self.eval_inputs
            e = self.cfg.eval
            self.report = evaluate(read_tum(gt), read_tum(est), e["segment_len"], e["align_fraction"], e["max_dt"])
        result.report = self.report
        return result


def _clear(directory: Path):
    for p in sorted(directory.rglob("*"), key=lambda q: len(q.parts), reverse=True):
        if p.is_file() or p.is_symlink():
            p.unlink()
        else:
            p.rmdir()


def run_pipeline(cfg, stages=("gen", "simulate", "odom", "eval"), run_dir=None, force: bool = False) -> PipelineResult:
    """Run ``stages`` (names from ``terrain, path, gen, simulate, odom, eval``)."""
    return Pipeline(cfg, run_dir, force).run(stages)

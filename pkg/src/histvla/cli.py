"""Command-line entry point.

Every subcommand writes its artifacts under ``--out`` and finishes by writing
``manifest.json`` there: the config snapshot, the derived seeds and a SHA-256
hash of every artifact. Nothing time-dependent is recorded, so identical
config and seed give identical manifests.

Exit codes: 0 success, 1 unexpected failure, 2 bad flags, 3 unknown
subcommand, 4 invalid config, 5 missing input, 6 module error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from . import scorer as sc
from .config import RunConfig, load_config
from .geometry import ConfigError, InvalidInputError
from .meta_action import classify
from .planner import Planner, PlannerSample, RefineConfig, TrainingError as PlannerTrainingError
from .planner import refine as refine_plan
from .planner import train_planner
from .policy import PolicyConfig, PolicyModel, infer, make_sample, train_policy
from .policy import TrainingError as PolicyTrainingError
from .scenario import GenerationError, generate_corpus
from .sparsifier import flops_reduction
from .store import (MissingInputError, SceneRecord, read_corpus, read_scene_dir, read_trajectories, scene_dirs,
                    write_csv, write_labels, write_scene_dir, write_trajectories)
from .svg import render_svg

log = logging.getLogger("histvla")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_UNKNOWN_SUBCOMMAND = 3
EXIT_CONFIG = 4
EXIT_MISSING_INPUT = 5
EXIT_MODULE = 6

METRIC_COLUMNS = sc.METRICS + ("epdms",)
MANIFEST = "manifest.json"


class Run:
    """Output directory bookkeeping; every artifact goes through :meth:`path`."""

    def __init__(self, subcommand: str, cfg: RunConfig):
        self.subcommand = subcommand
        self.cfg = cfg
        self.out = Path(cfg.paths.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(p)
        return p

    def record(self, paths: Sequence[Path]) -> None:
        self.artifacts.extend(Path(p) for p in paths)

    def write_manifest(self) -> Path:
        snapshot = self.cfg.to_dict()
        snapshot["paths"].pop("out")  # the manifest lives in out
        hashes = {}
        for p in sorted(set(self.artifacts), key=lambda q: q.relative_to(self.out).as_posix()):
            hashes[p.relative_to(self.out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        doc = {"subcommand": self.subcommand, "config": snapshot, "seeds": self.cfg.seeds, "artifacts": hashes}
        target = self.out / MANIFEST
        target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return target


# -- model persistence ----------------------------------------------------------------


def save_models(path: Path, policy: PolicyModel, planner: Planner | None = None) -> Path:
    config = {"policy": policy.cfg.to_dict()}
    tensors = ckpt.state_arrays(policy, "policy.")
    if planner is not None:
        config["planner"] = planner.cfg.to_dict()
        tensors.update(ckpt.state_arrays(planner, "planner."))
    return ckpt.save(path, config, tensors)


def load_models(path, cfg: RunConfig, need_planner: bool) -> tuple[PolicyModel, Planner | None]:
    config, tensors = ckpt.load(path)
    if "policy" not in config:
        raise ckpt.CheckpointError(f"{path} holds no policy")
    pcfg = PolicyConfig.from_dict(config["policy"])
    if cfg.policy.fusion_rate != pcfg.fusion_rate:
        # the sparsifier has no rate-dependent parameters, so a trained policy runs at any rate
        pcfg = PolicyConfig.from_dict({**pcfg.to_dict(), "fusion_rate": cfg.policy.fusion_rate})
    policy = PolicyModel(pcfg)
    ckpt.load_state(policy, {k: v for k, v in tensors.items() if k.startswith("policy.")}, "policy.")
    policy.eval()
    planner = None
    if need_planner:
        if "planner" not in config:
            raise ckpt.CheckpointError(f"{path} holds no planner; run train-planner first")
        planner = Planner(RefineConfig.from_dict(config["planner"]))
        ckpt.load_state(planner, {k: v for k, v in tensors.items() if k.startswith("planner.")}, "planner.")
        planner.eval()
    return policy, planner


# -- subcommands ----------------------------------------------------------------------


def _generate(run: Run, split: str, root: str = "") -> Path:
    cfg = run.cfg
    n = cfg.n_train if split == "train" else cfg.n_eval
    seed = cfg.seeds["train_corpus" if split == "train" else "eval_corpus"]
    base = Path(root) if root else Path()
    for i, g in enumerate(generate_corpus(n, seed, cfg.policy.history_k, cfg.thresholds)):
        scene_id = f"{split}_{i:04d}"
        run.record(write_scene_dir(run.out / base / scene_id, scene_id, g))
    log.info("wrote %d %s scenes", n, split)
    return run.out / base


def cmd_generate(run: Run, args) -> None:
    _generate(run, args.split)


def cmd_label(run: Run, args) -> None:
    if args.trajectories is None:
        raise MissingInputError("missing input: label needs --trajectories <csv>")
    trajs = read_trajectories(args.trajectories)
    labels = {tid: classify(t, run.cfg.thresholds) for tid, t in trajs.items()}
    write_labels(run.path("labels.csv"), labels)


def _policy_fit(run: Run, records: Sequence[SceneRecord]) -> PolicyModel:
    samples = [make_sample(r.generated()) for r in records]
    res = train_policy(samples, run.cfg.policy)
    write_csv(run.path("policy_loss.csv"), ("epoch", "loss"), enumerate(res.loss_history))
    write_csv(run.path("policy_metrics.csv"), ("metric", "value"), [("command_accuracy", res.command_accuracy)])
    log.info("policy command accuracy on training scenes: %.3f", res.command_accuracy)
    return res.model


def cmd_train_policy(run: Run, args) -> None:
    records = read_corpus(run.cfg.paths.scenes)
    model = _policy_fit(run, records)
    save_models(run.path("policy.ckpt"), model)


def _planner_fit(run: Run, policy: PolicyModel, records: Sequence[SceneRecord]) -> Planner:
    plans = infer(policy, [make_sample(r.generated()) for r in records])
    samples = [PlannerSample(p.trajectory, p.confidence, p.command, r.gt, r.scene) for p, r in zip(plans, records)]
    res = train_planner(samples, run.cfg.planner, scorer_cfg=run.cfg.scorer)
    write_csv(run.path("planner_loss.csv"), ("epoch", "loss"), enumerate(res.loss_history))
    return res.planner


def cmd_train_planner(run: Run, args) -> None:
    records = read_corpus(run.cfg.paths.scenes)
    policy, _ = load_models(run.cfg.paths.checkpoint, run.cfg, need_planner=False)
    planner = _planner_fit(run, policy, records)
    save_models(run.path("model.ckpt"), policy, planner)


def _refine_scenes(run: Run, policy: PolicyModel, planner: Planner, records: Sequence[SceneRecord],
                   root: str) -> list[tuple[str, sc.ScoreCard, sc.ScoreCard]]:
    cfg = run.cfg
    n = cfg.planner.n_candidates
    plans = infer(policy, [make_sample(r.generated()) for r in records])
    results = []
    for i, (rec, plan) in enumerate(zip(records, plans)):
        ref = refine_plan(plan.trajectory, plan.confidence, plan.command, rec.scene, planner, n=n,
                          seed=cfg.seeds["planner"] + i, scorer_cfg=cfg.scorer)
        coarse_card = sc.score(plan.trajectory, rec.scene, cfg.scorer)
        trajs = {"coarse": plan.trajectory}
        trajs.update({f"cand_{j:02d}": c for j, c in enumerate(ref.candidates)})
        trajs["refined"] = ref.refined
        write_trajectories(run.path(f"{root}/{rec.scene_id}/trajectories.csv"), trajs)
        rows = [["coarse", 0, *coarse_card.as_row()]]
        rows += [[f"cand_{j:02d}", int(j == ref.index), *c.as_row()] for j, c in enumerate(ref.cards)]
        write_csv(run.path(f"{root}/{rec.scene_id}/scores.csv"), ("traj_id", "selected", *METRIC_COLUMNS), rows)
        svg = render_svg(rec.scene, plan.trajectory, ref.candidates, ref.refined, gt=rec.gt)
        run.path(f"{root}/{rec.scene_id}/overlay.svg").write_text(svg)
        results.append((rec.scene_id, coarse_card, ref.cards[ref.index]))
    return results


def cmd_refine(run: Run, args) -> None:
    records = [read_scene_dir(p) for p in scene_dirs(run.cfg.paths.scenes)]
    policy, planner = load_models(run.cfg.paths.checkpoint, run.cfg, need_planner=True)
    results = _refine_scenes(run, policy, planner, records, "refine")
    _write_eval(run.path("refine_summary.csv"), results)


def cmd_evaluate(run: Run, args) -> None:
    rec = read_scene_dir(run.cfg.paths.scenes)
    if args.trajectories is None:
        trajs = {"gt": rec.gt}
    else:
        trajs = read_trajectories(args.trajectories)
    rows = [[tid, *sc.score(t, rec.scene, run.cfg.scorer).as_row()] for tid, t in trajs.items()]
    write_csv(run.path("scores.csv"), ("traj_id", *METRIC_COLUMNS), rows)


def cmd_bench_sparsify(run: Run, args) -> None:
    b = run.cfg.bench
    rates = b.fusion_rates if args.fusion_rate is None else (run.cfg.policy.fusion_rate,)
    rows = []
    for n in b.seq_lens:
        for r in rates:
            full, sparse, pct = flops_reduction(n, r, b.d_model, b.n_layers, b.n_heads)
            rows.append([n, r, full, sparse, round(pct, 6)])
    write_csv(run.path("sparsify_bench.csv"), ("seq_len", "fusion_rate", "flops_full", "flops_sparse", "reduction_pct"),
              rows)


def _write_eval(path: Path, results) -> Path:
    header = ["scene_id", "epdms_coarse", "epdms_refined"]
    header += [f"{m}_coarse" for m in sc.METRICS] + [f"{m}_refined" for m in sc.METRICS]
    rows = []
    for scene_id, c0, c1 in results:
        rows.append([scene_id, c0.epdms, c1.epdms, *c0.as_row()[:-1], *c1.as_row()[:-1]])
    return write_csv(path, header, rows)


def cmd_pipeline(run: Run, args) -> None:
    train_root = _generate(run, "train", "scenes/train")
    eval_root = _generate(run, "eval", "scenes/eval")
    train = read_corpus(train_root)
    evals = read_corpus(eval_root)
    policy = _policy_fit(run, train)
    save_models(run.path("policy.ckpt"), policy)
    planner = _planner_fit(run, policy, train)
    save_models(run.path("model.ckpt"), policy, planner)
    results = _refine_scenes(run, policy, planner, evals, "refine")
    for scene_id, *_ in results:
        src = run.out / "refine" / scene_id / "overlay.svg"
        run.path(f"svg/{scene_id}.svg").write_bytes(src.read_bytes())
    _write_eval(run.path("eval.csv"), results)
    e0 = np.array([r[1].epdms for r in results])
    e1 = np.array([r[2].epdms for r in results])
    mask = e0 < 1.0
    frac = float(np.mean(e1[mask] > e0[mask])) if mask.any() else 1.0
    log.warning("eval EPDMS coarse %.4f refined %.4f; improved on %.1f%% of imperfect scenes",
                e0.mean(), e1.mean(), 100 * frac)


SUBCOMMANDS: dict[str, Callable] = {
    "generate": cmd_generate,
    "label": cmd_label,
    "train-policy": cmd_train_policy,
    "train-planner": cmd_train_planner,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
    "bench-sparsify": cmd_bench_sparsify,
    "pipeline": cmd_pipeline,
}


def _unit_rate(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"fusion rate must lie in (0, 1], got {text}")
    return v


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser(subcommand: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=f"histvla {subcommand}")
    p.add_argument("--config", help="INI config file (default: packaged defaults)")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out")
    p.add_argument("--scenes")
    p.add_argument("--checkpoint")
    p.add_argument("--n-candidates", type=int)
    p.add_argument("--fusion-rate", type=_unit_rate)
    if subcommand in ("label", "evaluate"):
        p.add_argument("--trajectories", help="trajectory CSV (traj_id,t,x,y)")
    if subcommand == "generate":
        p.add_argument("--split", choices=("train", "eval"), default="train")
    return p


def setup_logging() -> None:
    level = os.environ.get("HIST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def usage() -> str:
    return "usage: histvla {" + ",".join(SUBCOMMANDS) + "} [options]"


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    setup_logging()
    if not argv or argv[0] in ("-h", "--help"):
        print(usage())
        return EXIT_OK if argv else EXIT_USAGE
    sub, rest = argv[0], argv[1:]
    if sub not in SUBCOMMANDS:
        print(f"error: unknown subcommand {sub!r}\n{usage()}", file=sys.stderr)
        return EXIT_UNKNOWN_SUBCOMMAND
    try:
        args = build_parser(sub).parse_args(rest)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    # one thread keeps floating-point reductions, and so the artifacts, reproducible
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, out=args.out, scenes=args.scenes, checkpoint=args.checkpoint,
            n_candidates=args.n_candidates, fusion_rate=args.fusion_rate,
        )
    except MissingInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(sub, cfg)
        SUBCOMMANDS[sub](run, args)
        run.write_manifest()
    except MissingInputError as e:
        msg = str(e)
        print(f"error: {msg if msg.startswith('missing input') else 'missing input: ' + msg}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidInputError, GenerationError, PolicyTrainingError, PlannerTrainingError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_MODULE
    except Exception as e:  # pragma: no cover - last-resort diagnostic
        log.exception("unexpected failure")
        print(f"error: internal failure: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

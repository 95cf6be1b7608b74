"""Command line surface: gen -> plan -> train -> eval -> metrics.

Exit codes: 0 success, 2 configuration error, 3 data error.  Seeds come from
--seed or the MOTION_FORGE_SEED environment variable (flag wins); every
worker derives its per-problem RNG from (seed, problem_id, stage) counters,
so output bytes are independent of worker count and scheduling.
"""

import argparse
import json
import multiprocessing
import os
import sys

import numpy as np

from . import dataset as ds
from . import metrics as mt
from . import policy as pol
from . import robot as rb
from .errors import CorruptRecord, MotionForgeError, VersionMismatch
from .expert_global import plan_global
from .expert_hybrid import plan_hybrid
from .scenegen import generate_scene, sample_problem
from .trajectory import validate_trajectory

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

GEN_ATTEMPTS = 200
_STAGE_GEN, _STAGE_PLAN, _STAGE_EVAL = 0, 1, 2


class _ConfigError(Exception):
    pass


def _resolve_seed(args):
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("MOTION_FORGE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise _ConfigError(f"bad MOTION_FORGE_SEED {env!r}")
    return 0


def _config_error(msg):
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _data_error(msg):
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_DATA


# ---------------------------------------------------------------------------
# gen


def _gen_problem(kind, seed, index, robot):
    for attempt in range(GEN_ATTEMPTS):
        rng = np.random.default_rng([seed, _STAGE_GEN, index, attempt])
        try:
            scene = generate_scene(kind, rng)
            return sample_problem(scene, robot, rng, problem_id=index)
        except MotionForgeError:
            continue
    return None


def cmd_gen(args):
    seed = _resolve_seed(args)
    robot = rb.default_robot()
    problems = []
    for i in range(args.count):
        problem = _gen_problem(args.kind, seed, i, robot)
        if problem is None:
            return _data_error(f"could not generate problem {i} after {GEN_ATTEMPTS} tries")
        problems.append(problem)
    ds.write_problems(args.out, problems, global_seed=seed)
    print(f"wrote {len(problems)} problems to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan


def _plan_one(payload):
    expert, problem_dict, seed, timeout = payload
    from .scenegen import PlanningProblem
    problem = PlanningProblem.from_dict(problem_dict)
    robot = rb.default_robot()
    rng = np.random.default_rng([seed, _STAGE_PLAN, problem.problem_id])
    try:
        if expert == "global":
            traj = plan_global(problem, robot, timeout=timeout, rng=rng)
            revised = None
            report = validate_trajectory(traj, problem, robot)
        else:
            traj, revised_problem = plan_hybrid(problem, robot, timeout=timeout, rng=rng)
            revised = revised_problem.target
            report = validate_trajectory(traj, revised_problem, robot)
    except MotionForgeError as e:
        return problem.problem_id, None, type(e).__name__
    record = ds.ProblemRecord(problem.problem_id, problem.scene, problem.start,
                              problem.target, revised, traj, expert,
                              traj.planning_time, report)
    return problem.problem_id, record.to_dict(), None


def cmd_plan(args):
    seed = _resolve_seed(args)
    try:
        problem_dicts = list(ds.stream_jsonl(getattr(args, "in")))
    except (CorruptRecord, VersionMismatch, OSError) as e:
        return _data_error(str(e))
    payloads = [(args.expert, d, seed, args.timeout) for d in problem_dicts]
    if args.workers > 1:
        with multiprocessing.Pool(args.workers) as pool:
            results = pool.map(_plan_one, payloads)
    else:
        results = [_plan_one(p) for p in payloads]
    results.sort(key=lambda r: r[0])
    records = [ds.ProblemRecord.from_dict(d) for _, d, err in results if d is not None]
    rejections = {}
    for _, d, err in results:
        if err is not None:
            rejections[err] = rejections.get(err, 0) + 1
    ds.write_records(args.out, records, global_seed=seed)
    print(f"planned {len(records)}/{len(payloads)} problems with the {args.expert} expert")
    if rejections:
        print("rejections: " + ", ".join(f"{k}={v}" for k, v in sorted(rejections.items())),
              file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    seed = _resolve_seed(args)
    cfg_dict = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg_dict = json.load(f)
        except OSError as e:
            return _data_error(str(e))
        except json.JSONDecodeError as e:
            return _config_error(f"bad training config: {e}")
    cfg_dict.setdefault("seed", seed)
    cfg_dict.setdefault("profile", args.profile)
    try:
        config = pol.TrainConfig.from_dict(cfg_dict)
    except TypeError as e:
        return _config_error(f"bad training config: {e}")
    try:
        records = list(ds.read_records(args.data))
    except (CorruptRecord, VersionMismatch, OSError) as e:
        return _data_error(str(e))
    if not records:
        return _data_error("empty training dataset")
    examples = ds.records_to_examples(records)
    robot = rb.default_robot()
    params = pol.build_policy(config.profile,
                              rng=np.random.default_rng([config.seed, 7]))
    curve = pol.train(params, examples, config, robot=robot, log=print)
    pol.save_policy(args.out, params, config)
    print(f"trained on {len(examples)} examples; checkpoint at {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / metrics


def _result_line(problem, result):
    d = {"problem_id": int(problem.problem_id),
         "env_kind": problem.scene.env_kind,
         "success": mt.success_check(result, problem)}
    full = result.to_dict()
    del full["trajectory"]
    d.update(full)
    return d


def cmd_eval(args):
    seed = _resolve_seed(args)
    robot = rb.default_robot()
    replay = args.ckpt == "replay"
    if not replay:
        try:
            params, _ = pol.load_policy(args.ckpt)
        except (VersionMismatch, OSError) as e:
            return _data_error(str(e))
    try:
        if replay:
            records = list(ds.read_records(args.problems))
            problems = [_record_problem(rec) for rec in records]
        else:
            problems = list(ds.read_problems(args.problems))
    except (CorruptRecord, VersionMismatch, OSError) as e:
        return _data_error(str(e))
    if not problems:
        return _data_error("no problems to evaluate")

    lines = []
    results = []
    for i, problem in enumerate(problems):
        if replay:
            result = mt.replay_rollout(records[i].trajectory, problem, robot)
        else:
            config = mt.RolloutConfig(seed=seed,
                                      partial_view=(args.partial_view == "on"),
                                      cloud_noise=args.cloud_noise)
            scene_fn = None
            if args.dynamic != "off":
                speed = mt.DYNAMIC_SPEEDS[args.dynamic]
                dyn_rng = np.random.default_rng([seed, _STAGE_EVAL, problem.problem_id])
                scene_fn = mt.make_dynamic_scene_fn(problem, speed, dyn_rng)
            result = mt.rollout(params, problem, robot, config=config, scene_fn=scene_fn)
        results.append(result)
        lines.append(_result_line(problem, result))
    if args.out:
        ds.write_jsonl(args.out, lines, [p.scene.env_kind for p in problems], seed)
    report = mt.summarize_results(results, problems)
    _print_report(report, args.format)
    return EXIT_OK


def _record_problem(rec):
    from .scenegen import PlanningProblem
    target = rec.target
    return PlanningProblem(rec.scene, rec.start, target,
                           target_volume_id=None, problem_id=rec.problem_id)


def _print_report(report, fmt):
    if fmt == "machine":
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(report.table())


def cmd_metrics(args):
    try:
        lines = list(ds.stream_jsonl(args.results))
    except (CorruptRecord, VersionMismatch, OSError) as e:
        return _data_error(str(e))
    if not lines:
        return _data_error("empty results file")
    succ = [bool(d["success"]) for d in lines]
    smooth = [d["sparc_joint"] < mt.SPARC_THRESHOLD and d["sparc_ee"] < mt.SPARC_THRESHOLD
              for d in lines]
    pos = np.array([d["final_pos_err"] for d in lines])
    ori = np.array([d["final_ori_err"] for d in lines])
    times = np.array([d["wall_time"] for d, s in zip(lines, succ) if s])
    report = mt.MetricsReport(
        len(lines), int(np.sum(succ)),
        float(np.mean([d["env_collision"] for d in lines])),
        float(np.mean([d["self_collision"] for d in lines])),
        float(np.mean(smooth)),
        (float(np.median(pos)), float(np.quantile(pos, 0.9))),
        (float(np.median(ori)), float(np.quantile(ori, 0.9))),
        float(np.mean(times)) if len(times) else 0.0,
        float(np.std(times)) if len(times) else 0.0)
    _print_report(report, args.format)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="motionforge")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate planning problems")
    g.add_argument("--kind", required=True, choices=["tabletop", "cubby", "dresser"])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    pl = sub.add_parser("plan", help="run an expert planner over problems")
    pl.add_argument("--expert", required=True, choices=["global", "hybrid"])
    pl.add_argument("--in", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--timeout", type=float, default=20.0)
    pl.add_argument("--workers", type=int, default=1)
    pl.add_argument("--seed", type=int, default=None)
    pl.set_defaults(func=cmd_plan)

    tr = sub.add_parser("train", help="train the policy on expert records")
    tr.add_argument("--data", required=True)
    tr.add_argument("--profile", default="desk", choices=["desk", "paper-shapes"])
    tr.add_argument("--config", default=None)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="roll out a checkpoint over problems")
    ev.add_argument("--ckpt", required=True,
                    help="checkpoint path, or 'replay' to rescore expert records")
    ev.add_argument("--problems", required=True)
    ev.add_argument("--dynamic", default="off", choices=["off", "slow", "medium", "fast"])
    ev.add_argument("--partial-view", default="off", choices=["off", "on"])
    ev.add_argument("--cloud-noise", type=float, default=0.0)
    ev.add_argument("--format", default="table", choices=["table", "machine"])
    ev.add_argument("--out", default=None)
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    me = sub.add_parser("metrics", help="aggregate saved evaluation results")
    me.add_argument("--results", required=True)
    me.add_argument("--format", default="table", choices=["table", "machine"])
    me.set_defaults(func=cmd_metrics)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage, matching our config-error code
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.func(args)
    except _ConfigError as e:
        return _config_error(str(e))
    except (CorruptRecord, VersionMismatch) as e:
        return _data_error(str(e))


if __name__ == "__main__":
    sys.exit(main())

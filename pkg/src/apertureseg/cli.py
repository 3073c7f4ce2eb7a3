"""Command-line front end.

One binary, six subcommands: phantom-gen, ssm-fit, train, segment, eval,
bench. Every command takes --config (JSON) and --out (directory) and only
writes inside --out. Exit codes: 0 success, 1 runtime failure with a
single-line `error: ...` on stderr, 2 for usage or config problems caught
before anything is written.

Heavy imports happen inside the handlers so that --threads can pin the
BLAS thread count through the environment before numpy loads.
"""

import argparse
import json
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _err(msg):
    print("error: " + " ".join(str(msg).split()), file=sys.stderr)


def _say(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# config parsing (exit code 2 territory; no imports of the heavy modules
# beyond what the dataclass constructors themselves need)

def _parse_phantoms(raw):
    from .volume import PhantomSpec
    specs = []
    for i, d in enumerate(raw["phantoms"]):
        d = dict(d)
        name = d.pop("name", f"phantom-{i:02d}")
        for key in ("semi_axes", "shape", "spacing", "center", "origin"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        specs.append((name, PhantomSpec(**d)))
    if not specs:
        raise ValueError("config lists no phantoms")
    return specs


def _parse_aperture(d):
    from .aperture import ApertureConfig
    return ApertureConfig(**d)


def _parse_segment_cfg(d):
    from .pipeline import SegmentConfig
    d = dict(d)
    if "global_aperture" in d:
        d["global_aperture"] = _parse_aperture(d["global_aperture"])
    if "local_aperture" in d:
        la = d["local_aperture"]
        if isinstance(la, list):
            d["local_aperture"] = tuple(_parse_aperture(x) for x in la)
        else:
            d["local_aperture"] = _parse_aperture(la)
    return SegmentConfig(**d)


def _parse_train_cfg(d):
    from .agent import TrainConfig
    d = dict(d)
    if "w_trs" in d:
        d["w_trs"] = tuple(d["w_trs"])
    return TrainConfig(**d)


def _parse_augment(d):
    from .pipeline import AugmentParams
    return AugmentParams(**d)


def _parse_proto(d):
    from .pipeline import InitProtocol
    return InitProtocol(**d)


def _need(raw, *keys):
    for key in keys:
        if key not in raw:
            raise KeyError(f"missing config key {key!r}")


# ---------------------------------------------------------------------------
# handlers: (parse(raw) -> plan, run(plan, out))

def _parse_phantom_gen(raw):
    _need(raw, "phantoms")
    return {"specs": _parse_phantoms(raw)}


def _run_phantom_gen(plan, out):
    from .mesh import save_obj
    from .volume import generate_phantom, save_volume
    for name, spec in plan["specs"]:
        vol, truth = generate_phantom(spec)
        save_volume(vol, os.path.join(out, name))
        save_obj(truth, os.path.join(out, name + ".obj"))
        _say(f"wrote {name}: {vol.data.shape} voxels, "
             f"{truth.n_vertices} vertices")


def _parse_ssm_fit(raw):
    _need(raw, "meshes")
    paths = list(raw["meshes"])
    if len(paths) < 2:
        raise ValueError("ssm-fit needs at least 2 meshes")
    return {"paths": paths}


def _run_ssm_fit(plan, out):
    from .mesh import load_obj
    from .ssm import fit_ssm, save_ssm
    meshes = [load_obj(p) for p in plan["paths"]]
    model = fit_ssm(meshes)
    save_ssm(model, os.path.join(out, "model"))
    _say(f"fit {model.n_modes} modes from {len(meshes)} meshes")


def _parse_train(raw):
    _need(raw, "phantoms", "holdout")
    holdout = int(raw["holdout"])
    specs = _parse_phantoms(raw)
    if holdout < 0 or len(specs) - holdout < 2:
        raise ValueError("holdout leaves fewer than 2 training phantoms")
    return {"specs": specs, "holdout": holdout,
            "augment": _parse_augment(raw.get("augment", {})),
            "train": _parse_train_cfg(raw.get("train", {})),
            "segment": _parse_segment_cfg(raw.get("segment", {})),
            "seed": int(raw.get("seed", 0))}


def _run_train(plan, out):
    from .pipeline import train
    from .ssm import save_ssm
    from .volume import generate_phantom
    n_train = len(plan["specs"]) - plan["holdout"]
    pairs = []
    for name, spec in plan["specs"][:n_train]:
        vol, truth = generate_phantom(spec)
        pairs.append((vol, truth))
        _say(f"generated training phantom {name}")
    _, model, _ = train(pairs, plan["augment"], plan["train"],
                        plan["segment"], seed=plan["seed"], out_dir=out,
                        progress=_say)
    save_ssm(model, os.path.join(out, "model"))


def _parse_agents(raw):
    _need(raw, "agents")
    _need(raw["agents"], "global", "local")
    return dict(raw["agents"])


def _parse_segment(raw):
    _need(raw, "volume")
    plan = {"volume": raw["volume"], "agents": _parse_agents(raw),
            "segment": _parse_segment_cfg(raw.get("segment", {})),
            "seed": int(raw.get("seed", 0))}
    if "init_mesh" in raw:
        plan["init_mesh"] = raw["init_mesh"]
    else:
        _need(raw, "model")
        plan["model"] = raw["model"]
        plan["init"] = _parse_proto(raw.get("init", {}))
    return plan


def _run_segment(plan, out):
    import numpy as np

    from .agent import load_agent
    from .mesh import load_obj, save_obj
    from .pipeline import AgentPair, random_init, segment
    from .ssm import load_ssm
    from .volume import load_volume
    vol = load_volume(plan["volume"])
    agents = AgentPair(load_agent(plan["agents"]["global"]),
                       load_agent(plan["agents"]["local"]))
    if "init_mesh" in plan:
        init = load_obj(plan["init_mesh"])
    else:
        init = random_init(load_ssm(plan["model"]), plan["init"],
                           plan["seed"])
    final, trace = segment(vol, init, agents, plan["segment"])
    save_obj(final, os.path.join(out, "result.obj"))
    with open(os.path.join(out, "trace.json"), "w") as fh:
        json.dump(trace, fh, indent=1)
        fh.write("\n")
    total = sum(t["seconds"] for t in trace)
    _say(f"{len(trace)} iterations, {total:.3f} s inference, "
         f"{np.asarray(final.vertices).shape[0]} vertices")


def _parse_eval(raw):
    _need(raw, "volume", "pred", "truth")
    return {k: raw[k] for k in ("volume", "pred", "truth")}


def _run_eval(plan, out):
    from .mesh import load_obj
    from .pipeline import evaluate
    from .volume import load_volume
    vol = load_volume(plan["volume"])
    metrics = evaluate(load_obj(plan["pred"]), load_obj(plan["truth"]),
                       vol)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(metrics, sort_keys=True))


def _parse_bench(raw):
    _need(raw, "phantoms", "holdout", "model")
    holdout = int(raw["holdout"])
    specs = _parse_phantoms(raw)
    if not 0 < holdout <= len(specs):
        raise ValueError("holdout must select at least one phantom")
    timing = raw.get("timing", "zero")
    if timing not in ("zero", "wall"):
        raise ValueError("timing must be 'zero' or 'wall'")
    return {"specs": specs[len(specs) - holdout:],
            "agents": _parse_agents(raw), "model": raw["model"],
            "init": _parse_proto(raw.get("init", {})),
            "segment": _parse_segment_cfg(raw.get("segment", {})),
            "seed": int(raw.get("seed", 0)), "timing": timing}


def _run_bench(plan, out):
    from .agent import load_agent
    from .pipeline import AgentPair, benchmark, write_bench_csv
    from .ssm import load_ssm
    from .volume import generate_phantom
    eval_set = []
    for name, spec in plan["specs"]:
        vol, truth = generate_phantom(spec)
        eval_set.append((name, vol, truth))
        _say(f"generated held-out phantom {name}")
    agents = AgentPair(load_agent(plan["agents"]["global"]),
                       load_agent(plan["agents"]["local"]))
    model = load_ssm(plan["model"])
    rows, summary = benchmark(eval_set, agents, model, plan["init"],
                              plan["segment"], seed=plan["seed"],
                              timing=plan["timing"], progress=_say)
    write_bench_csv(rows, os.path.join(out, "bench.csv"))
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _say(f"dice {summary['dice_mean']:.4f} +- {summary['dice_std']:.4f}, "
         f"hausdorff {summary['hausdorff_mean_mm']:.2f} "
         f"+- {summary['hausdorff_std_mm']:.2f} mm")


_HANDLERS = {
    "phantom-gen": (_parse_phantom_gen, _run_phantom_gen),
    "ssm-fit": (_parse_ssm_fit, _run_ssm_fit),
    "train": (_parse_train, _run_train),
    "segment": (_parse_segment, _run_segment),
    "eval": (_parse_eval, _run_eval),
    "bench": (_parse_bench, _run_bench),
}


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="JSON experiment config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--threads", type=int, default=0,
                        help="BLAS/OpenMP threads (0 = auto)")
    parser = argparse.ArgumentParser(
        prog="apertureseg",
        description="Volumetric organ segmentation by iterative mesh "
                    "deformation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _HANDLERS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.threads and args.threads > 0:
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
    except (OSError, ValueError) as e:
        _err(f"config: {e}")
        return 2
    if args.seed is not None:
        raw["seed"] = args.seed
    parse, run = _HANDLERS[args.command]
    try:
        plan = parse(raw)
    except (KeyError, TypeError, ValueError) as e:
        _err(f"config: {e}")
        return 2
    try:
        os.makedirs(args.out, exist_ok=True)
        run(plan, args.out)
    except Exception as e:  # runtime failure -> single parseable line
        _err(e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

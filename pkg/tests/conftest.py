"""Shared fixtures: the trained end-to-end benchmark setup.

Training is expensive (minutes, not seconds), so one session-scoped
fixture builds the whole thing: ten synthetic organ phantoms, agents
trained on the first eight, checkpoints on disk for the CLI tests.
"""

import time

import numpy as np
import pytest

import apertureseg.agent as agent
import apertureseg.pipeline as P
from apertureseg.aperture import ApertureConfig
from apertureseg.ssm import save_ssm
from apertureseg.volume import PhantomSpec, generate_phantom

BENCH_GLOBAL = ApertureConfig(alpha=0.0, beta=160.0, n_depth=32, n_ring=0,
                              two_sided=True)
BENCH_LOCAL = ApertureConfig(alpha=0.0, beta=20.0, n_depth=8, n_ring=0,
                             two_sided=True)


def bench_spec_dicts():
    """Ten organ-like phantoms, roughly 80 mm across, as plain dicts so
    the CLI tests can reuse them verbatim in JSON configs."""
    rng = np.random.Generator(np.random.PCG64(1234))
    specs = []
    for k in range(10):
        semi = [float(rng.uniform(36.0, 44.0)), float(rng.uniform(30.0, 38.0)),
                float(rng.uniform(25.0, 32.0))]
        specs.append({"family": "blob", "semi_axes": semi, "softness": 2.5,
                      "noise": 0.02, "seed": k, "shape": [96, 96, 96],
                      "spacing": [3.0, 3.0, 3.0], "mesh_level": 3,
                      "lobe_amp": [0.04, 0.10]})
    return specs


def bench_segment_cfg():
    # translation gets the most iterations (inits start up to 80 mm per
    # axis away and each step closes roughly half the gap); the affine
    # stage runs briefly because random inits carry no rotation or scale,
    # so extra iterations only accumulate prediction noise
    return P.SegmentConfig(levels=1, translation_iters=20, affine_iters=2,
                           nonrigid_iters=12, eps_stop=0.4,
                           global_aperture=BENCH_GLOBAL,
                           local_aperture=BENCH_LOCAL)


@pytest.fixture(scope="session")
def trained_bench(tmp_path_factory):
    """Agents trained on 8 phantoms x 200 augmentations; 2 held out."""
    out = tmp_path_factory.mktemp("trained-bench")
    spec_dicts = bench_spec_dicts()
    specs = [PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in d.items()}) for d in spec_dicts]
    pairs = [generate_phantom(s) for s in specs]
    s_cfg = bench_segment_cfg()
    p = P.AugmentParams(samples=200)
    t_cfg = agent.TrainConfig(steps=1200, batch_size=8, seed=0)
    t0 = time.perf_counter()
    agents, model, info = P.train(pairs[:8], p, t_cfg, s_cfg, seed=0,
                                  out_dir=str(out))
    train_seconds = time.perf_counter() - t0
    save_ssm(model, str(out / "model"))
    return {"out": out, "spec_dicts": spec_dicts, "pairs": pairs,
            "agents": agents, "model": model, "segment_cfg": s_cfg,
            "train_seconds": train_seconds,
            "validation": info["validation"],
            "proto": P.InitProtocol(max_translation=80.0, mode_count=5,
                                    coeff_range=2.0, trials=10)}

"""Time the hot kernels on both backends and check they agree.

    python3 benchmarks/bench_kernels.py --agents 2000 --repeat 3

Prints one line per kernel with the best wall time per backend and the
speed-up of the compiled extension over the NumPy fallback.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from pedsim import kernels
from pedsim.geometry import Environment, Layer, Obstacle, Polyline, WallIndex, rectangle
from pedsim.spatial import build_hash


def _fixture(n: int, seed: int):
    rng = np.random.default_rng(seed)
    side = max(10.0, float(np.sqrt(n / 0.5)))  # about 0.5 ped/m2
    cell = 0.5
    nx = ny = int(side / cell)
    passable = (rng.random(nx * ny) > 0.05).astype(np.uint8)
    slowness = np.ones(nx * ny)
    targets = np.array([0, nx - 1], np.int64)
    env = Environment((Layer("0"),), (Obstacle(1, rectangle(side * 0.4, side * 0.4, side * 0.5, side * 0.6), "0"),
                                      Obstacle(2, Polyline(((0.0, 0.0), (side, 0.0))), "0")))
    walls = WallIndex.build(env, margin=1.5, cell=1.0)
    pos = rng.uniform(0.5, side - 0.5, (n, 2))
    vel = rng.normal(0, 0.5, (n, 2))
    rad = rng.uniform(0.2, 0.3, n)
    des = rng.normal(0, 1.2, (n, 2))
    mask = np.ones(n, np.uint8)
    act = np.ones(n, np.uint8)
    return dict(nx=nx, ny=ny, cell=cell, passable=passable, slowness=slowness, targets=targets, walls=walls,
                pos=pos, vel=vel, rad=rad, des=des, mask=mask, act=act)


def _calls(f):
    h = build_hash(f["pos"], 1.0)
    w = kernels.wall_args(f["walls"])
    cell = f["cell"]

    def dijkstra(k):
        return k.dijkstra(f["passable"], f["slowness"], f["nx"], f["ny"], cell, cell * 2 ** 0.5, f["targets"])

    field = dijkstra(kernels._BACKENDS["python"])
    return {
        "dijkstra": dijkstra,
        "descend": lambda k: k.descend(field, f["nx"], f["ny"], 0.0, 0.0, cell, f["pos"], *w),
        "avoid": lambda k: k.avoid(f["pos"], f["vel"], f["rad"], f["des"], f["mask"], f["act"], *h.args(),
                                   3.0, 2.0, 0.1, *kernels.candidate_table(), *w),
        "commit": lambda k: k.commit(f["pos"], f["des"] * 0.1, f["rad"], f["act"], *h.args(), 0.1),
        "bucket": lambda k: k.bucket_order(np.ascontiguousarray(np.floor(f["pos"][:, 1]).astype(np.int64) * h.nx
                                                    + np.floor(f["pos"][:, 0]).astype(np.int64)), h.nx * h.ny),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def _best(fn, k, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(k)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--agents", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    f = _fixture(args.agents, args.seed)
    names = kernels.available()
    print(f"agents={args.agents} grid={f['nx']}x{f['ny']} backends={','.join(names)}")
    for kname, fn in _calls(f).items():
        res = {b: _best(fn, kernels._BACKENDS[b], args.repeat) for b in names}
        cols = "  ".join(f"{b}={res[b][0] * 1e3:9.2f} ms" for b in names)
        extra = ""
        if "compiled" in res:
            speed = res["python"][0] / max(res["compiled"][0], 1e-12)
            agree = _same(res["python"][1], res["compiled"][1])
            extra = f"  speedup={speed:6.1f}x  identical={agree}"
        print(f"{kname:9s} {cols}{extra}")


if __name__ == "__main__":
    main()

"""Train on the synthetic ring benchmark and report held-out PCK as training goes.

    python3 scripts/train_ring.py --graph-mode learned --seed 0 --steps 3000
"""

import argparse
import time

import torch

from structpose.model import GRAPH_MODES, TrainConfig
from structpose.training import eval_dataset, evaluate, init_state, save_checkpoint, train, train_dataset

# benchmark used by the acceptance tests
RING_BENCHMARK = TrainConfig(steps=3000, lr=3e-3, n_distractors=3, occlusion_prob=0.1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--graph-mode", choices=GRAPH_MODES, default="learned")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=RING_BENCHMARK.steps)
    ap.add_argument("--eval-every", type=int, default=500)
    ap.add_argument("--save", metavar="CKPT")
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = RING_BENCHMARK.replace(graph_mode=args.graph_mode, seed=args.seed, steps=args.steps)
    t0 = time.perf_counter()
    data, held_out = train_dataset(cfg), eval_dataset(cfg)
    print(f"data ready in {time.perf_counter() - t0:.1f}s")
    state = init_state(cfg)
    t0 = time.perf_counter()
    print("step\tsec\tPCK@0.05\tPCK@0.1\tPCK@0.15\tPCK@0.2\tmPCK\trecovery")
    while state.step < cfg.steps:
        train(state, data, until=min(cfg.steps, state.step + args.eval_every))
        r = evaluate(state.model, held_out)
        row = "\t".join(f"{r[k]:.4f}" for k in (0.05, 0.1, 0.15, 0.2, "mPCK", "recovery"))
        print(f"{state.step}\t{time.perf_counter() - t0:.0f}\t{row}", flush=True)
    if args.save:
        save_checkpoint(state, args.save)


if __name__ == "__main__":
    main()

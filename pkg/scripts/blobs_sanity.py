"""One epoch on two Gaussian colour blobs, then BN recalibration and eval accuracy."""
import argparse
from dataclasses import replace

from cocnn.arch import build, get_preset
from cocnn.train import Schedule, evaluate, recalibrate_bn, set_threads, synthetic_blobs, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n", type=int, default=200)
    args = ap.parse_args()
    limits = set_threads(1)
    for seed in args.seeds:
        net = build(replace(get_preset("coresnet-tiny"), num_classes=2), seed=seed)
        ds = synthetic_blobs(args.n, 2, seed=seed)
        _, hist = train(net, ds, 1, Schedule(0.1), seed=seed, batch_size=16)
        stale = evaluate(net, ds)[1]
        recalibrate_bn(net, ds)
        print(f"seed {seed}: train acc {hist[-1]['train_acc']:.3f}, eval acc {stale:.3f} with running stats, "
              f"{evaluate(net, ds)[1]:.3f} after recalibration")
    limits.restore_original_limits()


if __name__ == "__main__":
    main()

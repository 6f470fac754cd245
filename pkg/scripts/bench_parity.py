"""Time CoResNet presets against the ResNet with the same theoretical MAC count."""
import argparse
import time

import numpy as np

from cocnn.arch import build_preset, network_cost
from cocnn.layers import inference_mode
from cocnn.train import set_threads

PAIRS = [("coresnet-tiny", "resnet-tiny"), ("coresnet50", "resnet50")]


def time_forward(name, batch, repeats, seed=0):
    net = build_preset(name, seed=seed)
    x = np.random.default_rng(seed).standard_normal((batch, *net.input_shape)).astype(net.dtype)
    with inference_mode():
        net.forward(x)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            net.forward(x)
            times.append(time.perf_counter() - t0)
    return network_cost(net).flops * batch, min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--tiny-only", action="store_true")
    args = ap.parse_args()
    limits = set_threads(args.threads)
    for co, std in PAIRS[:1] if args.tiny_only else PAIRS:
        (fa, ta), (fb, tb) = time_forward(co, args.batch, args.repeats), time_forward(std, args.batch, args.repeats)
        print(f"{co}: {fa:,} MAC in {ta * 1e3:.1f} ms | {std}: {fb:,} MAC in {tb * 1e3:.1f} ms | ratio {ta / tb:.2f}")
    limits.restore_original_limits()


if __name__ == "__main__":
    main()

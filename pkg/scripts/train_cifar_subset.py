"""Train CoResNet-tiny on a slice of one CIFAR-10 binary batch and report per-epoch accuracy."""
import argparse
import time

from cocnn.arch import build_preset
from cocnn.train import Schedule, load_cifar10_batch, set_threads, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("data", help="path to data_batch_N.bin")
    ap.add_argument("--limit", type=int, default=5000)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--preset", default="coresnet-tiny")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    limits = set_threads(args.threads)
    ds = load_cifar10_batch(args.data, limit=args.limit)
    net = build_preset(args.preset, seed=0)
    t0 = time.perf_counter()
    _, hist = train(net, ds, args.epochs, Schedule(args.lr), seed=0, batch_size=args.batch)
    for row in hist:
        print(f"epoch {row['epoch']}: loss {row['train_loss']:.4f}, acc {row['train_acc']:.3f}")
    print(f"{time.perf_counter() - t0:.0f}s")
    limits.restore_original_limits()


if __name__ == "__main__":
    main()

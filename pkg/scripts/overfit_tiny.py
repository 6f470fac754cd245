"""Drive CoResNet-tiny to near-zero loss on a fixed batch of eight random images."""
import argparse

from cocnn.arch import build_preset
from cocnn.train import Schedule, evaluate, random_batch, set_threads, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    limits = set_threads(1)
    net = build_preset("coresnet-tiny", seed=args.seed)
    batch = random_batch(8, 10, seed=args.seed)
    print(f"initial loss {evaluate(net, batch, train_mode=True)[0]:.4f}")
    state, _ = train(net, batch, args.steps, Schedule(args.lr, ()), seed=args.seed, batch_size=8,
                     max_steps=args.steps, target_loss=0.01)
    loss, acc = evaluate(net, batch, train_mode=True)
    print(f"after {state.step} steps: loss {loss:.4f}, accuracy {acc:.2f}")
    limits.restore_original_limits()


if __name__ == "__main__":
    main()

"""Print parameter and MAC totals for every preset next to the published reference."""
import argparse

from cocnn.arch import PRESETS, build_preset, network_cost

REFERENCE = {
    "coresnet50": (25.56e6, 4.14e9), "coresnet101": (44.55e6, 7.88e9), "coresnet152": (60.19e6, 11.62e9),
    "coresnet50-os8": (25.56e6, 19.20e9), "coprogan-gen128": (27.21e6, 54.76e9),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("presets", nargs="*", default=sorted(PRESETS))
    args = ap.parse_args()
    print(f"{'preset':<18}{'params':>14}{'MACs':>18}   reference")
    for name in args.presets:
        r = network_cost(build_preset(name, init=False))
        ref = REFERENCE.get(name)
        note = ""
        if ref:
            note = f"{ref[0] / 1e6:.2f}M / {ref[1] / 1e9:.2f}G  ({r.params / ref[0] - 1:+.2%}, {r.flops / ref[1] - 1:+.2%})"
        print(f"{name:<18}{r.params:>14,}{r.flops:>18,}   {note}")


if __name__ == "__main__":
    main()

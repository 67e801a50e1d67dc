#!/usr/bin/env python3
"""Parameter/FLOP sweep over the width, token-size and depth grid, mirroring
the hyperparameter table: rows for every (channel base, hidden size, depth)
combination plus the reference full model.
"""

import argparse
import dataclasses

from protoseg.config import AblationFlags, NetworkConfig
from protoseg.network import count_parameters, estimate_flops

SWEEP = [(m, hs, t) for m in (64, 32, 16) for hs, t in ((384, 12), (256, 8), (192, 4))]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--input-dims", default="128x128x128")
    args = parser.parse_args()
    dims = tuple(int(p) for p in args.input_dims.split("x"))

    backbone = AblationFlags(use_prototypes=False, use_fusion=False)
    print(f"{'base':>5} {'hidden':>7} {'depth':>6} {'params (M)':>11} {'flops (G)':>10}")
    for m, hs, t in SWEEP:
        cfg = dataclasses.replace(NetworkConfig(), channel_base=m, hidden_size=hs,
                                  num_transformer_layers=t, flags=backbone)
        params = count_parameters(cfg) / 1e6
        flops = estimate_flops(cfg, dims) / 1e9
        print(f"{m:>5} {hs:>7} {t:>6} {params:>11.2f} {flops:>10.1f}")

    full = NetworkConfig()
    print(f"\nfull model @ {full.patch_dims}: "
          f"{count_parameters(full) / 1e6:.2f} M params, "
          f"{estimate_flops(full) / 1e9:.1f} G flops")


if __name__ == "__main__":
    main()

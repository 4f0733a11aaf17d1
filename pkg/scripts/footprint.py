#!/usr/bin/env python3
"""Float vs uint8 model: serialized size and median per-sample inference time.

Times are host-dependent; the relative speedup is the comparable figure.
"""

from __future__ import annotations

import argparse

from fedalign.data import synth_public
from fedalign.nn import default_dims, load_checkpoint
from fedalign.protocol import phase0_pretrain
from fedalign.quantize import measure_footprint, quantize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="float checkpoint (.fma); default trains a small model on synthetic data")
    ap.add_argument("--threshold", type=float, default=0.5)
    ap.add_argument("--repeats", type=int, default=100)
    ap.add_argument("--probe", type=int, default=50, help="probe samples per timing run")
    args = ap.parse_args()

    if args.model:
        params = load_checkpoint(args.model)
    else:
        pub = synth_public(2000, 0)
        params = phase0_pretrain(pub.features, pub.labels, default_dims(), 1, 1e-4, 0)
    probe = synth_public(args.probe, 1).features[:, : params.input_dim]
    rep = measure_footprint(params, quantize(params, args.threshold), probe, args.repeats)
    print(f"{'':10s}{'size (KB)':>12s}{'time (ms)':>12s}")
    print(f"{'float':10s}{rep.float_size_bytes / 1024:12.2f}{rep.float_infer_time:12.4f}")
    print(f"{'uint8':10s}{rep.quant_size_bytes / 1024:12.2f}{rep.quant_infer_time:12.4f}")
    print(f"size reduction {100 * (1 - rep.quant_size_bytes / rep.float_size_bytes):.2f}%, "
          f"speedup {rep.speedup_percent:.2f}%")


if __name__ == "__main__":
    main()

"""Four hosts writing through one appliance, then through the alternatives.

Prints a throughput table for the bundled 4x4 scenario: the single in-band
appliance saturates at one link's bandwidth, while out-of-band access and
enough presentation appliances scale with the host count.
"""
import sys
from pathlib import Path

from sanvirt import load_config, run

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "four_by_four.json"
MiB = 1 << 20


def main():
    cfg = load_config(sys.argv[1] if len(sys.argv) > 1 else SCENARIO)
    rows = [("server_level", None), ("subsystem_level", None), ("symmetric", None),
            ("asymmetric", None), ("semi_symmetric", 1), ("semi_symmetric", 2),
            ("semi_symmetric", 4)]
    print(f"{'method':<18}{'appl':>5}{'MiB/s':>10}{'p99 us':>10}  bottleneck")
    for arch, n in rows:
        rep = run(cfg.with_architecture(arch, n))
        busy = rep.link_busy_fraction[rep.bottleneck]
        print(f"{arch:<18}{rep.appliance_count:>5}"
              f"{rep.aggregate_throughput_bytes_per_s / MiB:>10.1f}"
              f"{rep.latency_p99_us:>10}  {rep.bottleneck} ({busy:.2f} busy)")


if __name__ == "__main__":
    main()

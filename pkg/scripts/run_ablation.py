"""Generate the pinned benchmark shards and run the three-row ablation through the CLI.

    python3 scripts/run_ablation.py --work runs/ablation [--config cfg.json]

Checkpoints land in ``--work`` and are reused on a second invocation.
"""
import argparse
import json
import os
import sys

from wpsseg.cli import main


def run(work: str, config: str | None) -> int:
    data = os.path.join(work, "data")
    if not os.path.exists(os.path.join(data, "test.wps")):
        code = main(["gen-data", "--out", data])
        if code:
            return code
    flat = {}
    if config:
        with open(config) as fh:
            flat = json.load(fh)
    flat.update(train_data=os.path.join(data, "train.wps"), val_data=os.path.join(data, "val.wps"),
                test_data=os.path.join(data, "test.wps"), out_dir=work)
    cfg_path = os.path.join(work, "ablation_config.json")
    with open(cfg_path, "w") as fh:
        json.dump(flat, fh, indent=2, sort_keys=True)
    return main(["ablate", "--config", cfg_path])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/ablation")
    ap.add_argument("--config", help="flat JSON overrides (paths are filled in)")
    args = ap.parse_args()
    sys.exit(run(args.work, args.config))

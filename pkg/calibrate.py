"""Scratch calibration driver (not part of the package)."""
import sys, time
import numpy as np, torch
from pivl.config import Config
from pivl import synthgen, pipeline, evaluation

torch.set_num_threads(1)


def run_config(tag, mutate, seeds=(0, 1, 2), probe=False):
    t0 = time.time()
    per = {v: [] for v in ("B", "B+H", "B+P", "B+P+F")}
    probes = {v: [] for v in per}
    for seed in seeds:
        cfg = Config()
        mutate(cfg)
        cfg.train.seed = seed
        cfg.validate()
        split = synthgen.generate_dataset(cfg.data, seed=seed)
        pr_a = pipeline.run_stage1(split, cfg, part_phase=False)
        pr_ab = pipeline.run_stage1(split, cfg, part_phase=True)
        for variant, flags, pr in [("B", frozenset(), pr_a), ("B+H", {"H"}, pr_a),
                                   ("B+P", {"P"}, pr_ab), ("B+P+F", {"P", "F"}, pr_ab)]:
            system = pipeline.run_stage2(split, pr, cfg, flags)
            doc = evaluation.evaluate_system(system, split, probe=probe, seed=seed)
            per[variant].append((doc['cmc']['1'], doc['map']))
            if probe:
                probes[variant].append(doc['consistency']['part_probe_acc'])
    print(f"--- {tag}  ({time.time()-t0:.0f}s)", flush=True)
    bmed = np.median([m for _, m in per["B"]])
    for v, vals in per.items():
        r1s = [r for r, _ in vals]
        maps = [m for _, m in vals]
        extra = f"  probe={np.median(probes[v]):.3f}" if probe else ""
        print(f"  {v:<6} rank1 med={np.median(r1s):.4f}  mAP med={np.median(maps):.4f} "
              f"(d={np.median(maps)-bmed:+.4f})  maps={[f'{m:.3f}' for m in maps]} "
              f"r1s={[f'{r:.3f}' for r in r1s]}{extra}",
              flush=True)
    return per


def wide(c):
    c.encoder.stage_channels = (32, 64, 128)


if __name__ == "__main__":
    grids = {
        "noocc_c612": lambda c: (wide(c),
                                 setattr(c.data, "clutter_blobs_min", 6),
                                 setattr(c.data, "clutter_blobs_max", 12),
                                 setattr(c.data, "occluders_min", 0),
                                 setattr(c.data, "occluders_max", 0)),
        "occ01_c612": lambda c: (wide(c),
                                 setattr(c.data, "clutter_blobs_min", 6),
                                 setattr(c.data, "clutter_blobs_max", 12),
                                 setattr(c.data, "occluders_min", 0),
                                 setattr(c.data, "occluders_max", 1)),
        "occ01_c816": lambda c: (wide(c),
                                 setattr(c.data, "clutter_blobs_min", 8),
                                 setattr(c.data, "clutter_blobs_max", 16),
                                 setattr(c.data, "occluders_min", 0),
                                 setattr(c.data, "occluders_max", 1)),
        "occ02_c816": lambda c: (wide(c),
                                 setattr(c.data, "clutter_blobs_min", 8),
                                 setattr(c.data, "clutter_blobs_max", 16),
                                 setattr(c.data, "occluders_min", 0),
                                 setattr(c.data, "occluders_max", 2)),

        "occ01_c612_big": lambda c: (setattr(c.encoder, "stage_channels", (48, 96, 192)),
                                 setattr(c.data, "clutter_blobs_min", 6),
                                 setattr(c.data, "clutter_blobs_max", 12),
                                 setattr(c.data, "occluders_min", 0),
                                 setattr(c.data, "occluders_max", 1)),
    }
    names = sys.argv[1:] or list(grids)
    for name in names:
        run_config(name, grids[name])

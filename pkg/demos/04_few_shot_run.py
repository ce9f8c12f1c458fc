"""Base training, k-shot fine-tuning and evaluation on the synthetic shapes task.

By default this runs a small budget (about a minute). ``--protocol trend``
uses the schedule behind the k-shot trend check (a few minutes per k).
"""

import argparse
import copy
import time

from aaf import preset
from aaf.harness import DEFAULT_SPLIT, PROTOCOLS, evaluate, finetune, register_novel, train_base
from aaf.harness.data import class_name
from aaf.harness.training import with_schedule

parser = argparse.ArgumentParser()
parser.add_argument("--preset", default="frw")
parser.add_argument("--protocol", choices=sorted(PROTOCOLS), default=None)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

if args.protocol:
    schedule = PROTOCOLS[args.protocol]
else:
    schedule = with_schedule(PROTOCOLS["trend"], base_episodes=60, finetune_updates=200, eval_scenes=40)

print("base classes: ", [class_name(c) for c in DEFAULT_SPLIT.base])
print("novel classes:", [class_name(c) for c in DEFAULT_SPLIT.novel])

t0 = time.time()
base = train_base(preset(args.preset), DEFAULT_SPLIT, schedule, seed=args.seed)
print(f"base training: {schedule.base_episodes} episodes in {time.time() - t0:.0f}s")

for k in (1, 5):
    detector = copy.deepcopy(base)
    registry = register_novel(DEFAULT_SPLIT, k, args.seed)
    before = evaluate(detector, DEFAULT_SPLIT, k, (0,), registry, schedule.eval_scenes)
    finetune(detector, DEFAULT_SPLIT, k, schedule, args.seed, registry)
    after = evaluate(detector, DEFAULT_SPLIT, k, (0, 1), registry, schedule.eval_scenes)
    print(f"k={k}: novel mAP {before.novel_map:.3f} -> {after.novel_map:.3f} (+/- {after.novel_std:.3f}), "
          f"base mAP {before.base_map:.3f} -> {after.base_map:.3f}")

#!/usr/bin/env python3
# Copyright 2026 The Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Grid search for the default cost parameters.

Runs ``moespec simulate`` with step dumps on the default model over the tree
sizes 3..255, then re-prices the recorded steps under each candidate
bytes_shared. bytes_expert is the unit; the draft step cost and selection
overhead are inputs. The whole (bytes_shared, draft_step_cost) grid is
printed, so how robust the peak is can be read straight off the table.

A candidate is admissible when

  * expert bytes per layer outweigh shared bytes per layer by roughly 4:1
    in the verify pass at M=63, and
  * unbudgeted speedup peaks strictly inside the tree-size range.

Usage:
  scripts/derive_cost_params.py --moespec build/tools/moespec
  scripts/derive_cost_params.py --steps existing/steps.jsonl
"""

import argparse
import collections
import itertools
import json
import re
import subprocess
import sys
import tempfile
from pathlib import Path

TREE_SIZES = [3, 7, 15, 31, 63, 127, 255]
RATIO_TARGET = 4.0
RATIO_TOL = 1.0
OVERHEAD = 0.025


def run_simulate(binary, out_dir, seeds, gen_len):
    config = {
        "tree_sizes": TREE_SIZES,
        "budgets": [32],
        "methods": ["router"],
        "policies": ["substitution"],
        "dump_steps": True,
    }
    if seeds:
        config["seeds"] = seeds
    if gen_len:
        config["gen_len"] = gen_len
    cfg_path = Path(out_dir) / "derive.json"
    cfg_path.write_text(json.dumps(config))
    subprocess.run([binary, "simulate", "--config", str(cfg_path), "--out-dir", str(out_dir)],
                   check=True, stdout=subprocess.DEVNULL)
    return Path(out_dir) / "steps.jsonl"


def load_steps(path):
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])["header"]
    runs = collections.defaultdict(list)
    for line in lines[1:]:
        s = json.loads(line)
        runs[(s["label"], s["seed"])].append(s)
    return header, runs


def full_tree_size(label):
    m = re.fullmatch(r"spec_full/M=(\d+)", label)
    return int(m.group(1)) if m else None


def speedup(steps, ar_cost, shared, draft, expert=1.0):
    ar_total = 0.0
    spec_total = 0.0
    for s in steps:
        ar_total += s["emitted"] * ar_cost
        verify = shared + expert * sum(s["unique_experts"])
        if s["budgeted"]:
            verify *= 1.0 + OVERHEAD
        spec_total += verify + draft * s["tree_levels"]
    return ar_total / spec_total


def evaluate(header, runs, shared, draft):
    model = header["config"]["model"]
    layers, k = model["num_layers"], model["top_k"]
    ar_cost = shared + layers * k
    by_size = collections.defaultdict(list)
    unique_63 = []
    for (label, _), steps in runs.items():
        m = full_tree_size(label)
        if m is None:
            continue
        by_size[m].append(speedup(steps, ar_cost, shared, draft))
        if m == 63:
            unique_63 += [u for s in steps for u in s["unique_experts"]]
    curve = {m: sum(v) / len(v) for m, v in sorted(by_size.items())}
    ratio = (sum(unique_63) / len(unique_63)) / (shared / layers)
    sizes = list(curve)
    peak = max(sizes, key=lambda m: curve[m])
    interior = sizes[0] < peak < sizes[-1]
    return curve, ratio, peak, interior


def main(argv):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--moespec", default="build/tools/moespec")
    ap.add_argument("--draft-step-cost", type=float, default=2.0)
    ap.add_argument("--steps", help="reuse an existing steps.jsonl instead of simulating")
    ap.add_argument("--seeds", type=int, nargs="+", help="override the default seeds")
    ap.add_argument("--gen-len", type=int, help="override the default generation length")
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        steps_path = args.steps or run_simulate(args.moespec, tmp, args.seeds, args.gen_len)
        header, runs = load_steps(steps_path)

    shared_grid = [4, 8, 16, 24, 32, 48, 64]
    draft_grid = sorted({0.5, 1.0, 2.0, 4.0, 8.0, args.draft_step_cost})
    admissible = []
    print(f"{'shared':>6} {'draft':>5} {'ratio@63':>8} {'peak':>5}  curve")
    for shared, draft in itertools.product(shared_grid, draft_grid):
        curve, ratio, peak, interior = evaluate(header, runs, shared, draft)
        ok = interior and abs(ratio - RATIO_TARGET) <= RATIO_TOL
        if ok and draft == args.draft_step_cost:
            admissible.append((abs(ratio - RATIO_TARGET), shared, draft))
        pts = " ".join(f"{m}:{v:.3f}" for m, v in curve.items())
        print(f"{shared:>6} {draft:>5g} {ratio:>8.2f} {peak:>5}{' *' if ok else '  '} {pts}")

    if not admissible:
        print("no admissible parameters in the grid")
        return 1
    _, shared, draft = min(admissible)
    print(f"chosen: bytes_expert=1 bytes_shared={shared} draft_step_cost={draft} "
          f"selection_overhead_frac={OVERHEAD}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))

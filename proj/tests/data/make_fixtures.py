#!/usr/bin/env python3
"""Regenerates the phrase fixtures in this directory.

Each concept is a unit axis in a 16-d embedding space; a phrase embedding is
its concept axis plus small uniform jitter. Every head gets 10 phrases whose
concept counts are planted, so head entropies are known exactly.
"""
import json
import random
from pathlib import Path

CONCEPTS = ["color", "shape", "texture", "object", "location", "style",
            "number", "material", "emotion", "action", "scene", "pattern"]
DIM = 16
HERE = Path(__file__).resolve().parent


def embed(rng, concept):
    v = [rng.uniform(-0.05, 0.05) for _ in range(DIM)]
    v[CONCEPTS.index(concept)] += 1.0
    return [round(x, 6) for x in v]


def planted_counts(rng, layers, heads, fixed):
    plan = {}
    for layer in layers:
        for head in range(heads):
            if (layer, head) in fixed:
                plan[(layer, head)] = fixed[(layer, head)]
                continue
            k = rng.choice([2, 3, 4, 5, 6, 8, 10])
            picks = rng.sample(CONCEPTS, k)
            counts = {c: 1 for c in picks}
            for _ in range(10 - k):
                c = rng.choice(picks)
                counts[c] += 1
            plan[(layer, head)] = counts
    return plan


def write(name, plan, seed):
    rng = random.Random(seed)
    lines = []
    for (layer, head), counts in sorted(plan.items()):
        i = 0
        for concept in CONCEPTS:
            for _ in range(counts.get(concept, 0)):
                lines.append({"layer": layer, "head": head,
                              "phrase": f"{concept} phrase {i} of head {layer}.{head}",
                              "embedding": embed(rng, concept)})
                i += 1
    (HERE / f"{name}.jsonl").write_text("".join(json.dumps(l, sort_keys=True) + "\n" for l in lines))

    # Cluster ids follow size (descending) then first record position.
    first, size = {}, {}
    for pos, l in enumerate(lines):
        c = l["phrase"].split()[0]
        first.setdefault(c, pos)
        size[c] = size.get(c, 0) + 1
    order = sorted(size, key=lambda c: (-size[c], first[c]))
    ids = {c: i for i, c in enumerate(order)}
    core = {str(ids[c]): c for c in ["color", "shape", "texture", "object", "location"] if c in ids}
    labels = {str(i): c for c, i in ids.items() if str(i) not in core}
    analysis = {"core_attribute_map": core, "cluster_labels": labels}
    (HERE / f"{name}_config.json").write_text(json.dumps({"analysis": analysis}, indent=2, sort_keys=True) + "\n")
    plan_out = [{"layer": l, "head": h, "counts": {str(ids[c]): n for c, n in sorted(cnt.items())}}
                for (l, h), cnt in sorted(plan.items())]
    (HERE / f"{name}_plan.json").write_text(json.dumps({"heads": plan_out, "cluster_ids": ids}, indent=2, sort_keys=True) + "\n")


def main():
    rng = random.Random(20240611)
    fixed = {
        (12, 10): {"color": 10},
        (11, 3): {"shape": 10},
        (10, 5): {"texture": 9, "style": 1},
        (12, 2): {"object": 9, "location": 1},
        (11, 7): {"location": 10},
        (10, 0): {"number": 10},
        (12, 6): {"color": 8, "shape": 2},
        (11, 11): {"style": 10},
    }
    write("phrases", planted_counts(rng, [10, 11, 12], 12, fixed), 7)

    toy_fixed = {
        (3, 1): {"color": 10}, (4, 2): {"shape": 10}, (5, 1): {"texture": 9, "pattern": 1},
        (6, 2): {"object": 10}, (6, 1): {"location": 9, "scene": 1},
        (3, 0): {c: 1 for c in CONCEPTS[:10]}, (5, 0): {c: 1 for c in CONCEPTS[2:12]},
    }
    write("toy_phrases", planted_counts(random.Random(99), [3, 4, 5, 6], 4, toy_fixed), 11)


if __name__ == "__main__":
    main()

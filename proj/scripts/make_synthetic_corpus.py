#!/usr/bin/env python3
"""Generate a synthetic CodeSearchNet-style corpus of Python functions.

Each line is a JSON record with the CodeSearchNet field names (repo,
func_name, language, code, docstring, url). Documentation paraphrases the
operation, the entity and the attribute a function works on, so a model
has to connect NL words to identifiers in the code.

Besides regular pairs the output mixes in records that the filter demotes
(documentation shorter than three words) or rejects (two-line functions,
names containing "test").

    make_synthetic_corpus.py --pairs 5000 --seed 1 > corpus.jsonl
"""

import argparse
import json
import random

ENTITIES = [
    "user", "order", "product", "invoice", "account", "file", "node", "record",
    "task", "event", "message", "item", "customer", "employee", "student",
    "book", "song", "city", "device", "ticket", "vehicle", "server", "job",
    "sensor", "player", "photo", "course", "patient", "flight", "package",
]

ATTRIBUTES = [
    "price", "age", "score", "size", "weight", "count", "balance", "duration",
    "rating", "length", "salary", "distance", "priority", "timestamp",
    "height", "temperature", "level", "quantity", "cost", "speed",
]


def plural(word):
    if word.endswith("y") and word[-2] not in "aeiou":
        return word[:-1] + "ies"
    if word.endswith(("s", "x", "ch", "sh")):
        return word + "es"
    return word + "s"


# Each operation: (name stem, docstring templates, code builder).
# Templates use {e} entity, {es} plural entity, {a} attribute.

def code_max(fn, e, es, a, rng):
    v = rng.choice(["best", "top", "result", "winner"])
    return (f"def {fn}({es}):\n"
            f"    {v} = {es}[0]\n"
            f"    for {e} in {es}:\n"
            f"        if {e}.{a} > {v}.{a}:\n"
            f"            {v} = {e}\n"
            f"    return {v}\n")


def code_max_builtin(fn, e, es, a, rng):
    return (f"def {fn}({es}):\n"
            f"    if not {es}:\n"
            f"        return None\n"
            f"    return max({e}.{a} for {e} in {es})\n")


def code_min(fn, e, es, a, rng):
    v = rng.choice(["best", "low", "result", "smallest"])
    return (f"def {fn}({es}):\n"
            f"    {v} = {es}[0]\n"
            f"    for {e} in {es}:\n"
            f"        if {e}.{a} < {v}.{a}:\n"
            f"            {v} = {e}\n"
            f"    return {v}\n")


def code_min_builtin(fn, e, es, a, rng):
    return (f"def {fn}({es}):\n"
            f"    if not {es}:\n"
            f"        return None\n"
            f"    return min({e}.{a} for {e} in {es})\n")


def code_sum(fn, e, es, a, rng):
    v = rng.choice(["total", "acc", "s"])
    return (f"def {fn}({es}):\n"
            f"    {v} = 0\n"
            f"    for {e} in {es}:\n"
            f"        {v} += {e}.{a}\n"
            f"    return {v}\n")


def code_mean(fn, e, es, a, rng):
    return (f"def {fn}({es}):\n"
            f"    if not {es}:\n"
            f"        return 0.0\n"
            f"    total = sum({e}.{a} for {e} in {es})\n"
            f"    return total / len({es})\n")


def code_greater(fn, e, es, a, rng):
    t = rng.choice(["limit", "threshold", "bound", "value"])
    return (f"def {fn}({es}, {t}):\n"
            f"    result = []\n"
            f"    for {e} in {es}:\n"
            f"        if {e}.{a} > {t}:\n"
            f"            result.append({e})\n"
            f"    return result\n")


def code_less(fn, e, es, a, rng):
    t = rng.choice(["limit", "threshold", "bound", "value"])
    return (f"def {fn}({es}, {t}):\n"
            f"    result = []\n"
            f"    for {e} in {es}:\n"
            f"        if {e}.{a} < {t}:\n"
            f"            result.append({e})\n"
            f"    return result\n")


def code_sort_asc(fn, e, es, a, rng):
    return (f"def {fn}({es}):\n"
            f"    ordered = list({es})\n"
            f"    ordered.sort(key=lambda {e}: {e}.{a})\n"
            f"    return ordered\n")


def code_sort_desc(fn, e, es, a, rng):
    return (f"def {fn}({es}):\n"
            f"    ordered = list({es})\n"
            f"    ordered.sort(key=lambda {e}: {e}.{a}, reverse=True)\n"
            f"    return ordered\n")


def code_count(fn, e, es, a, rng):
    return (f"def {fn}({es}, target):\n"
            f"    n = 0\n"
            f"    for {e} in {es}:\n"
            f"        if {e}.{a} == target:\n"
            f"            n += 1\n"
            f"    return n\n")


def code_group(fn, e, es, a, rng):
    return (f"def {fn}({es}):\n"
            f"    groups = {{}}\n"
            f"    for {e} in {es}:\n"
            f"        groups.setdefault({e}.{a}, []).append({e})\n"
            f"    return groups\n")


def code_update(fn, e, es, a, rng):
    return (f"def {fn}({e}, new_{a}):\n"
            f"    if new_{a} is None:\n"
            f"        raise ValueError('{a} is required')\n"
            f"    {e}.{a} = new_{a}\n"
            f"    return {e}\n")


def code_normalize(fn, e, es, a, rng):
    return (f"def {fn}({es}):\n"
            f"    peak = max({e}.{a} for {e} in {es})\n"
            f"    for {e} in {es}:\n"
            f"        {e}.{a} = {e}.{a} / peak\n"
            f"    return {es}\n")


OPERATIONS = [
    ("max", ["find_max_{a}", "{e}_with_max_{a}", "get_max_{a}"],
     ["Return the {e} with the max {a}.",
      "Find the {e} that has the max {a} among all {es}.",
      "Get the max {a} from a list of {es}.",
      "Select the {e} whose {a} is the max value."],
     [code_max, code_max_builtin]),
    ("maximize", ["maximize_{a}", "pick_{e}_maximizing_{a}"],
     ["Choose the {e} that would maximize the {a}.",
      "Pick one of the {es} to maximize total {a}."],
     [code_max]),
    ("min", ["find_min_{a}", "{e}_with_min_{a}", "get_min_{a}"],
     ["Return the {e} with the min {a}.",
      "Find the {e} that has the min {a} among all {es}.",
      "Get the min {a} from a list of {es}.",
      "Select the {e} whose {a} is the min value."],
     [code_min, code_min_builtin]),
    ("minimize", ["minimize_{a}", "pick_{e}_minimizing_{a}"],
     ["Choose the {e} that would minimize the {a}.",
      "Pick one of the {es} to minimize total {a}."],
     [code_min]),
    ("sum", ["total_{a}", "sum_{e}_{a}", "{e}_{a}_total"],
     ["Compute the total {a} of all {es}.",
      "Add up the {a} of every {e} in the list.",
      "Sum the {a} values over a collection of {es}."],
     [code_sum]),
    ("mean", ["average_{a}", "mean_{e}_{a}"],
     ["Compute the average {a} of the given {es}.",
      "Return the mean {a} over all {es} in the list."],
     [code_mean]),
    ("greater", ["{es}_above_{a}", "filter_{e}_by_high_{a}"],
     ["Keep only {es} whose {a} is greater than the limit.",
      "Return every {e} with a {a} greater than a threshold."],
     [code_greater]),
    ("less", ["{es}_below_{a}", "filter_{e}_by_low_{a}"],
     ["Keep only {es} whose {a} is less than the limit.",
      "Return every {e} with a {a} less than a threshold."],
     [code_less]),
    ("sort", ["sort_{es}_by_{a}", "order_{es}_by_{a}"],
     ["Sort the {es} by {a} in ascending order.",
      "Order a list of {es} from lowest to highest {a}."],
     [code_sort_asc]),
    ("rsort", ["rank_{es}_by_{a}", "sort_{es}_by_{a}_desc"],
     ["Rank the {es} by {a} from highest to lowest.",
      "Sort the {es} by {a} in descending order."],
     [code_sort_desc]),
    ("count", ["count_{es}_with_{a}", "num_{es}_by_{a}"],
     ["Count how many {es} have the given {a}.",
      "Return the number of {es} matching a target {a}."],
     [code_count]),
    ("group", ["group_{es}_by_{a}", "bucket_{es}_by_{a}"],
     ["Group the {es} into buckets keyed by {a}.",
      "Build a mapping from {a} to the {es} sharing it."],
     [code_group]),
    ("update", ["set_{e}_{a}", "update_{e}_{a}"],
     ["Update the {a} of a single {e} and return it.",
      "Set a new {a} on the {e}, rejecting missing values."],
     [code_update]),
    ("normalize", ["normalize_{e}_{a}", "scale_{es}_{a}"],
     ["Scale every {e} {a} into the unit range.",
      "Normalize the {a} of all {es} by the largest one."],
     [code_normalize]),
]


def make_record(rng, idx, short_doc=False):
    op, names, docs, builders = rng.choice(OPERATIONS)
    e = rng.choice(ENTITIES)
    a = rng.choice(ATTRIBUTES)
    es = plural(e)
    fn = rng.choice(names).format(e=e, es=es, a=a)
    code = rng.choice(builders)(fn, e, es, a, rng)
    doc = rng.choice(docs).format(e=e, es=es, a=a)
    if rng.random() < 0.3:
        doc += "\n\n" + rng.choice([
            f"Raises IndexError when the list of {es} is empty.",
            f"The input list of {es} is not modified.",
            f"Runs in linear time in the number of {es}.",
        ])
    if short_doc:
        doc = rng.choice(["", "Helper.", "TODO", f"{fn} helper"])
    repo = f"synthetic/{rng.choice(['alpha', 'beta', 'gamma', 'delta'])}"
    return {
        "repo": repo,
        "func_name": fn,
        "language": "python",
        "code": code,
        "docstring": doc,
        "url": f"https://example.invalid/{repo}/{idx}#{fn}",
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=5000)
    ap.add_argument("--unimodal", type=int, default=None,
                    help="records with too-short documentation (default pairs/4)")
    ap.add_argument("--rejects", type=int, default=None,
                    help="records the filter rejects (default pairs/50)")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    unimodal = args.pairs // 4 if args.unimodal is None else args.unimodal
    rejects = args.pairs // 50 if args.rejects is None else args.rejects

    kinds = ["pair"] * args.pairs + ["short"] * unimodal + ["reject"] * rejects
    rng.shuffle(kinds)
    seen = set()
    idx = 0
    for kind in kinds:
        while True:
            rec = make_record(rng, idx, short_doc=(kind == "short"))
            key = (rec["func_name"], rec["docstring"])
            if key not in seen:
                seen.add(key)
                break
        if kind == "reject":
            if rng.random() < 0.5:
                rec["func_name"] = "test_" + rec["func_name"]
            else:
                rec["code"] = f"def {rec['func_name']}(x):\n    return x\n"
        idx += 1
        print(json.dumps(rec, sort_keys=True))


if __name__ == "__main__":
    main()

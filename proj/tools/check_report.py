#!/usr/bin/env python3
"""Validates report.json against docs/report-schema.json and recomputes the
derived numbers from the per-class fields.

usage: check_report.py REPORT [--schema PATH] [--tasks N]
"""
import argparse
import json
import math
import pathlib
import sys

import jsonschema

TOL = 1e-12


def close(a, b):
    return math.isclose(a, b, rel_tol=0.0, abs_tol=TOL)


def check_run(run, schedule, errors):
    tag = f"seed {run['seed']}"
    tasks = run["tasks"]
    matrix = run["accuracy_matrix"]
    if len(matrix) != len(tasks):
        errors.append(f"{tag}: {len(matrix)} matrix rows for {len(tasks)} tasks")
    for t, row in enumerate(matrix):
        if len(row) != t + 1:
            errors.append(f"{tag}: matrix row {t + 1} has {len(row)} entries, expected {t + 1}")
    for t, task in enumerate(tasks):
        acc = {int(k): v for k, v in task["class_accuracy"].items()}
        cnt = {int(k): v for k, v in task["class_test_counts"].items()}
        seen = sorted(c for tau in schedule[: t + 1] for c in tau)
        if sorted(task["seen_classes"]) != seen or sorted(acc) != seen or sorted(cnt) != seen:
            errors.append(f"{tag} task {t + 1}: class keys do not match the schedule prefix {seen}")
            continue
        total = sum(cnt.values())
        pooled = sum(acc[c] * cnt[c] for c in seen) / total
        if not close(pooled, task["average_accuracy"]):
            errors.append(f"{tag} task {t + 1}: average_accuracy {task['average_accuracy']} != recomputed {pooled}")
        for tau, classes in enumerate(schedule[: t + 1]):
            n = sum(cnt[c] for c in classes)
            a = sum(acc[c] * cnt[c] for c in classes) / n
            if not close(a, matrix[t][tau]):
                errors.append(f"{tag}: A[{t + 1}][{tau + 1}] = {matrix[t][tau]} != recomputed {a}")
    if not close(tasks[-1]["average_accuracy"], run["final_average_accuracy"]):
        errors.append(f"{tag}: final_average_accuracy does not match the last task")
    # Forgetting: mean over classes seen before the last task of the largest
    # drop from an earlier accuracy to the final one.
    final = {int(k): v for k, v in tasks[-1]["class_accuracy"].items()}
    old = sorted({c for tau in schedule[: len(tasks) - 1] for c in tau})
    if old:
        drops = []
        for c in old:
            earlier = [float(task["class_accuracy"][str(c)]) for task in tasks[:-1] if str(c) in task["class_accuracy"]]
            drops.append(max(earlier) - final[c])
        f = sum(drops) / len(drops)
        if not close(f, run["forgetting"]):
            errors.append(f"{tag}: forgetting {run['forgetting']} != recomputed {f}")


def main():
    here = pathlib.Path(__file__).resolve().parent
    ap = argparse.ArgumentParser()
    ap.add_argument("report")
    ap.add_argument("--schema", default=str(here.parent / "docs" / "report-schema.json"))
    ap.add_argument("--tasks", type=int, help="expected number of tasks")
    args = ap.parse_args()

    report = json.loads(pathlib.Path(args.report).read_text())
    schema = json.loads(pathlib.Path(args.schema).read_text())
    try:
        jsonschema.validate(report, schema)
    except jsonschema.ValidationError as e:
        print(f"schema violation at {'/'.join(map(str, e.absolute_path))}: {e.message}")
        return 1

    errors = []
    schedule = report["schedule"]
    for run in report["runs"]:
        check_run(run, schedule, errors)
        if args.tasks is not None and len(run["accuracy_matrix"]) != args.tasks:
            errors.append(f"seed {run['seed']}: {len(run['accuracy_matrix'])} tasks, expected {args.tasks}")
    runs = report["runs"]
    mean_final = sum(r["final_average_accuracy"] for r in runs) / len(runs)
    if not close(mean_final, report["mean"]["final_average_accuracy"]):
        errors.append("mean final_average_accuracy does not match the runs")
    for line in errors:
        print(line)
    if not errors:
        print(f"ok: {len(runs)} run(s), {len(schedule)} tasks")
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main())

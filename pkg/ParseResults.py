import argparse
import csv
import glob
import logging
import os

from experiment_logger import read_results

# Leading columns, when present; every other column follows in sorted order.
KEY_COLUMNS = ["kind", "command", "unit", "point", "seed", "method", "split"]
SKIPPED_SECTIONS = ("config",)


def flatten(payload, prefix=""):
    """Scalar leaves of a nested payload under dotted keys. Lists and the config echo are left out."""
    row = {}
    for key, value in payload.items():
        name = f"{prefix}{key}"
        if not prefix and key in SKIPPED_SECTIONS:
            continue
        if isinstance(value, dict):
            row.update(flatten(value, f"{name}."))
        elif isinstance(value, (list, tuple)):
            continue
        else:
            row[name] = value
    return row


def result_rows(payloads):
    rows = [flatten(p) for p in payloads]
    seen = set().union(*(row.keys() for row in rows)) if rows else set()
    columns = [c for c in KEY_COLUMNS if c in seen] + sorted(seen - set(KEY_COLUMNS))
    return columns, rows


def results_to_csv(jsonl_path, csv_path=None):
    csv_path = csv_path or os.path.splitext(jsonl_path)[0] + ".csv"
    columns, rows = result_rows(read_results(jsonl_path))
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    logging.info(f"[results] {len(rows)} rows, {len(columns)} columns -> {csv_path}")
    return csv_path


def aggregate_rows(csv_path):
    with open(csv_path, newline="") as f:
        return [row for row in csv.DictReader(f) if row.get("kind") == "aggregate"]


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    parser = argparse.ArgumentParser(description="Flatten results-*.jsonl files into CSV tables.")
    parser.add_argument('directory', nargs='?', default="results", help='Directory holding results-*.jsonl files.')
    args = parser.parse_args()
    paths = sorted(glob.glob(os.path.join(args.directory, "results-*.jsonl")))
    if not paths:
        logging.warning(f"No results-*.jsonl files found in {args.directory}")
    for path in paths:
        results_to_csv(path)

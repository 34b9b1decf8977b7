import csv
import json
import logging
import math
import os
import threading
import time
from datetime import datetime

import numpy as np

PROGRESS_HEADER = ["Timestamp", "UnitsDone", "UnitsFailed"]


def to_jsonable(value):
    """Plain JSON types; numpy scalars and arrays are unwrapped, non-finite floats become None."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _timestamp():
    return datetime.now().strftime('%Y-%m-%d %H:%M:%S.%f')[:-3]


class ExperimentLogger:
    """Single collector for the results of a grid of (point, seed) units.

    Workers report through record/record_failure; a daemon thread prints progress and
    appends it to a CSV log. write_results orders records by unit index and rewrites
    the JSON lines file, so a rerun reproduces the same payloads.
    """

    def __init__(self, command, total_units, out_dir, log_interval_sec=10.0,
                 results_prefix="results", progress_prefix="progress"):
        self.command = command
        self.total_units = total_units
        self.log_interval_sec = log_interval_sec
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.results_filename = os.path.join(out_dir, f"{results_prefix}-{command}.jsonl")
        self.progress_filename = os.path.join(out_dir, f"{progress_prefix}-{command}.csv")

        self.progress_state = {"done": 0, "failed": 0}
        self._records = []
        self._failures = []
        self._lock = threading.Lock()
        self._stop_event = threading.Event()
        self.logger_thread = None

    def record(self, unit, payload):
        with self._lock:
            self._records.append((unit, to_jsonable(payload)))
            self.progress_state["done"] += 1

    def record_failure(self, unit, description, error):
        logging.error(f"[{self.command}] Unit {unit} ({description}) failed: {type(error).__name__}: {error}")
        with self._lock:
            self._failures.append((unit, {"kind": "failure", "unit": unit, "description": to_jsonable(description),
                                          "error": f"{type(error).__name__}: {error}",
                                          "exit_code": getattr(error, "exit_code", 1)}))
            self.progress_state["failed"] += 1

    def get_current_progress(self):
        with self._lock:
            return self.progress_state["done"], self.progress_state["failed"]

    def payloads(self):
        """Successful payloads in unit order."""
        with self._lock:
            return [payload for _, payload in sorted(self._records, key=lambda item: item[0])]

    def failures(self):
        with self._lock:
            return [payload for _, payload in sorted(self._failures, key=lambda item: item[0])]

    def _log_progress(self):
        done, failed = self.get_current_progress()
        timestamp = _timestamp()
        logging.info(f"[{self.command}] Progress - Time: {timestamp} | Done: {done}/{self.total_units} | Failed: {failed}")
        try:
            is_new = not os.path.exists(self.progress_filename) or os.path.getsize(self.progress_filename) == 0
            with open(self.progress_filename, "a", newline="") as f:
                writer = csv.writer(f)
                if is_new:
                    writer.writerow(PROGRESS_HEADER)
                writer.writerow([timestamp, done, failed])
        except OSError as e:
            logging.error(f"[{self.command}] Error writing progress log {self.progress_filename}: {e}")

    def _logging_loop(self):
        last_log_time = time.time()
        while not self._stop_event.is_set():
            done, failed = self.get_current_progress()
            if done + failed >= self.total_units:
                break
            wait = max(0.0, min(self.log_interval_sec - (time.time() - last_log_time), 1.0))
            if self._stop_event.wait(wait):
                break
            if time.time() - last_log_time >= self.log_interval_sec:
                self._log_progress()
                last_log_time = time.time()
        self._log_progress()

    def start(self):
        if self.logger_thread is not None and self.logger_thread.is_alive():
            logging.warning(f"[{self.command}] Logger thread already running.")
            return
        self._stop_event.clear()
        self.logger_thread = threading.Thread(target=self._logging_loop, daemon=True)
        self.logger_thread.start()

    def stop(self):
        self._stop_event.set()
        if self.logger_thread and self.logger_thread.is_alive():
            self.logger_thread.join(timeout=self.log_interval_sec + 5)
            if self.logger_thread.is_alive():
                logging.warning(f"[{self.command}] Logger thread did not stop in time.")

    def write_results(self, extra_payloads=()):
        """Rewrite the JSON lines file: unit records, then failures, then extra payloads (aggregates)."""
        lines = self.payloads() + self.failures() + [to_jsonable(p) for p in extra_payloads]
        with open(self.results_filename, "w") as f:
            for payload in lines:
                f.write(json.dumps({"timestamp": _timestamp(), "payload": payload}, sort_keys=True) + "\n")
        logging.info(f"[{self.command}] Wrote {len(lines)} records to {self.results_filename}")
        return self.results_filename


def read_results(path):
    """Payloads of a JSON lines results file, skipping malformed lines with a warning."""
    payloads = []
    with open(path) as f:
        for line_num, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payloads.append(json.loads(line)["payload"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                logging.warning(f"[results] Skipping malformed line {line_num} in {path}: {e}")
    return payloads

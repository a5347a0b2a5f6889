import json
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@dataclass
class ToyRun:
    out: Path
    seconds: float
    stdout: str

    @property
    def history(self) -> list[dict]:
        return [json.loads(line) for line in (self.out / "history.jsonl").read_text().splitlines()]


def run_cli(*args, check=True):
    return subprocess.run([sys.executable, "-m", "mobilesal", *map(str, args)], capture_output=True,
                          text=True, check=check)


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    """Two independent full ``train --toy --seed 7 --threads 1`` runs (300 epochs each)."""
    runs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"toy{k}")
        t0 = time.perf_counter()
        proc = run_cli("train", "--toy", "--seed", 7, "--threads", 1, "--out", out)
        runs.append(ToyRun(out, time.perf_counter() - t0, proc.stdout))
    return runs

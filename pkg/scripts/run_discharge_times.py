"""Discharge-horizon scenarios: co-design for 55 to 220 hour windows."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

for hours in (55, 110, 165, 220):
    subprocess.run([
        sys.executable, "-m", "lhtes.cli", "optimize",
        "--config", str(ROOT / "configs" / f"desk_time_{hours}h.ini"),
        "--out-dir", str(ROOT / "results" / f"time_{hours}h"),
    ], check=True)

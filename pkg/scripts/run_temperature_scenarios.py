"""Operating-temperature scenarios: co-design at three initial temperatures."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

for t_initial in (350, 450, 550):
    subprocess.run([
        sys.executable, "-m", "lhtes.cli", "optimize",
        "--config", str(ROOT / "configs" / f"desk_temp_{t_initial}.ini"),
        "--out-dir", str(ROOT / "results" / f"temp_{t_initial}"),
    ], check=True)

"""Cost/performance trade-off: co-design across conductor budgets."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

subprocess.run([
    sys.executable, "-m", "lhtes.cli", "optimize",
    "--config", str(ROOT / "configs" / "desk_pareto.ini"),
    "--sweep-budget", "150,300,600",
    "--out-dir", str(ROOT / "results" / "pareto"),
], check=True)

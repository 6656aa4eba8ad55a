"""Regenerate the bundled material embeddings (decoders + atlases).

Writes into src/lhtes/data/models/, matching the artifacts checked into
the repository (seed 0, 50k epochs)."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "src" / "lhtes" / "data"

for kind in ("hcm", "pcm"):
    cmd = [
        sys.executable, "-m", "lhtes.cli", "train-vae",
        "--kind", kind,
        "--db", str(DATA / f"{kind}.csv"),
        "--out", str(DATA / "models" / f"{kind}_vae.bin"),
        "--atlas-out", str(DATA / "models" / f"{kind}_atlas.csv"),
        "--seed", "0",
        "--epochs", "50000",
    ]
    print(" ".join(cmd))
    subprocess.run(cmd, check=True)

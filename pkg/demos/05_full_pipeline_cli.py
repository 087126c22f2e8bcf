"""The whole chain through the CLI, twice, to show resumability.

Writes a TOML config, runs ``npshape run``, inspects the manifest, deletes
one artifact, and re-runs: only the stage that produced it recomputes.
"""

import json
import subprocess
import sys
from pathlib import Path

out = Path(__file__).parent / "output" / "05_pipeline"
out.mkdir(parents=True, exist_ok=True)

config = out / "run.toml"
config.write_text(f"""
[run]
out_dir = "{out / 'run'}"
seed = 11

[synth]
canvas = [640, 640]

[synth.train]
triangle = 7
truncated_triangle = 5
circle = 6

[synth.test]
triangle = 20
truncated_triangle = 8
circle = 8

[train]
mode = "lr"
""")


def run():
    proc = subprocess.run([sys.executable, "-m", "npshape.cli", "run",
                           "--config", str(config)],
                          capture_output=True, text=True)
    print(proc.stdout.strip() or proc.stderr.strip())
    assert proc.returncode == 0
    return json.loads((out / "run" / "run_manifest.json").read_text())


print("first run:")
manifest = run()
print(f"  chosen preprocessing: {manifest['chosen_preproc']}")
print(f"  provider: {manifest['provider_fingerprint']}")
report = json.loads((out / "run" / "eval" / "report.json").read_text())
print(f"  test macro-F1: {report['macro']['f1']:.3f}")

print("\nsecond run (nothing changed):")
manifest = run()
statuses = {s["name"]: s["status"] for s in manifest["stages"]}
print(f"  stage statuses: {statuses}")

print("\ndeleting preds.json and re-running:")
(out / "run" / "preds" / "preds.json").unlink()
manifest = run()
ran = [s["name"] for s in manifest["stages"] if s["status"] == "ran"]
print(f"  recomputed stages: {ran}")

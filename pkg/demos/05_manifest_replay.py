"""Every run writes a manifest (config, hash, input fingerprints, output
digests).  Replaying it into a fresh directory must reproduce every CSV and
checkpoint byte for byte.  This drives the command-line tool end to end.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp(prefix="ctlmtnet-demo-"))
config = {
    "task": "cross",
    "model": {"num_classes": 3, "input_frames": 8, "conv_filters": 4, "num_primary_caps": 2,
              "primary_dim": 4, "digit_dim": 4},
    "train": {"epochs": 3, "batch_size": 8},
    "grl_lambda": 0.3,
    "grl_schedule": "ramp",
    "data": {
        "source": {"synth": {"num_classes": 3, "per_class": 20, "frames": 8}},
        "target": {"synth": {"num_classes": 3, "per_class": 20, "frames": 8, "rotation_deg": 30.0,
                             "translation": 0.5, "seed": 1}},
    },
}
(work / "run.json").write_text(json.dumps(config, indent=2))


def cli(*args):
    proc = subprocess.run([sys.executable, "-m", "ctlmtnet.cli", *args], capture_output=True, text=True)
    print("$ ctlmtnet", " ".join(args))
    print(proc.stdout.strip() or proc.stderr.strip())
    return proc.returncode


cli("train-cross", str(work / "run.json"), "--out", str(work / "first"))
print(json.loads((work / "first" / "manifest.json").read_text())["outputs"])
code = cli("replay", str(work / "first" / "manifest.json"), "--out", str(work / "second"))
print("replay exit status:", code)

# a malformed invocation fails with a single JSON line and status 2
cli("train-cross")

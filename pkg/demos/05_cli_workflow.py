"""The command-line workflow end to end on a tiny cohort.

Equivalent shell session:

    histreg make-fixtures --out data
    histreg synth --out synth --config cfg.json
    histreg train --data synth --out models --config cfg.json
    histreg register --manifest data/manifest.json --models models --out network
    histreg register --manifest data/manifest.json --backend baseline --out baseline
    histreg report --runs network=network baseline=baseline --out report

The training budget here is tiny, so the network numbers mostly show the
plumbing; the baseline needs no training.

    python demos/05_cli_workflow.py [OUT_DIR]
"""
import json
import sys
from pathlib import Path

from histreg.cli import main

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "cli"
root.mkdir(parents=True, exist_ok=True)
cfg = root / "cfg.json"
cfg.write_text(json.dumps({"n_sources": 10, "epochs": 2, "iterative": {"max_iters": 100}}))
manifest = str(root / "data" / "manifest.json")
steps = [
    ["make-fixtures", "--out", str(root / "data")],
    ["synth", "--out", str(root / "synth")],
    ["train", "--data", str(root / "synth"), "--out", str(root / "models")],
    ["register", "--manifest", manifest, "--models", str(root / "models"), "--out", str(root / "network")],
    ["register", "--manifest", manifest, "--backend", "baseline", "--out", str(root / "baseline")],
    ["report", "--runs", f"network={root / 'network'}", f"baseline={root / 'baseline'}", "--out", str(root / "report")],
]
for step in steps:
    code = main(step + ["--config", str(cfg)])
    print(f"histreg {step[0]:<14} exit {code}")
    if code:
        sys.exit(code)
print((root / "report" / "report.md").read_text())

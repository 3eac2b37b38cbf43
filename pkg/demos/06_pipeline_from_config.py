"""The full pipeline, driven by a config file.

Equivalent to ``rlhf-lab run demos/configs/minimal.yaml`` followed by
``rlhf-lab report <output_dir>/gap_report.csv``.
"""

import sys
import tempfile
from pathlib import Path

from rlhf_lab.cli import main

config = Path(__file__).parent / "configs" / "minimal.yaml"
with tempfile.TemporaryDirectory() as out:
    code = main(["run", str(config), "--output-dir", out, "--set", "policy.num_iters=500"])
    if code:
        sys.exit(code)
    print("artifacts:", sorted(p.name for p in Path(out).iterdir()))
    main(["report", str(Path(out) / "gap_report.csv")])
    main(["sweep", str(config), "--axis", "beta", "--grid", "0.1,1,10,100", "--output-dir", out])

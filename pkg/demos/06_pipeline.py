"""
The staged pipeline
===================

The command-line stages run in sequence on one output directory.  The same
thing from a shell would be::

    ringclim run --config demos/config.yaml --stages simulate,select,fit-fce,fit-vce,classify,report

Every stage appends hashes of its inputs and outputs to manifest.json.
"""

import json
import tempfile
from pathlib import Path

import pandas as pd
import yaml

from ringclim.cli import main

here = Path(__file__).parent
cfg = yaml.safe_load((here / "config.yaml").read_text())

with tempfile.TemporaryDirectory() as tmp:
    cfg["paths"]["output"] = str(Path(tmp) / "out")
    path = Path(tmp) / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))

    code = main(["run", "--config", str(path), "--stages",
                 "simulate,select,fit-fce,fit-vce,classify,report"])
    print("exit code", code, "(4 would mean a convergence warning with outputs written)")

    out = Path(cfg["paths"]["output"])
    print("\nselected variables:", (out / "selected_variables.txt").read_text().split())
    print(pd.read_csv(out / "fce_theta.csv").round(3).to_string(index=False))
    print("\ncategory percentages")
    print(pd.read_csv(out / "category_percentages.csv").round(1).to_string(index=False))

    manifest = json.loads((out / "manifest.json").read_text())
    for stage in manifest["stages"]:
        print("%-9s -> %s" % (stage["stage"], ", ".join(sorted(stage["outputs"]))[:90]))

    # a stage whose inputs are missing names the stage to run first
    empty = dict(cfg, paths={"output": str(Path(tmp) / "empty")})
    path.write_text(yaml.safe_dump(empty))
    print("\nclassify on an empty directory -> exit", main(["classify", "--config", str(path)]))

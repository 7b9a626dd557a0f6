# scripts/demo.py
"""
End-to-end demo at toy scale
----------------------------
dataset -> DetectNet -> curve -> SNR-wall report -> k=2 cooperation,
then inspects the run registry.
"""

import json
import os
from dlsense.config import ExperimentConfig
from dlsense.engine import coop_eval, ed_baseline, run_experiment, train_scn, wall_report_files
from dlsense import db


def pp(obj, title=None):
    if title:
        print(f"\n--- {title} ---")
    print(json.dumps(obj, indent=2, default=str))


def run_demo(out='demo_out'):
    print("=== dlsense demo start ===")
    cfg = ExperimentConfig(
        out=out, seed=7, schemes='QAM16', sample_length=64, snr_min=-10, snr_max=4,
        n_train=2000, n_val=600, n_test=1200, conv_filters=8, kernel=5, lstm_cells=16, fc1_units=16,
        max_epochs=3, patience=2, stage2_max_epochs=3, ed_trials=2000, k=2,
    )

    print("\n[Step 1] generate -> train -> evaluate")
    bundle = run_experiment(cfg)
    pp(bundle['evaluate'], "Evaluation")

    print("\n[Step 2] energy detector baseline")
    pp(ed_baseline(cfg), "ED baseline")

    print("\n[Step 3] SNR-wall report")
    report = wall_report_files(cfg, [(64, bundle['evaluate']['csv'])])
    print(report['table'])

    print("\n[Step 4] cooperative sensing, k=2")
    pp(train_scn(cfg), "SCN training")
    pp(coop_eval(cfg), "Fusion")

    print("\n[Step 5] run registry")
    db.configure(os.path.join(out, 'runs.db'))
    pp(db.fetch_table("runs"), "Runs")
    pp(db.fetch_table("artifacts"), "Artifacts")
    pp(db.fetch_table("tracebacks"), "Tracebacks")

    print("\n=== dlsense demo end ===")


if __name__ == "__main__":
    run_demo()

# Desk-scale acceptance run: reduced DetectNet on GFSK, N=64, three seeds.
# Reports Pf, Pd at -4 dB and whether stage 2 landed in the Pf interval, then
# fuses two nodes per seed and compares SCN with OR at the first SNR where both
# reach Pd 0.9 (mean over seeds).
import sys
import json
import logging
from pathlib import Path

from dlsense.coopfuse import FusionRule, SCNConfig, coop_curve, save_scn, scn_build_train, synth_coop_dataset
from dlsense.curves import write_csv
from dlsense.detectnet import DetectNetConfig, StopPolicy, build, dl_curve, save_detectnet, train_two_stage
from dlsense.endet import WallQuery, snr_wall
from dlsense.engine import cooperative_gain, mean_cooperative_gain
from dlsense.sigmod import DatasetSpec, ModScheme, synth_dataset

OUT = Path(__file__).resolve().parents[1] / 'models'
OUT.mkdir(parents=True, exist_ok=True)
SEEDS = (0, 1, 2)
N = 64
K = 2
PD_TARGET = 0.9

logging.basicConfig(level=logging.INFO, format='%(asctime)s %(name)s %(levelname)s %(message)s')


def policy():
    return StopPolicy(stage1_patience=6, stage1_max_epochs=30, pf_low=0.07, pf_high=0.09, stage2_max_epochs=10)


def one_seed(seed):
    spec = DatasetSpec((ModScheme.GFSK,), N, counts=(8000, 2000, 8000), seed=seed)
    splits = synth_dataset(spec, n_jobs=-1)
    config = DetectNetConfig(N, conv_filters=16, lstm_cells=32, fc1_units=32)
    res = train_two_stage(build(config, seed), splits.train, splits.val, policy(), seed)
    curve = dl_curve(res.model, splits.test)
    save_detectnet(OUT / f'detectnet_gfsk_n{N}_s{seed}.ckpt', res.model, res.metrics.epoch, res.metrics.to_dict())
    write_csv(OUT / f'curve_gfsk_n{N}_s{seed}.csv', [curve])
    pd4 = curve.pd_at(-4.0)
    row = {
        'seed': seed,
        'pf': curve.pf,
        'pd_at_-4dB': pd4,
        'ed_wall_db': snr_wall(WallQuery(curve.pf, PD_TARGET, N)) if 0 < curve.pf < 1 else None,
        'in_interval': res.in_interval,
        'passed': curve.pf <= 0.10 and pd4 is not None and pd4 >= PD_TARGET,
    }
    return row, res.model


def one_coop(seed, node_model):
    base = DatasetSpec((ModScheme.GFSK,), N, counts=(4000, 1000, 4000), seed=seed + 100)
    coop = synth_coop_dataset(base, K, [node_model], n_jobs=-1)
    res = scn_build_train(SCNConfig(K), coop.train, coop.val, policy(), seed)
    save_scn(OUT / f'scn_gfsk_n{N}_k{K}_s{seed}.ckpt', res.model, res.metrics.epoch, res.metrics.to_dict())
    curves = {r: coop_curve(r, coop.test, res.model) for r in (FusionRule.LOGICAL_OR, FusionRule.SCN)}
    write_csv(OUT / f'coop_curve_gfsk_n{N}_k{K}_s{seed}.csv', list(curves.values()))
    return cooperative_gain(curves, PD_TARGET)


if __name__ == '__main__':
    rows, gains = [], []
    for s in SEEDS:
        row, model = one_seed(s)
        rows.append(row)
        gains.append(one_coop(s, model))
    coop = mean_cooperative_gain(gains)
    print(json.dumps({'seeds': rows, 'coop_gains': gains, 'coop_mean': coop}, indent=2))
    passed = sum(r['passed'] for r in rows)
    flagged = sum(not r['in_interval'] for r in rows)
    print(f'{passed}/{len(rows)} seeds pass the quality check, {flagged} out-of-interval flags')
    print(f'k={K}: mean SCN Pf {coop["scn_pf"]} vs OR Pf {coop["or_pf"]} over {coop["found"]} seeds '
          f'with a common Pd>={PD_TARGET} SNR')
    ok = passed >= 2 and flagged <= 1 and coop['scn_not_worse'] is True
    sys.exit(0 if ok else 1)

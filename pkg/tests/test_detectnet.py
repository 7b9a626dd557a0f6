"""Tests for DetectNet construction, inference, metrics and two-stage training."""

import numpy as np
import pytest

from dlsense.detectnet import (ARCHITECTURES, DetectNet, DetectNetConfig, EarlyStopping, EpochMetrics,
                               LabeledInputs, ProbPair, StopPolicy, append_epoch_log, baseline_layers, build,
                               build_baseline, decide, decisions_from_probs, detectnet_from_checkpoint, dl_curve,
                               epoch_metrics, evaluate, infer, load_detectnet, read_epoch_log, save_detectnet,
                               train_stage1, train_stage2, train_two_stage)
from dlsense.errors import DivergenceError, ValidationError
from dlsense.sigmod import DatasetSpec, Hypothesis, ModScheme, synth_dataset
from dlsense.tensornet import LayerKind, Network, load_checkpoint, softmax


def constant_model(model, p1_wins: bool):
    """Same chain with a head that always outputs (0, 1) or (1, 0)."""
    params = dict(model.network.params)
    params['fc_out/W'] = np.zeros_like(params['fc_out/W'])
    params['fc_out/b'] = np.array([-50.0, 50.0]) if p1_wins else np.array([50.0, -50.0])
    return model.with_network(model.network.with_params(params))


class TestConfig:
    """DetectNetConfig coupling and validation."""

    def test_defaults(self):
        cfg = DetectNetConfig(sample_length=128)
        assert (cfg.conv_filters, cfg.kernel, cfg.lstm_cells, cfg.fc1_units) == (60, 10, 128, 128)
        assert cfg.fc2_units == 128 and cfg.out_units == 2
        assert cfg.dropout == 0.2 and cfg.lr == 0.0003 and cfg.batch == 200

    def test_fc2_follows_sample_length(self):
        assert DetectNetConfig(sample_length=128).with_(sample_length=64).fc2_units == 64

    @pytest.mark.parametrize('kwargs', [
        {'fc2_units': 100},
        {'out_units': 3},
        {'arch': 'resnet'},
        {'dropout': 1.0},
        {'conv_filters': 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            DetectNetConfig(sample_length=128, **kwargs)

    def test_precision(self):
        assert DetectNetConfig(sample_length=64).dtype == np.float32
        assert DetectNetConfig(sample_length=64, reference_precision=True).dtype == np.float64


class TestBuild:
    """Layer chain of the CLDNN and the comparison models."""

    def test_default_chain(self):
        model = build(DetectNetConfig(sample_length=128), seed=0)
        weighted = model.network.weighted_layers()
        assert [l.kind for l in weighted] == [LayerKind.CONV1D, LayerKind.CONV1D, LayerKind.TIME_DENSE,
                                              LayerKind.LSTM, LayerKind.LSTM, LayerKind.DENSE, LayerKind.DENSE]
        assert [l.units for l in weighted] == [60, 60, 128, 128, 128, 128, 2]
        assert weighted[3].return_sequences and not weighted[4].return_sequences
        assert model.network.layers[-1].kind == LayerKind.SOFTMAX
        assert model.network.input_shape == (128, 2)
        assert model.network.param_count() > 0

    def test_relu_and_dropout_placement(self, small_model):
        kinds = [l.kind for l in small_model.network.layers]
        assert kinds[:3] == [LayerKind.CONV1D, LayerKind.RELU, LayerKind.DROPOUT]
        lstm1 = kinds.index(LayerKind.LSTM)
        assert kinds[lstm1 + 1] == LayerKind.DROPOUT

    def test_same_seed_same_weights(self, small_config):
        a, b = build(small_config, seed=9), build(small_config, seed=9)
        for k in a.network.params:
            np.testing.assert_array_equal(a.network.params[k], b.network.params[k])

    def test_only_fc2_depends_on_sample_length(self):
        a = build(DetectNetConfig(sample_length=64)).network.layers
        b = build(DetectNetConfig(sample_length=128)).network.layers
        diff = [(x.name, x.units, y.units) for x, y in zip(a, b) if x != y]
        assert diff == [('fc2', 64, 128)]

    @pytest.mark.parametrize('arch', ARCHITECTURES)
    def test_baselines_forward(self, arch, small_config, tiny_splits):
        model = build_baseline(arch, small_config, seed=1)
        p = model.predict_proba(model.inputs(tiny_splits.val).x)
        assert p.shape == (30, 2)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert model.detector_id == f'{arch.upper()}(N=32)'


class TestInference:
    """infer and decide."""

    @pytest.fixture
    def frame(self, tiny_splits):
        return tiny_splits.test.iq[0].astype(np.complex128)

    def test_probabilities_sum_to_one(self, small_model, frame):
        p = infer(small_model, frame)
        assert abs(p.p0 + p.p1 - 1.0) < 1e-6

    def test_repeatable(self, small_model, frame):
        first = infer(small_model, frame)
        assert all(infer(small_model, frame) == first for _ in range(100))

    def test_scale_invariant_at_entry(self, small_model, frame):
        a = infer(small_model, frame)
        b = infer(small_model, 3.7 * frame)
        assert a.p1 == pytest.approx(b.p1, abs=1e-9)

    def test_length_mismatch(self, small_model):
        with pytest.raises(ValidationError):
            infer(small_model, np.ones(16, complex))

    @pytest.mark.parametrize('pair,expected', [
        ((0.9, 0.1), Hypothesis.H0),
        ((0.1, 0.9), Hypothesis.H1),
        ((0.5, 0.5), Hypothesis.H0),
    ])
    def test_decide(self, pair, expected):
        assert decide(ProbPair(*pair)) is expected

    def test_invalid_pair(self):
        with pytest.raises(ValidationError):
            ProbPair(0.6, 0.6)

    def test_argmax_invariant_to_monotone_logit_map(self, g):
        z = g.standard_normal((200, 2)) * 3
        warped = z ** 3 + 2 * z
        np.testing.assert_array_equal(decisions_from_probs(softmax(z)), decisions_from_probs(softmax(warped)))


class TestEpochMetrics:
    """Validation Pf / Pd-per-SNR."""

    def test_always_h0(self, small_model, tiny_splits):
        m = epoch_metrics(constant_model(small_model, False), tiny_splits.val)
        assert m.pf == 0.0
        assert set(m.pd_by_snr.values()) == {0.0}

    def test_always_h1(self, small_model, tiny_splits):
        m = epoch_metrics(constant_model(small_model, True), tiny_splits.val)
        assert m.pf == 1.0
        assert set(m.pd_by_snr.values()) == {1.0}

    def test_recount_oracle(self, small_model, tiny_splits):
        val = tiny_splits.val
        m = epoch_metrics(small_model, val)
        dec = np.array([decide(infer(small_model, val.iq[i], normalize=False)) for i in range(len(val))])
        h0 = val.labels == 0
        assert m.pf == pytest.approx(np.mean(dec[h0]))
        for snr, pd in m.pd_by_snr.items():
            rows = (val.labels == 1) & (val.snr_db == snr)
            assert pd == pytest.approx(np.mean(dec[rows]))
        assert m.val_acc == pytest.approx(np.mean(dec == val.labels))
        assert set(m.pd_by_snr) == set(np.unique(val.snr_db[val.labels == 1]))

    def test_needs_both_labels(self, small_model, tiny_splits):
        only_h1 = tiny_splits.val.subset(tiny_splits.val.labels == 1)
        with pytest.raises(ValidationError):
            epoch_metrics(small_model, only_h1)
        with pytest.raises(ValidationError):
            epoch_metrics(small_model, tiny_splits.val.subset(np.zeros(len(tiny_splits.val), bool)))

    def test_curve_matches_metrics(self, small_model, tiny_splits):
        m = evaluate(small_model, tiny_splits.test)
        curve = dl_curve(small_model, tiny_splits.test)
        assert curve.detector_id == 'CLDNN(N=32)'
        assert curve.pf == pytest.approx(m.pf)
        assert curve.pd_by_snr == pytest.approx(m.pd_by_snr)

    def test_json_lines_log(self, tmp_path):
        path = tmp_path / 'epochs.jsonl'
        a = EpochMetrics(1, 0.6, 0.7, 0.08, {-2.0: 0.4, 0.0: 0.75}, 'stage1', 0.65)
        b = EpochMetrics(2, 0.5, 0.8, 0.07, {-2.0: 0.5}, 'stage2')
        append_epoch_log(path, a)
        append_epoch_log(path, b)
        assert read_epoch_log(path) == [a, b]
        assert len(path.read_text().splitlines()) == 2

    def test_probabilities_validated(self):
        with pytest.raises(ValidationError):
            EpochMetrics(1, 0.5, 0.5, 1.5)


class TestStopPolicy:
    """Early stopping and the Pf interval."""

    def test_interval_bounds(self):
        assert StopPolicy(pf_low=0.0, pf_high=1.0).pf_in_interval(1.0)
        with pytest.raises(ValidationError):
            StopPolicy(pf_low=0.09, pf_high=0.07)
        with pytest.raises(ValidationError):
            StopPolicy(pf_low=0.05, pf_high=1.2)

    def test_distance(self):
        p = StopPolicy()
        assert p.pf_in_interval(0.07) and p.pf_in_interval(0.09)
        assert p.pf_distance(0.08) == 0.0
        assert p.pf_distance(0.05) == pytest.approx(0.02)
        assert p.pf_distance(0.10) == pytest.approx(0.01)

    def test_zero_patience_stops_at_once(self):
        assert EarlyStopping(0).update(1.0)

    def test_improving_losses_never_stop(self):
        stopper = EarlyStopping(2)
        assert not any(stopper.update(1.0 / k) for k in range(1, 50))

    def test_patience_counts_non_improving_epochs(self):
        stopper = EarlyStopping(2)
        assert [stopper.update(v) for v in (1.0, 0.9, 0.95, 0.91)] == [False, False, False, True]


class TestTraining:
    """Minibatch Adam with the two-stage policy."""

    def test_zero_patience_runs_one_epoch(self, small_model, tiny_splits):
        res = train_stage1(small_model, tiny_splits.train, tiny_splits.val,
                           StopPolicy(stage1_patience=0, stage1_max_epochs=5))
        assert res.epochs_run == 1 and len(res.history) == 1

    def test_stage1_returns_best_epoch(self, small_model, tiny_splits):
        seen = []
        res = train_stage1(small_model, tiny_splits.train, tiny_splits.val,
                           StopPolicy(stage1_patience=2, stage1_max_epochs=4), on_epoch=seen.append)
        assert seen == res.history
        assert res.metrics.val_loss == min(m.val_loss for m in res.history)
        assert res.metrics.val_loss <= res.history[0].val_loss
        assert epoch_metrics(res.model, tiny_splits.val).val_loss == pytest.approx(res.metrics.val_loss)

    def test_seeded_training_is_repeatable(self, small_model, tiny_splits):
        policy = StopPolicy(stage1_patience=1, stage1_max_epochs=2)
        a = train_stage1(small_model, tiny_splits.train, tiny_splits.val, policy, seed=4)
        b = train_stage1(small_model, tiny_splits.train, tiny_splits.val, policy, seed=4)
        for k in a.model.network.params:
            np.testing.assert_array_equal(a.model.network.params[k], b.model.network.params[k])

    def test_training_leaves_input_model_untouched(self, small_model, tiny_splits):
        before = {k: v.copy() for k, v in small_model.network.params.items()}
        train_stage1(small_model, tiny_splits.train, tiny_splits.val, StopPolicy(0, 1))
        for k, v in before.items():
            np.testing.assert_array_equal(small_model.network.params[k], v)

    def test_stage2_full_interval_returns_immediately(self, small_model, tiny_splits):
        res = train_stage2(small_model, tiny_splits.train, tiny_splits.val, StopPolicy(pf_low=0.0, pf_high=1.0))
        assert res.epochs_run == 0 and res.in_interval
        assert res.model is small_model
        assert [m.epoch for m in res.history] == [0]

    def test_stage2_already_in_interval(self, small_model, tiny_splits):
        model = constant_model(small_model, False)
        res = train_stage2(model, tiny_splits.train, tiny_splits.val, StopPolicy(pf_low=0.0, pf_high=0.05))
        assert res.epochs_run == 0 and res.model is model

    def test_stage2_exhaustion_is_flagged(self, small_model, tiny_splits):
        model = constant_model(small_model, False)
        res = train_stage2(model, tiny_splits.train, tiny_splits.val,
                           StopPolicy(pf_low=0.5, pf_high=1.0, stage2_max_epochs=2))
        assert res.out_of_interval
        assert res.epochs_run == 2 and len(res.history) == 3
        assert res.metrics.pf == min((m.pf for m in res.history), key=lambda pf: abs(pf - 0.5))

    def test_two_stage_history(self, small_model, tiny_splits):
        res = train_two_stage(small_model, tiny_splits.train, tiny_splits.val,
                              StopPolicy(stage1_patience=0, pf_low=0.0, pf_high=1.0))
        assert [m.stage for m in res.history] == ['stage1', 'stage2']
        assert res.in_interval

    def test_divergence_aborts(self, small_model, tiny_splits):
        params = dict(small_model.network.params)
        params['fc_out/b'] = np.array([np.nan, 0.0])
        broken = small_model.with_network(small_model.network.with_params(params))
        with pytest.raises(DivergenceError) as err:
            train_stage1(broken, tiny_splits.train, tiny_splits.val, StopPolicy(0, 1))
        assert err.value.epoch == 1 and err.value.batch == 0

    def test_empty_training_set(self, small_model, tiny_splits):
        empty = LabeledInputs(np.zeros((0, 32, 2)), np.zeros(0, np.int64), np.zeros(0))
        with pytest.raises(ValidationError):
            train_stage1(small_model, empty, tiny_splits.val, StopPolicy())

    @pytest.mark.slow
    def test_shuffled_labels_stay_at_chance(self, small_config):
        spec = DatasetSpec(schemes=(ModScheme.GFSK,), sample_length=32, snr_grid=(-4, 0, 4),
                           counts=(600, 200, 3000), seed=13)
        splits = synth_dataset(spec)
        g = np.random.default_rng(0)
        model = build(small_config, seed=0)
        train = model.inputs(splits.train)
        train = LabeledInputs(train.x, g.permutation(train.labels), train.snr_db)
        test = model.inputs(splits.test)
        test = LabeledInputs(test.x, g.permutation(test.labels), test.snr_db)
        res = train_stage1(model, train, model.inputs(splits.val), StopPolicy(1, 3))
        curve = dl_curve(res.model, test)
        assert abs(curve.pf + (1 - np.mean(curve.pd)) - 1.0) < 0.1


class TestCheckpoint:
    """DetectNet save/load."""

    def test_round_trip(self, small_model, tiny_splits, tmp_path):
        path = tmp_path / 'detectnet.ckpt'
        save_detectnet(path, small_model, epoch=3, metrics={'pf': 0.08}, meta={'schemes': ['QAM16']})
        loaded = load_detectnet(path)
        assert loaded.config == small_model.config
        x = loaded.inputs(tiny_splits.val).x
        np.testing.assert_allclose(loaded.predict_proba(x), small_model.predict_proba(x), atol=1e-5)

    def test_precision_override(self, small_model, tmp_path):
        path = tmp_path / 'detectnet.ckpt'
        save_detectnet(path, small_model)
        fast = load_detectnet(path, reference_precision=False)
        assert fast.network.dtype == np.float32
        assert not fast.config.reference_precision

    def test_rejects_other_models(self, small_model, tmp_path):
        from dlsense.tensornet import Checkpoint, save_checkpoint
        path = tmp_path / 'other.ckpt'
        save_checkpoint(path, Checkpoint(small_model.network, meta={'model': 'scn'}))
        with pytest.raises(ValidationError):
            load_detectnet(path)

    def test_from_loaded_checkpoint(self, small_model, tmp_path):
        path = save_detectnet(tmp_path / 'detectnet.ckpt', small_model, meta={'schemes': ['QAM16']})
        ckpt = load_checkpoint(path)
        model = detectnet_from_checkpoint(ckpt, reference_precision=True)
        assert model.config == small_model.config
        assert ckpt.meta['schemes'] == ['QAM16']


class TestFixedReference:
    """Hand-set CLDNN against hand-computed probabilities, through a checkpoint."""

    def test_cldnn_reference(self, reference_nets, tmp_path):
        ref = reference_nets['detectnet']
        config = DetectNetConfig(**ref['config'])
        params = {k: np.asarray(v, dtype=np.float64) for k, v in ref['params'].items()}
        net = Network(baseline_layers(config.arch, config), (config.sample_length, 2), params, config.dtype)
        path = save_detectnet(tmp_path / 'reference.ckpt', DetectNet(config, net))
        model = load_detectnet(path)
        for frame, (p0, p1) in zip(ref['frames'], ref['expected']):
            iq = np.array([complex(re, im) for re, im in frame])
            p = infer(model, iq)
            assert p.p0 == pytest.approx(p0, abs=1e-9)
            assert p.p1 == pytest.approx(p1, abs=1e-9)
            assert decide(p) is Hypothesis.H0

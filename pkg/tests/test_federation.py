import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedpelad.csi import ChannelConfig, Dataset, build_dataset
from fedpelad.federation import (
    CucLedger,
    ConfigError,
    FedHyper,
    Phase,
    ProtocolError,
    Strategy,
    UEState,
    UplinkMessage,
    af_phase,
    broadcast_init,
    closed_form_cuc,
    evaluate,
    fedavg_adapters,
    fedavg_decoder,
    fedavg_full,
    local_train,
    make_uplink,
    pretrain_centralized,
    rcuc,
    round_budget,
    run_federation,
    run_round,
)
from fedpelad.lora import base_digest, build_autoencoder, count_params, param_digest

from oracles import weighted_mean_loop


def small_setup(n_ues=3, sizes=(20, 30, 40), seed=0):
    datasets = [
        build_dataset(ChannelConfig(n_sub=8, n_tx=8, n_delay=8, n_paths=2, angle_center_deg=20 * k, seed=50 + k),
                      sizes[k % len(sizes)])
        for k in range(n_ues)
    ]
    model = build_autoencoder(8, 8, Fraction(1, 8), 16, 2, 2, 2.0, np.random.default_rng(seed))
    return model, datasets


HYPER = FedHyper(rounds=4, local_epochs=1, batch_size=8, lr=1e-3, lr_ratio=5.0, rank=2, alpha_ratio=1.0)


def msg(ue_id, n, payload, t=1, phase=Phase.UPLOAD_A):
    return UplinkMessage(ue_id, t, phase, n, payload, sum(v.size for v in payload.values()))


class TestSchedule:
    def test_paper_phases(self):
        assert af_phase(1, Strategy.FEDPELAD) is Phase.UPLOAD_B
        assert af_phase(2, Strategy.FEDPELAD) is Phase.UPLOAD_A
        assert af_phase(7, Strategy.FEDPELAD_NOAF) is Phase.UPLOAD_BOTH
        assert af_phase(3, Strategy.FEDDEC) is Phase.UPLOAD_DECODER
        assert af_phase(3, Strategy.FEDAVG) is Phase.UPLOAD_FULL
        assert af_phase(4, Strategy.FEDPELAD_HALF) is Phase.UPLOAD_A

    def test_round_zero_rejected(self):
        with pytest.raises(ValueError):
            af_phase(0, Strategy.FEDPELAD)

    def test_budgets(self):
        assert round_budget(Strategy.FEDPELAD, 400) == 400
        for s in (Strategy.FEDAVG, Strategy.FEDDEC, Strategy.FEDPELAD_HALF, Strategy.FEDPELAD_NOAF):
            assert round_budget(s, 400) == 200
        with pytest.raises(ConfigError):
            round_budget(Strategy.FEDPELAD, 3)


class TestAggregation:
    def test_uniform_is_mean(self):
        rng = np.random.default_rng(0)
        xs = [rng.normal(size=(2, 3)) for _ in range(3)]
        agg = fedavg_adapters([msg(k, 10, {"dec.0.a": xs[k]}) for k in range(3)], "A")
        assert np.allclose(agg.tensors[0], np.mean(xs, axis=0), atol=1e-15)

    def test_single_ue_bitwise(self):
        x = np.random.default_rng(1).normal(size=(2, 3))
        agg = fedavg_adapters([msg(4, 7, {"dec.0.a": x})], "A")
        assert agg.tensors[0].tobytes() == x.tobytes()

    def test_hand_weighted(self):
        m1 = msg(0, 1, {"dec.0.a": np.ones((2, 2))})
        m2 = msg(1, 3, {"dec.0.a": 5 * np.ones((2, 2))})
        assert np.array_equal(fedavg_adapters([m1, m2], "A").tensors[0], np.full((2, 2), 4.0))

    def test_order_independent(self):
        rng = np.random.default_rng(2)
        ms = [msg(k, k + 1, {"dec.0.b": rng.normal(size=(3, 2))}, phase=Phase.UPLOAD_B) for k in range(4)]
        a = fedavg_adapters(ms, "B").tensors[0]
        b = fedavg_adapters(ms[::-1], "B").tensors[0]
        assert a.tobytes() == b.tobytes()

    def test_errors(self):
        x = np.zeros((2, 2))
        with pytest.raises(ProtocolError):
            fedavg_adapters([msg(0, 1, {"dec.0.a": x}), msg(0, 1, {"dec.0.a": x})], "A")
        with pytest.raises(ProtocolError):
            fedavg_adapters([msg(0, 1, {"dec.0.a": x}), msg(1, 1, {"dec.0.a": np.zeros((3, 2))})], "A")
        with pytest.raises(ProtocolError):
            fedavg_adapters([msg(0, 1, {"dec.0.a": x}), msg(1, 1, {"dec.0.a": x}, t=2)], "A")
        with pytest.raises(ProtocolError):
            fedavg_adapters([msg(0, 1, {"dec.0.a": x})], "B")
        with pytest.raises(ProtocolError):
            fedavg_adapters([], "A")
        with pytest.raises(ProtocolError):
            fedavg_decoder([msg(0, 1, {"enc.0.w": x}, phase=Phase.UPLOAD_DECODER)])

    def test_declared_count_checked(self):
        with pytest.raises(ProtocolError):
            UplinkMessage(0, 1, Phase.UPLOAD_A, 3, {"dec.0.a": np.zeros(4)}, 5)

    def test_identical_models_fixed_point(self):
        model, _ = small_setup()
        payload = {n: p.value.copy() for n, p in model.named_params() if not n.endswith((".a", ".b"))}
        out = fedavg_full([msg(0, 5, payload, phase=Phase.UPLOAD_FULL), msg(1, 5, payload, phase=Phase.UPLOAD_FULL)])
        for k, v in payload.items():
            assert np.array_equal(out[k], v)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_matches_loop_oracle(self, seed, k):
        rng = np.random.default_rng(seed)
        ns = [int(n) for n in rng.integers(1, 500, size=k)]
        payloads = [{"dec.0.w0": rng.normal(size=(3, 4)), "dec.0.bias": rng.normal(size=3)} for _ in range(k)]
        out = fedavg_decoder([msg(i, ns[i], payloads[i], phase=Phase.UPLOAD_DECODER) for i in range(k)])
        oracle = weighted_mean_loop(payloads, ns)
        for key in oracle:
            assert np.max(np.abs(out[key] - oracle[key])) <= 1e-12


class TestLocalTrain:
    def setup_method(self):
        model, datasets = small_setup()
        self.state = broadcast_init(model, datasets, Strategy.FEDPELAD, HYPER)

    def test_upload_b_leaves_a_and_base(self):
        ue = self.state.ues[0]
        a_before = [a.copy() for a in ue.model.decoder.adapters("A")]
        base_before = base_digest(ue.model.decoder)
        local_train(ue, Phase.UPLOAD_B, 2, 1e-3, 5.0, 8, np.random.default_rng(0))
        for old, new in zip(a_before, ue.model.decoder.adapters("A")):
            assert old.tobytes() == new.tobytes()
        assert base_digest(ue.model.decoder) == base_before
        assert any(b.any() for b in ue.model.decoder.adapters("B"))

    def test_lr_ratio_zero_keeps_b(self):
        ue = self.state.ues[1]
        b_before = [b.copy() for b in ue.model.decoder.adapters("B")]
        local_train(ue, Phase.UPLOAD_BOTH, 2, 1e-3, 0.0, 8, np.random.default_rng(0))
        for old, new in zip(b_before, ue.model.decoder.adapters("B")):
            assert old.tobytes() == new.tobytes()

    def test_empty_train_split(self):
        ue = self.state.ues[0]
        empty = Dataset(np.zeros((0, 8, 8, 2)), ue.dataset.val, ue.dataset.test)
        with pytest.raises(ConfigError):
            local_train(UEState(9, ue.model, empty), Phase.UPLOAD_B, 1, 1e-3, 5.0, 8, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            local_train(ue, Phase.UPLOAD_B, 0, 1e-3, 5.0, 8, np.random.default_rng(0))

    def test_uplink_payloads(self):
        ue = self.state.ues[0]
        for phase, sel in [(Phase.UPLOAD_A, "adapters_A"), (Phase.UPLOAD_B, "adapters_B"),
                           (Phase.UPLOAD_BOTH, "adapters_both"), (Phase.UPLOAD_DECODER, "decoder_full"),
                           (Phase.UPLOAD_FULL, "full")]:
            m = make_uplink(ue, phase, 1)
            assert m.param_count == count_params(ue.model, sel)
            if phase is not Phase.UPLOAD_FULL:
                assert not any(k.startswith("enc.") for k in m.payload)


class TestInit:
    def test_pretrain_zero_epochs_noop(self):
        model, datasets = small_setup()
        base = pretrain_centralized(model, datasets, 0, 1e-3)
        assert param_digest([p for _, p in base.named_params()]) == param_digest([p for _, p in model.named_params()])

    def test_pretrain_improves_and_is_deterministic(self):
        model, datasets = small_setup()
        b1 = pretrain_centralized(model, datasets, 5, 1e-3, 8, seed=3)
        b2 = pretrain_centralized(model, datasets, 5, 1e-3, 8, seed=3)
        assert param_digest([p for _, p in b1.named_params()]) == param_digest([p for _, p in b2.named_params()])
        s0 = broadcast_init(model, datasets, Strategy.FEDPELAD, HYPER)
        s1 = broadcast_init(b1, datasets, Strategy.FEDPELAD, HYPER)
        assert np.mean(evaluate(s1, "val")) <= np.mean(evaluate(s0, "val"))

    def test_pretrain_empty(self):
        model, _ = small_setup()
        with pytest.raises(ConfigError):
            pretrain_centralized(model, [], 1, 1e-3)

    def test_broadcast_identical_replicas_zero_delta(self):
        model, datasets = small_setup()
        state = broadcast_init(model, datasets, Strategy.FEDPELAD, HYPER)
        digests = {param_digest([p for _, p in ue.model.named_params()]) for ue in state.ues}
        assert len(digests) == 1
        for layer in state.bs.model.decoder.layers:
            assert not layer.b.value.any()
        with pytest.raises(ConfigError):
            broadcast_init(model, [], Strategy.FEDPELAD, HYPER)


class TestRound:
    def test_odd_round_broadcast(self):
        model, datasets = small_setup()
        state = broadcast_init(model, datasets, Strategy.FEDPELAD, HYPER)
        rec = run_round(state)
        assert rec.phase == "UploadB" and state.bs.round == 1
        bs_b = state.bs.model.decoder.adapters("B")
        for ue in state.ues:
            for x, y in zip(ue.model.decoder.adapters("B"), bs_b):
                assert x.tobytes() == y.tobytes()
        assert rec.cuc_cumulative == len(datasets) * count_params(model, "adapters_B")
        # encoders diverge after local training
        encs = {param_digest([l.w for l in ue.model.encoder.layers]) for ue in state.ues}
        assert len(encs) == len(state.ues)

    def test_noaf_syncs_both_halves(self):
        model, datasets = small_setup()
        state = broadcast_init(model, datasets, Strategy.FEDPELAD_NOAF, HYPER)
        run_round(state)
        a0 = state.ues[0].model.decoder.adapters("A")
        a1 = state.ues[1].model.decoder.adapters("A")
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a0, a1))

    def test_feddec_keeps_encoders_private(self):
        model, datasets = small_setup()
        state = broadcast_init(model, datasets, Strategy.FEDDEC, HYPER)
        run_round(state)
        encs = [param_digest([p for l in ue.model.encoder.layers for p in (l.w, l.bias)]) for ue in state.ues]
        assert len(set(encs)) == len(encs)

    def test_fedavg_syncs_everything(self):
        model, datasets = small_setup()
        state = broadcast_init(model, datasets, Strategy.FEDAVG, HYPER)
        run_round(state)
        digests = {param_digest([p for _, p in ue.model.named_params()]) for ue in state.ues}
        assert len(digests) == 1


class TestLedger:
    def test_ledger_total(self):
        led = CucLedger()
        for c in (3, 4, 5):
            led.record(c)
        assert led.total == 12 and led.per_round == [3, 4, 5]

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_history_matches_closed_form(self, strategy):
        model, datasets = small_setup()
        h = run_federation(model, datasets, strategy, HYPER)
        assert h.cuc_total == closed_form_cuc(model, strategy, HYPER.rounds, len(datasets))
        assert len(h.records) == round_budget(strategy, HYPER.rounds) + 1
        assert [r.cuc_cumulative for r in h.records] == sorted({r.cuc_cumulative for r in h.records})

    def test_closed_forms(self):
        model, _ = small_setup()
        t, k = 10, 3
        full, dec = count_params(model, "full"), count_params(model, "decoder_full")
        a, b = count_params(model, "adapters_A"), count_params(model, "adapters_B")
        assert closed_form_cuc(model, Strategy.FEDAVG, 2 * t, k) == t * k * full
        assert closed_form_cuc(model, Strategy.FEDDEC, 2 * t, k) == t * k * dec
        assert closed_form_cuc(model, Strategy.FEDPELAD, 2 * t, k) == t * k * (a + b)
        assert closed_form_cuc(model, Strategy.FEDPELAD_NOAF, 2 * t, k) == t * k * (a + b)
        assert 2 * closed_form_cuc(model, Strategy.FEDPELAD_HALF, 2 * t, k) == t * k * (a + b)

    def test_rcuc(self):
        model, _ = small_setup()
        fa = closed_form_cuc(model, Strategy.FEDAVG, 20, 3)
        assert rcuc(fa, fa) == 1.0
        p3 = closed_form_cuc(model, Strategy.FEDPELAD, 20, 3)
        p5 = closed_form_cuc(model, Strategy.FEDPELAD, 20, 5)
        assert rcuc(p3, fa) == rcuc(p5, closed_form_cuc(model, Strategy.FEDAVG, 20, 5))
        with pytest.raises(ConfigError):
            rcuc(p3, 0)

    def test_rcuc_doubles_with_rank(self):
        vals = []
        for r in (2, 4):
            m = build_autoencoder(8, 8, Fraction(1, 8), 16, 2, r, float(r), np.random.default_rng(0))
            vals.append(Fraction(closed_form_cuc(m, Strategy.FEDPELAD, 20, 3), closed_form_cuc(m, Strategy.FEDAVG, 20, 3)))
        assert vals[1] == 2 * vals[0]


class TestHistory:
    def test_deterministic_and_csv(self):
        model, datasets = small_setup()
        h1 = run_federation(model, datasets, Strategy.FEDPELAD, HYPER, seed=5)
        h2 = run_federation(model, datasets, Strategy.FEDPELAD, HYPER, seed=5)
        assert h1.to_csv() == h2.to_csv()
        lines = h1.to_csv().splitlines()
        assert lines[0] == "round,phase,cuc_cumulative,nmse_db_avg,nmse_db_ue0,nmse_db_ue1,nmse_db_ue2"
        assert lines[1].startswith("0,Init,0,")
        assert [ln.split(",")[1] for ln in lines[2:]] == ["UploadB", "UploadA"] * 2
        for ln in lines[1:]:
            for field in ln.split(",")[3:]:
                assert len(field.split(".")[1]) == 6

    def test_seed_changes_run(self):
        model, datasets = small_setup()
        h1 = run_federation(model, datasets, Strategy.FEDPELAD, HYPER, seed=1)
        h2 = run_federation(model, datasets, Strategy.FEDPELAD, HYPER, seed=2)
        assert h1.to_csv() != h2.to_csv()

    def test_avg_is_mean_of_ue_db(self):
        model, datasets = small_setup()
        h = run_federation(model, datasets, Strategy.FEDDEC, HYPER)
        for r in h.records:
            assert math.isclose(r.nmse_db_avg, sum(r.nmse_db) / len(r.nmse_db), rel_tol=1e-12)

    def test_nmse_at_budget(self):
        model, datasets = small_setup()
        h = run_federation(model, datasets, Strategy.FEDAVG, HYPER)
        assert h.nmse_at_budget(0) == h.records[0].nmse_db_avg
        assert h.nmse_at_budget(h.cuc_total) == h.final.nmse_db_avg

"""Round-synchronous federated training of the CSI autoencoder.

One BS and K UEs. Each round every UE trains locally, uploads the payload
its strategy prescribes, the BS takes the n_k-weighted mean and broadcasts
it back. Uplink parameter counts go into a :class:`CucLedger`.

Strategies:

* ``FedPelad``: personal encoders, LoRA decoder, alternating freeze
  (odd rounds train/upload B with A frozen, even rounds the reverse).
* ``FedPeladHalf``: same schedule with half the round budget.
* ``FedPeladNoAF``: both adapter halves trained and uploaded every round.
* ``FedDec``: personal encoders, full decoder base aggregated.
* ``FedAvg``: the whole (unadapted) model aggregated.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .csi import Dataset, nmse_db
from .lora import Autoencoder, LoraLinear, count_params, init_lora
from .numkit import AdamState, Param, adam_step

log = logging.getLogger(__name__)

_PRETRAIN_STREAM = 0x5EED
_LORA_STREAM = 0x10A


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class Strategy(str, Enum):
    FEDAVG = "FedAvg"
    FEDDEC = "FedDec"
    FEDPELAD = "FedPelad"
    FEDPELAD_NOAF = "FedPeladNoAF"
    FEDPELAD_HALF = "FedPeladHalf"

    @property
    def uses_lora(self) -> bool:
        return self in (Strategy.FEDPELAD, Strategy.FEDPELAD_NOAF, Strategy.FEDPELAD_HALF)


class Phase(str, Enum):
    UPLOAD_B = "UploadB"
    UPLOAD_A = "UploadA"
    UPLOAD_BOTH = "UploadBoth"
    UPLOAD_DECODER = "UploadDecoder"
    UPLOAD_FULL = "UploadFull"


# ledger selector for the payload of each phase
PHASE_SELECTOR = {
    Phase.UPLOAD_B: "adapters_B",
    Phase.UPLOAD_A: "adapters_A",
    Phase.UPLOAD_BOTH: "adapters_both",
    Phase.UPLOAD_DECODER: "decoder_full",
    Phase.UPLOAD_FULL: "full",
}


def af_phase(t: int, strategy: Strategy) -> Phase:
    if t < 1:
        raise ValueError(f"rounds are numbered from 1, got {t}")
    strategy = Strategy(strategy)
    if strategy in (Strategy.FEDPELAD, Strategy.FEDPELAD_HALF):
        return Phase.UPLOAD_B if t % 2 == 1 else Phase.UPLOAD_A
    return {
        Strategy.FEDPELAD_NOAF: Phase.UPLOAD_BOTH,
        Strategy.FEDDEC: Phase.UPLOAD_DECODER,
        Strategy.FEDAVG: Phase.UPLOAD_FULL,
    }[strategy]


def round_budget(strategy: Strategy, rounds: int) -> int:
    """Rounds run by ``strategy`` when FedPelad gets ``rounds``.

    FedPelad transmits one adapter half per round, so it runs twice the
    rounds of every other strategy, FedPeladHalf included.
    """
    if rounds < 2 or rounds % 2:
        raise ConfigError(f"round budget must be an even number >= 2, got {rounds}")
    return rounds if Strategy(strategy) is Strategy.FEDPELAD else rounds // 2


@dataclass
class FedHyper:
    rounds: int = 60
    local_epochs: int = 2
    batch_size: int = 50
    lr: float = 1e-3
    lr_ratio: float = 5.0
    rank: int = 8
    alpha_ratio: float = 1.0

    @property
    def alpha(self) -> float:
        return self.alpha_ratio * self.rank


@dataclass
class UEState:
    ue_id: int
    model: Autoencoder
    dataset: Dataset
    adam: dict[str, AdamState] = field(default_factory=dict)

    @property
    def n_k(self) -> int:
        return self.dataset.n_k


@dataclass
class BSState:
    model: Autoencoder
    round: int = 0


@dataclass(frozen=True)
class UplinkMessage:
    ue_id: int
    round: int
    phase: Phase
    n_samples: int
    payload: dict[str, np.ndarray]
    param_count: int

    def __post_init__(self) -> None:
        actual = sum(int(v.size) for v in self.payload.values())
        if actual != self.param_count:
            raise ProtocolError(f"UE {self.ue_id}: declared {self.param_count} params, payload has {actual}")


@dataclass
class AdapterSet:
    half: str
    tensors: list[np.ndarray]


@dataclass
class CucLedger:
    per_round: list[int] = field(default_factory=list)

    def record(self, count: int) -> None:
        self.per_round.append(int(count))

    @property
    def total(self) -> int:
        return sum(self.per_round)


def payload_keys(model: Autoencoder, phase: Phase) -> list[str]:
    n_dec = len(model.decoder.layers)
    if phase is Phase.UPLOAD_B:
        return [f"dec.{i}.b" for i in range(n_dec)]
    if phase is Phase.UPLOAD_A:
        return [f"dec.{i}.a" for i in range(n_dec)]
    if phase is Phase.UPLOAD_BOTH:
        return [f"dec.{i}.{h}" for h in ("a", "b") for i in range(n_dec)]
    dec = [f"dec.{i}.{n}" for i in range(n_dec) for n in ("w0", "bias")]
    if phase is Phase.UPLOAD_DECODER:
        return dec
    enc = [f"enc.{i}.{n}" for i in range(len(model.encoder.layers)) for n in ("w", "bias")]
    return enc + dec


def make_uplink(ue: UEState, phase: Phase, t: int) -> UplinkMessage:
    params = ue.model.params()
    payload = {k: params[k].value.copy() for k in payload_keys(ue.model, phase)}
    count = sum(int(v.size) for v in payload.values())
    if count != count_params(ue.model, PHASE_SELECTOR[phase]):
        raise ProtocolError(f"{phase.value} payload of {count} params disagrees with the model count")
    return UplinkMessage(ue.ue_id, t, phase, ue.n_k, payload, count)


def _weighted_mean(msgs: Sequence[UplinkMessage]) -> dict[str, np.ndarray]:
    if not msgs:
        raise ProtocolError("no uplink messages to aggregate")
    ids = [m.ue_id for m in msgs]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate ue_id in uplink batch: {sorted(ids)}")
    if len({m.round for m in msgs}) != 1:
        raise ProtocolError("uplink messages come from different rounds")
    ordered = sorted(msgs, key=lambda m: m.ue_id)
    ref = ordered[0].payload
    for m in ordered[1:]:
        if m.payload.keys() != ref.keys() or any(m.payload[k].shape != ref[k].shape for k in ref):
            raise ProtocolError(f"UE {m.ue_id} payload layout differs from UE {ordered[0].ue_id}")
    total = sum(m.n_samples for m in ordered)
    if total <= 0:
        raise ProtocolError("aggregation weights sum to zero")
    out = {k: np.zeros_like(v) for k, v in ref.items()}
    for m in ordered:
        w = m.n_samples / total
        for k in out:
            out[k] += w * m.payload[k]
    return out


def fedavg_adapters(msgs: Sequence[UplinkMessage], half: str) -> AdapterSet:
    """n_k-weighted mean of one adapter half, layer by layer."""
    suffix = "." + half.lower()
    for m in msgs:
        if not any(k.endswith(suffix) for k in m.payload):
            raise ProtocolError(f"UE {m.ue_id} did not upload adapter half {half}")
    mean = _weighted_mean(msgs)
    keys = sorted((k for k in mean if k.endswith(suffix)), key=lambda k: int(k.split(".")[1]))
    return AdapterSet(half.upper(), [mean[k] for k in keys])


def fedavg_full(msgs: Sequence[UplinkMessage]) -> dict[str, np.ndarray]:
    return _weighted_mean(msgs)


def fedavg_decoder(msgs: Sequence[UplinkMessage]) -> dict[str, np.ndarray]:
    for m in msgs:
        stray = [k for k in m.payload if not k.startswith("dec.")]
        if stray:
            raise ProtocolError(f"decoder aggregation got non-decoder tensors from UE {m.ue_id}: {stray[:3]}")
    return _weighted_mean(msgs)


def load_named(model: Autoencoder, tensors: dict[str, np.ndarray]) -> None:
    params = model.params()
    for k, v in tensors.items():
        if params[k].shape != v.shape:
            raise ProtocolError(f"{k}: shape {v.shape} != {params[k].shape}")
        params[k].value = v.copy()


def configure_phase(model: Autoencoder, phase: Phase) -> None:
    """Set freeze flags for local training in ``phase``."""
    if phase is Phase.UPLOAD_FULL or phase is Phase.UPLOAD_DECODER:
        model.set_trainable(encoder=True, base=True, a=False, b=False)
    else:
        model.set_trainable(
            encoder=True,
            base=False,
            a=phase in (Phase.UPLOAD_A, Phase.UPLOAD_BOTH),
            b=phase in (Phase.UPLOAD_B, Phase.UPLOAD_BOTH),
        )


def _train_epochs(
    model: Autoencoder,
    data: np.ndarray,
    epochs: int,
    batch_size: int,
    lrs: Callable[[str], float],
    adam: dict[str, AdamState],
    rng: np.random.Generator,
) -> list[float]:
    trainable = [(n, p) for n, p in model.named_params() if not p.frozen]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(data.shape[0])
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            total += model.loss_and_grad(data[idx]) * len(idx)
            for name, p in trainable:
                state = adam.get(name)
                if state is None:
                    state = adam[name] = AdamState.for_param(p, lrs(name))
                state.lr = lrs(name)
                adam_step(p, state)
        losses.append(total / len(order))
    return losses


def local_train(
    ue: UEState,
    phase: Phase,
    epochs: int,
    eta_a: float,
    lr_ratio: float,
    batch_size: int,
    rng: np.random.Generator,
) -> list[float]:
    """E epochs of minibatch Adam on the UE's train split; returns per-epoch mean NMSE.

    B adapters step with lr_ratio * eta_a, everything else with eta_a.
    """
    if epochs < 1:
        raise ConfigError("local training needs at least one epoch")
    if ue.dataset.train.shape[0] == 0:
        raise ConfigError(f"UE {ue.ue_id} has an empty training split")
    configure_phase(ue.model, phase)
    ue.model.zero_grad()
    eta_b = lr_ratio * eta_a
    return _train_epochs(
        ue.model,
        ue.dataset.train,
        epochs,
        batch_size,
        lambda name: eta_b if name.endswith(".b") else eta_a,
        ue.adam,
        rng,
    )


def pretrain_centralized(
    model: Autoencoder,
    datasets: Sequence[Dataset],
    epochs: int,
    lr: float,
    batch_size: int = 50,
    seed: int = 0,
) -> Autoencoder:
    """Train the dense autoencoder (adapters inactive) on the pooled train splits."""
    if not datasets or sum(d.n_k for d in datasets) == 0:
        raise ConfigError("pretraining needs at least one non-empty dataset")
    base = model.copy()
    base.set_trainable(encoder=True, base=True, a=False, b=False)
    if epochs > 0:
        pooled = np.concatenate([d.train for d in datasets])
        rng = np.random.default_rng([seed, _PRETRAIN_STREAM])
        losses = _train_epochs(base, pooled, epochs, batch_size, lambda _: lr, {}, rng)
        log.info("pretrain: %d epochs, final train NMSE %.4f", epochs, losses[-1])
    base.zero_grad()
    return base


def with_adapters(model: Autoencoder, rank: int, alpha: float, rng: np.random.Generator) -> Autoencoder:
    """Copy of ``model`` whose decoder layers carry fresh rank-``rank`` adapters."""
    out = model.copy()
    layers = []
    for old in out.decoder.layers:
        d1, d2 = old.dims
        layer = LoraLinear(old.w0, Param(np.zeros((rank, d2))), Param(np.zeros((d1, rank))), old.bias, alpha, rank)
        layers.append(init_lora(layer, rng))
    out.decoder.layers = layers
    return out


@dataclass
class FederationState:
    strategy: Strategy
    hyper: FedHyper
    bs: BSState
    ues: list[UEState]
    ledger: CucLedger = field(default_factory=CucLedger)
    seed: int = 0


def broadcast_init(
    base: Autoencoder,
    datasets: Sequence[Dataset],
    strategy: Strategy,
    hyper: FedHyper,
    seed: int = 0,
) -> FederationState:
    """Step 1: the BS attaches zero-update adapters to the base and sends identical copies to every UE."""
    if len(datasets) < 1:
        raise ConfigError("need at least one UE")
    strategy = Strategy(strategy)
    rng = np.random.default_rng([seed, _LORA_STREAM])
    global_model = with_adapters(base, hyper.rank, hyper.alpha, rng)
    if strategy.uses_lora:
        global_model.set_trainable(encoder=True, base=False, a=True, b=True)
    else:
        global_model.set_trainable(encoder=True, base=True, a=False, b=False)
    global_model.zero_grad()
    ues = [UEState(k, global_model.copy(), ds) for k, ds in enumerate(datasets)]
    return FederationState(strategy, hyper, BSState(global_model.copy()), ues, seed=seed)


@dataclass
class RoundRecord:
    round: int
    phase: str
    cuc_cumulative: int
    nmse_db: list[float]
    manifest: tuple[str, ...] = ()
    train_loss: list[list[float]] = field(default_factory=list)

    @property
    def nmse_db_avg(self) -> float:
        return float(np.mean(self.nmse_db))


def evaluate(state: FederationState, split: str = "test") -> list[float]:
    """Per-UE NMSE (dB): each UE's own encoder with its copy of the shared decoder."""
    out = []
    for ue in state.ues:
        data = getattr(ue.dataset, split)
        out.append(nmse_db(data, ue.model.reconstruct(data)))
    return out


def run_round(state: FederationState) -> RoundRecord:
    """Steps 2-4 for one round; mutates ``state`` and returns the round's record."""
    hyper = state.hyper
    t = state.bs.round + 1
    phase = af_phase(t, state.strategy)
    msgs, losses = [], []
    for ue in sorted(state.ues, key=lambda u: u.ue_id):
        rng = np.random.default_rng([state.seed, ue.ue_id, t])
        losses.append(
            local_train(ue, phase, hyper.local_epochs, hyper.lr, hyper.lr_ratio, hyper.batch_size, rng)
        )
        msgs.append(make_uplink(ue, phase, t))

    bs_model = state.bs.model
    if phase in (Phase.UPLOAD_A, Phase.UPLOAD_B, Phase.UPLOAD_BOTH):
        halves = {Phase.UPLOAD_A: "A", Phase.UPLOAD_B: "B"}.get(phase, "AB")
        for half in halves:
            agg = fedavg_adapters(msgs, half)
            bs_model.decoder.set_adapters(half, agg.tensors)
            for ue in state.ues:
                ue.model.decoder.set_adapters(half, agg.tensors)
    else:
        merged = fedavg_decoder(msgs) if phase is Phase.UPLOAD_DECODER else fedavg_full(msgs)
        load_named(bs_model, merged)
        for ue in state.ues:
            load_named(ue.model, merged)

    state.ledger.record(sum(m.param_count for m in msgs))
    state.bs.round = t
    manifest = tuple(sorted({k for m in msgs for k in m.payload}))
    return RoundRecord(t, phase.value, state.ledger.total, evaluate(state), manifest, losses)


@dataclass
class ExperimentHistory:
    strategy: Strategy
    records: list[RoundRecord]
    ledger: CucLedger

    @property
    def n_ues(self) -> int:
        return len(self.records[0].nmse_db)

    @property
    def cuc_total(self) -> int:
        return self.ledger.total

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]

    def nmse_at_budget(self, cuc: int) -> float:
        """Average NMSE (dB) of the last round whose cumulative cost is <= ``cuc``."""
        eligible = [r for r in self.records if r.cuc_cumulative <= cuc]
        return eligible[-1].nmse_db_avg

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["round", "phase", "cuc_cumulative", "nmse_db_avg"]
        cols += [f"nmse_db_ue{k}" for k in range(self.n_ues)]
        buf.write(",".join(cols) + "\n")
        for r in self.records:
            vals = [str(r.round), r.phase, str(r.cuc_cumulative), f"{r.nmse_db_avg:.6f}"]
            vals += [f"{x:.6f}" for x in r.nmse_db]
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()


def init_record(state: FederationState) -> RoundRecord:
    return RoundRecord(0, "Init", 0, evaluate(state))


def run_federation(
    base: Autoencoder,
    datasets: Sequence[Dataset],
    strategy: Strategy,
    hyper: FedHyper,
    seed: int = 0,
    on_round: Callable[[FederationState, RoundRecord], None] | None = None,
) -> ExperimentHistory:
    """Initialize from ``base`` and run the strategy's full round budget.

    The history starts with a round-0 record (pretrained model, zero cost).
    """
    state = broadcast_init(base, datasets, strategy, hyper, seed)
    records = [init_record(state)]
    for _ in range(round_budget(state.strategy, hyper.rounds)):
        rec = run_round(state)
        records.append(rec)
        log.debug("%s round %d %s: %.3f dB", state.strategy.value, rec.round, rec.phase, rec.nmse_db_avg)
        if on_round is not None:
            on_round(state, rec)
    return ExperimentHistory(state.strategy, records, state.ledger)


def rcuc(history_m: ExperimentHistory | int, history_fedavg: ExperimentHistory | int) -> float:
    """CUC of a method over CUC of FedAvg; histories or raw ledger totals."""
    num = history_m if isinstance(history_m, int) else history_m.cuc_total
    den = history_fedavg if isinstance(history_fedavg, int) else history_fedavg.cuc_total
    if den == 0:
        raise ConfigError("FedAvg reference has zero uplink cost")
    return float(Fraction(num, den))


def closed_form_cuc(model: Autoencoder, strategy: Strategy, rounds: int, n_ues: int) -> int:
    """Ledger total a strategy accrues over its budget, from parameter counts alone."""
    strategy = Strategy(strategy)
    n = round_budget(strategy, rounds)
    return n_ues * sum(count_params(model, PHASE_SELECTOR[af_phase(t, strategy)]) for t in range(1, n + 1))

"""Alternating training of the topic module and the reply predictor.

The run follows a fixed phase order: topic-module pretraining, predictor
pretraining, then rounds that alternate one block of topic epochs with one
block of predictor epochs.  Each phase updates only its own parameter set;
the other is frozen and, during predictor phases, the frozen topic module is
evaluated once up front so its outputs enter the predictor graph as
constants.

Every epoch appends one machine-parsable ``key=value`` log line.  Given the
same config and seed, two runs produce byte-identical logs and checkpoints.
"""

from __future__ import annotations

import copy
import hashlib
import math
import pickle
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from .autodiff import Tape, Tensor, backward
from .corpus import (DataBundle, NewEntryInstance, instance_context,
                     query_turn)
from .layers import Adam, OptimError, clip_global_norm, grads_by_name
from .rng import Streams
from .snp import (InstanceInputs, SnpConfig, SnpParams, build_batch,
                  forward_batch, init_snp, snp_loss)
from .tdm import (TdmConfig, TdmParams, conversation_topic_bow, gumbel_noise,
                  infer_mu, infer_pi, init_tdm, tau_schedule, tdm_loss,
                  turn_full_bows)

CHECKPOINT_VERSION = 1
LR_GRID = (1e-3, 1e-4, 1e-5)
MAX_GRAD_NORM = 5.0

PRETRAIN_TDM = "pretrain-tdm"
PRETRAIN_SNP = "pretrain-snp"
JOINT_TDM = "joint-tdm"
JOINT_SNP = "joint-snp"
DONE = "done"


class TrainerError(RuntimeError):
    """Unusable training setup, corrupted checkpoint, or unrecoverable run."""


@dataclass
class TrainConfig:
    n_topics: int = 10
    n_behaviors: int = 10
    hidden_size: int = 100        # GRU width in the predictor
    tdm_hidden_size: int = 100    # encoder hidden width in the topic module
    embedding_size: int = 100
    mi_weight: float = 0.01
    tau_start: float = 1.0
    tau_end: float = 0.3
    dropout: float = 0.2
    tdm_pretrain_epochs: int = 100
    snp_pretrain_epochs: int = 5
    joint_tdm_epochs: int = 1
    joint_snp_epochs: int = 1
    max_rounds: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    patience: int = 5
    seed: int = 0
    precision_bits: int = 32
    ablate_topic_init: bool = False
    ablate_disc_concat: bool = False
    ablate_disc_att: bool = False

    def validate(self) -> None:
        counts = (self.tdm_pretrain_epochs, self.snp_pretrain_epochs,
                  self.joint_tdm_epochs, self.joint_snp_epochs, self.max_rounds)
        if any(c < 0 for c in counts):
            raise TrainerError(f"epoch counts must be nonnegative, got {counts}")
        if self.max_rounds > 0 and self.joint_tdm_epochs + self.joint_snp_epochs == 0:
            raise TrainerError("alternating rounds configured but both joint "
                               "epoch counts are zero")
        if self.batch_size < 1:
            raise TrainerError(f"batch size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise TrainerError(f"learning rate must be positive, got {self.learning_rate}")
        if self.patience < 1:
            raise TrainerError(f"patience must be at least 1, got {self.patience}")
        if self.precision_bits not in (32, 64):
            raise TrainerError(f"precision must be 32 or 64, got {self.precision_bits}")
        self.tdm_config().validate()
        self.snp_config().validate()

    def tdm_config(self) -> TdmConfig:
        return TdmConfig(n_topics=self.n_topics, n_behaviors=self.n_behaviors,
                         hidden_size=self.tdm_hidden_size,
                         mi_weight=self.mi_weight,
                         tau_start=self.tau_start, tau_end=self.tau_end)

    def snp_config(self) -> SnpConfig:
        return SnpConfig(topic_dim=self.n_topics, n_behaviors=self.n_behaviors,
                         hidden_size=self.hidden_size,
                         embedding_size=self.embedding_size,
                         dropout=self.dropout,
                         ablate_topic_init=self.ablate_topic_init,
                         ablate_disc_concat=self.ablate_disc_concat,
                         ablate_disc_att=self.ablate_disc_att)


# ---------------------------------------------------------------------------
# Static data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedInstance:
    """Vocabulary-level view of one instance, fixed for the whole run."""

    instance: NewEntryInstance
    token_ids: list[np.ndarray]    # context turns then the query turn
    turn_bows: np.ndarray          # (T, V) full-vocabulary counts
    context_topic_bow: np.ndarray  # (Vt,)
    history_ids: list[str]
    label: int


def prepare_instances(bundle: DataBundle,
                      instances: list[NewEntryInstance]) -> list[PreparedInstance]:
    out = []
    for inst in instances:
        conv = bundle.conversation(inst.conversation_id)
        context = instance_context(conv, inst)
        turns = context + [query_turn(conv, inst)]
        out.append(PreparedInstance(
            instance=inst,
            token_ids=[bundle.vocab.encode(t.tokens) for t in turns],
            turn_bows=turn_full_bows(bundle.vocab, turns),
            context_topic_bow=conversation_topic_bow(bundle.vocab, context),
            history_ids=bundle.history.conversations_for(
                inst.newcomer_id, exclude=inst.conversation_id),
            label=inst.label))
    return out


def tdm_training_pairs(bundle: DataBundle) -> tuple[np.ndarray, np.ndarray]:
    """(conversation bag, turn bag) rows over all training-side turns."""
    conv_rows, turn_rows = [], []
    for cid in bundle.train_conversation_ids:
        conv = bundle.conversation(cid)
        bag = conversation_topic_bow(bundle.vocab, conv.turns)
        bows = turn_full_bows(bundle.vocab, conv.turns)
        for row in bows:
            conv_rows.append(bag)
            turn_rows.append(row)
    if not conv_rows:
        raise TrainerError("no training-side conversations to fit the topic module")
    return np.stack(conv_rows), np.stack(turn_rows)


# ---------------------------------------------------------------------------
# Topic-module outputs consumed by the predictor (plain arrays, no tape)
# ---------------------------------------------------------------------------


@dataclass
class TopicView:
    """Frozen topic-module outputs for a fixed set of prepared instances."""

    e_c: np.ndarray                    # (n, K) context topic vectors
    e_u: list[np.ndarray | None]       # per instance; None = no history
    pi: list[np.ndarray]               # per instance, (T_i, D)


def build_topic_view(tdm_p: TdmParams, bundle: DataBundle,
                     prepared: list[PreparedInstance]) -> TopicView:
    conv_ids = sorted({cid for p in prepared for cid in p.history_ids})
    if conv_ids:
        bags = np.stack([conversation_topic_bow(bundle.vocab,
                                                bundle.conversation(c).turns)
                         for c in conv_ids])
        mu_by_conv = dict(zip(conv_ids, infer_mu(tdm_p, bags)))
    else:
        mu_by_conv = {}
    e_c = infer_mu(tdm_p, np.stack([p.context_topic_bow for p in prepared]))
    e_u: list[np.ndarray | None] = []
    for p in prepared:
        if p.history_ids:
            e_u.append(np.mean([mu_by_conv[c] for c in p.history_ids], axis=0))
        else:
            e_u.append(None)
    lengths = [p.turn_bows.shape[0] for p in prepared]
    all_pi = infer_pi(tdm_p, np.concatenate([p.turn_bows for p in prepared]))
    pi, at = [], 0
    for n in lengths:
        pi.append(all_pi[at:at + n])
        at += n
    return TopicView(e_c=e_c, e_u=e_u, pi=pi)


def hard_instance_inputs(prepared: list[PreparedInstance],
                         view: TopicView) -> list[InstanceInputs]:
    """Inference-style inputs: each turn's discourse is its argmax one-hot."""
    items = []
    for i, p in enumerate(prepared):
        pi = view.pi[i]
        disc = np.zeros_like(pi)
        disc[np.arange(len(pi)), pi.argmax(axis=1)] = 1.0
        items.append(InstanceInputs(p.instance.instance_id, p.token_ids,
                                    view.e_c[i], view.e_u[i], disc, p.label))
    return items


def relaxed_instance_inputs(prepared: list[PreparedInstance], view: TopicView,
                            tau: float, rng: np.random.Generator
                            ) -> list[InstanceInputs]:
    """Training-style inputs: temperature-relaxed discourse samples."""
    items = []
    for i, p in enumerate(prepared):
        pi = view.pi[i]
        logits = (np.log(np.clip(pi, 1e-12, 1.0))
                  + gumbel_noise(pi.shape, rng)) / tau
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        disc = e / e.sum(axis=1, keepdims=True)
        items.append(InstanceInputs(p.instance.instance_id, p.token_ids,
                                    view.e_c[i], view.e_u[i], disc, p.label))
    return items


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    tdm_params: TdmParams
    snp_params: SnpParams
    mu_w: float
    log: list[str]
    best_f1: float
    best_valid: ev.MetricsReport | None
    diverged: bool = False


class Trainer:
    """Owns both parameter sets and walks the phase machine epoch by epoch."""

    def __init__(self, cfg: TrainConfig, bundle: DataBundle):
        cfg.validate()
        if not bundle.train or not bundle.valid:
            raise TrainerError("training and validation splits must be nonempty")
        self.cfg = cfg
        self.bundle = bundle
        self.tdm_cfg = cfg.tdm_config()
        self.snp_cfg = cfg.snp_config()
        self.mu_w = ev.positive_class_weight([i.label for i in bundle.train])
        self.streams = Streams(cfg.seed)
        with ad.precision(cfg.precision_bits):
            self.tdm_params = init_tdm(bundle.vocab, self.tdm_cfg,
                                       self.streams["init"])
            self.snp_params = init_snp(bundle.vocab.size, self.snp_cfg,
                                       self.streams["init"])
        self.tdm_named = self.tdm_params.named()
        self.snp_named = self.snp_params.named()
        self.tdm_opt = Adam(self.tdm_named, lr=cfg.learning_rate)
        self.snp_opt = Adam(self.snp_named, lr=cfg.learning_rate)

        self.conv_bags, self.turn_bags = tdm_training_pairs(bundle)
        self.prep_train = prepare_instances(bundle, bundle.train)
        self.prep_valid = prepare_instances(bundle, bundle.valid)

        self.phase = PRETRAIN_TDM
        self.epoch_in_phase = 0
        self.rounds_done = 0
        self.global_epoch = 0
        self.tdm_epochs_done = 0
        self.bad_checks = 0
        self.best_f1 = -1.0
        self.best_valid: ev.MetricsReport | None = None
        self.best_state: dict | None = None
        self.diverged = False
        self.log: list[str] = []
        self._view: TopicView | None = None
        self._view_dirty = True
        self._last_good: dict | None = None

    # -- phase machine -----------------------------------------------------

    def _phase_length(self, phase: str) -> int:
        return {PRETRAIN_TDM: self.cfg.tdm_pretrain_epochs,
                PRETRAIN_SNP: self.cfg.snp_pretrain_epochs,
                JOINT_TDM: self.cfg.joint_tdm_epochs,
                JOINT_SNP: self.cfg.joint_snp_epochs}[phase]

    def _advance_phase(self) -> None:
        if self.phase == PRETRAIN_TDM:
            self.phase = PRETRAIN_SNP
        elif self.phase == PRETRAIN_SNP:
            self.phase = JOINT_TDM if self.cfg.max_rounds > 0 else DONE
        elif self.phase == JOINT_TDM:
            self.phase = JOINT_SNP
        elif self.phase == JOINT_SNP:
            self.rounds_done += 1
            self.phase = (JOINT_TDM if self.rounds_done < self.cfg.max_rounds
                          else DONE)
        self.epoch_in_phase = 0

    def step_epoch(self) -> str | None:
        """Run the next configured epoch; None once the machine is done."""
        while self.phase != DONE and self.epoch_in_phase >= self._phase_length(self.phase):
            self._advance_phase()
        if self.phase == DONE:
            return None
        with ad.precision(self.cfg.precision_bits):
            try:
                line = self._run_epoch()
            except _Divergence as d:
                return self._handle_divergence(str(d))
        self.epoch_in_phase += 1
        self._last_good = self.training_state()
        self.log.append(line)
        return line

    def run(self) -> TrainResult:
        while True:
            if self.step_epoch() is None:
                break
        if self.best_state is not None:
            self._load_params(self.best_state)
        return TrainResult(config=self.cfg, tdm_params=self.tdm_params,
                           snp_params=self.snp_params, mu_w=self.mu_w,
                           log=self.log, best_f1=self.best_f1,
                           best_valid=self.best_valid, diverged=self.diverged)

    # -- epochs ------------------------------------------------------------

    def _tau(self) -> float:
        return tau_schedule(self.tdm_cfg, self.tdm_epochs_done,
                            self.cfg.tdm_pretrain_epochs)

    def _run_epoch(self) -> str:
        phase = self.phase
        self.global_epoch += 1
        tau = self._tau()
        stats: dict[str, str] = {}
        if phase in (PRETRAIN_TDM, JOINT_TDM):
            losses = self._tdm_epoch(tau)
            self.tdm_epochs_done += 1
            stats.update({k: f"{v:.6f}" for k, v in losses.items()})
            stats["l_snp"] = "na"
            stats["clamped"] = "na"
        else:
            l_snp, clamped = self._snp_epoch(tau)
            stats.update({k: "na" for k in ("l_z", "l_d", "l_t", "l_mi")})
            stats["l_snp"] = f"{l_snp:.6f}"
            stats["clamped"] = str(clamped)

        if phase == PRETRAIN_TDM:
            stats["val_auc"] = stats["val_f1"] = stats["val_acc"] = "na"
        else:
            report = self._validate()
            stats["val_auc"] = f"{report.auc:.6f}"
            stats["val_f1"] = f"{report.f1:.6f}"
            stats["val_acc"] = f"{report.accuracy:.6f}"
            self._track_best(report, phase)
        stats["best_f1"] = "na" if self.best_f1 < 0 else f"{self.best_f1:.6f}"

        parts = [f"epoch={self.global_epoch}", f"phase={phase}",
                 f"phase_epoch={self.epoch_in_phase + 1}", f"tau={tau:.4f}"]
        parts += [f"{k}={stats[k]}" for k in
                  ("l_z", "l_d", "l_t", "l_mi", "l_snp", "clamped",
                   "val_auc", "val_f1", "val_acc", "best_f1")]
        return " ".join(parts)

    def _tdm_epoch(self, tau: float) -> dict[str, float]:
        n = self.conv_bags.shape[0]
        order = self.streams["shuffle"].permutation(n)
        sums = {"l_z": 0.0, "l_d": 0.0, "l_t": 0.0, "l_mi": 0.0}
        for start in range(0, n, self.cfg.batch_size):
            idx = order[start:start + self.cfg.batch_size]
            eps = self.streams["sampling"].standard_normal(
                (len(idx), self.cfg.n_topics))
            gum = gumbel_noise((len(idx), self.cfg.n_behaviors),
                               self.streams["sampling"])
            with Tape() as tape:
                loss = tdm_loss(self.tdm_params, self.tdm_cfg,
                                self.conv_bags[idx], self.turn_bags[idx],
                                tau, eps, gum)
            if not math.isfinite(loss.value):
                raise _Divergence(f"topic loss {loss.value} at epoch "
                                  f"{self.global_epoch}")
            grads = backward(tape, loss.total)
            named = grads_by_name(self.tdm_named, grads)
            clip_global_norm(named, MAX_GRAD_NORM)
            self._opt_step(self.tdm_opt, named)
            w = len(idx) / n
            for key in sums:
                sums[key] += getattr(loss, key) * w
        self._view_dirty = True
        return sums

    def _snp_epoch(self, tau: float) -> tuple[float, int]:
        view = self._topic_view()
        items = relaxed_instance_inputs(self.prep_train, view, tau,
                                        self.streams["sampling"])
        order = self.streams["shuffle"].permutation(len(items))
        total, clamped = 0.0, 0
        for start in range(0, len(items), self.cfg.batch_size):
            batch = build_batch([items[i] for i in order[start:start + self.cfg.batch_size]],
                                pad_id=self.bundle.vocab.pad_index)
            with Tape() as tape:
                probs = forward_batch(self.snp_params, self.snp_cfg, batch,
                                      training=True,
                                      dropout_rng=self.streams["dropout"])
                loss, n_cl = snp_loss(probs, batch.labels, self.mu_w)
            if not math.isfinite(loss.item()):
                raise _Divergence(f"predictor loss {loss.item()} at epoch "
                                  f"{self.global_epoch}")
            grads = backward(tape, loss)
            self.snp_params.embeddings.zero_pad_grad(grads)
            named = grads_by_name(self.snp_named, grads)
            clip_global_norm(named, MAX_GRAD_NORM)
            self._opt_step(self.snp_opt, named)
            total += loss.item()
            clamped += n_cl
        return total / len(items), clamped

    def _opt_step(self, opt: Adam, named: dict[str, np.ndarray]) -> None:
        try:
            opt.step(named)
        except OptimError as e:
            raise _Divergence(str(e)) from e

    # -- evaluation and selection -------------------------------------------

    def _topic_view(self) -> TopicView:
        if self._view_dirty or self._view is None:
            self._view = build_topic_view(self.tdm_params, self.bundle,
                                          self.prep_train + self.prep_valid)
            self._view_dirty = False
        return self._view

    def _split_view(self, offset: int, prepared: list[PreparedInstance]) -> TopicView:
        view = self._topic_view()
        sl = slice(offset, offset + len(prepared))
        return TopicView(e_c=view.e_c[sl], e_u=view.e_u[sl], pi=view.pi[sl])

    def _validate(self) -> ev.MetricsReport:
        view = self._split_view(len(self.prep_train), self.prep_valid)
        scores = predict_scores(self.snp_params, self.snp_cfg, self.prep_valid,
                                view, self.cfg.batch_size,
                                pad_id=self.bundle.vocab.pad_index)
        return ev.classification_metrics(scores,
                                         [p.label for p in self.prep_valid])

    def _track_best(self, report: ev.MetricsReport, phase: str) -> None:
        if report.f1 > self.best_f1:
            self.best_f1 = report.f1
            self.best_valid = report
            self.best_state = {"tdm": _param_arrays(self.tdm_named),
                               "snp": _param_arrays(self.snp_named)}
            self.bad_checks = 0
        elif phase in (JOINT_TDM, JOINT_SNP):
            self.bad_checks += 1
            if self.bad_checks >= self.cfg.patience:
                self.phase = DONE

    # -- state, checkpointing, divergence ------------------------------------

    def training_state(self) -> dict:
        return {
            "config": asdict(self.cfg),
            "mu_w": self.mu_w,
            "tdm": _param_arrays(self.tdm_named),
            "snp": _param_arrays(self.snp_named),
            "tdm_opt": self.tdm_opt.state_dict(),
            "snp_opt": self.snp_opt.state_dict(),
            "streams": self.streams.state_dict(),
            "phase": {"phase": self.phase,
                      "epoch_in_phase": self.epoch_in_phase,
                      "rounds_done": self.rounds_done,
                      "global_epoch": self.global_epoch,
                      "tdm_epochs_done": self.tdm_epochs_done,
                      "bad_checks": self.bad_checks,
                      "best_f1": self.best_f1,
                      "diverged": self.diverged},
            "best_valid": None if self.best_valid is None else asdict(self.best_valid),
            "best_state": copy.deepcopy(self.best_state),
            "log": list(self.log),
        }

    def load_training_state(self, state: dict) -> None:
        if state["config"] != asdict(self.cfg):
            raise TrainerError("checkpoint config does not match this trainer")
        self.mu_w = state["mu_w"]
        self._load_params({"tdm": state["tdm"], "snp": state["snp"]})
        self.tdm_opt.load_state_dict(state["tdm_opt"])
        self.snp_opt.load_state_dict(state["snp_opt"])
        self.streams.load_state_dict(state["streams"])
        ph = state["phase"]
        self.phase = ph["phase"]
        self.epoch_in_phase = ph["epoch_in_phase"]
        self.rounds_done = ph["rounds_done"]
        self.global_epoch = ph["global_epoch"]
        self.tdm_epochs_done = ph["tdm_epochs_done"]
        self.bad_checks = ph["bad_checks"]
        self.best_f1 = ph["best_f1"]
        self.diverged = ph["diverged"]
        bv = state["best_valid"]
        self.best_valid = None if bv is None else ev.MetricsReport(**bv)
        self.best_state = copy.deepcopy(state["best_state"])
        self.log = list(state["log"])
        self._view_dirty = True
        self._last_good = None

    def _load_params(self, state: dict) -> None:
        for named, saved in ((self.tdm_named, state["tdm"]),
                             (self.snp_named, state["snp"])):
            if set(named) != set(saved):
                raise TrainerError("checkpoint parameter names do not match")
            for name, tensor in named.items():
                if tensor.data.shape != saved[name].shape:
                    raise TrainerError(f"checkpoint shape mismatch for {name}")
                tensor.data[...] = saved[name]
        self._view_dirty = True

    def _handle_divergence(self, reason: str) -> str | None:
        failed_epoch = self.global_epoch
        restored = self._last_good
        if restored is not None:
            self.load_training_state(restored)
            self._last_good = restored
        self.diverged = True
        self.phase = DONE
        line = (f"epoch={failed_epoch} phase=aborted event=divergence "
                f"reason=\"{reason}\" restored={restored is not None}")
        self.log.append(line)
        return line


class _Divergence(Exception):
    pass


def _param_arrays(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in named.items()}


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def joint_train(cfg: TrainConfig, bundle: DataBundle,
                checkpoint_path: str | None = None,
                resume_from: str | None = None) -> TrainResult:
    trainer = Trainer(cfg, bundle)
    if resume_from is not None:
        trainer.load_training_state(load_checkpoint(resume_from))
    result = trainer.run()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, trainer.training_state())
    return result


@dataclass
class GridResult:
    rates: list[float]
    valid_f1: list[float]
    best_rate: float
    best: TrainResult


def learning_rate_grid(cfg: TrainConfig, bundle: DataBundle,
                       rates: tuple[float, ...] = LR_GRID) -> GridResult:
    """Train once per rate and keep the model with the best validation F1."""
    results = []
    for lr in rates:
        results.append(joint_train(replace(cfg, learning_rate=lr), bundle))
    f1s = [r.best_f1 for r in results]
    best_i = int(np.argmax(f1s))
    return GridResult(rates=list(rates), valid_f1=f1s,
                      best_rate=rates[best_i], best=results[best_i])


def save_checkpoint(path: str, state: dict) -> None:
    blob = pickle.dumps(state, protocol=4)
    wrapper = {"version": CHECKPOINT_VERSION,
               "sha256": hashlib.sha256(blob).hexdigest(),
               "blob": blob}
    with open(path, "wb") as fh:
        pickle.dump(wrapper, fh, protocol=4)


def load_checkpoint(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            wrapper = pickle.load(fh)
    except (OSError, pickle.UnpicklingError, EOFError, AttributeError) as e:
        raise TrainerError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(wrapper, dict) or set(wrapper) != {"version", "sha256", "blob"}:
        raise TrainerError(f"malformed checkpoint {path}")
    if wrapper["version"] != CHECKPOINT_VERSION:
        raise TrainerError(f"checkpoint version {wrapper['version']} "
                           f"unsupported (expected {CHECKPOINT_VERSION})")
    if hashlib.sha256(wrapper["blob"]).hexdigest() != wrapper["sha256"]:
        raise TrainerError(f"checkpoint {path} failed its integrity check")
    return pickle.loads(wrapper["blob"])


def restore_model(state: dict, bundle: DataBundle
                  ) -> tuple[TrainConfig, TdmParams, SnpParams, float]:
    """Rebuild parameter objects from a checkpoint produced after training."""
    cfg = TrainConfig(**state["config"])
    with ad.precision(cfg.precision_bits):
        tdm_params = init_tdm(bundle.vocab, cfg.tdm_config(), Streams(cfg.seed)["init"])
        snp_params = init_snp(bundle.vocab.size, cfg.snp_config(),
                              Streams(cfg.seed)["init"])
    for named, saved in ((tdm_params.named(), state["tdm"]),
                         (snp_params.named(), state["snp"])):
        if set(named) != set(saved):
            raise TrainerError("checkpoint parameter names do not match corpus")
        for name, tensor in named.items():
            if tensor.data.shape != saved[name].shape:
                raise TrainerError(f"checkpoint shape mismatch for {name}")
            tensor.data[...] = saved[name]
    return cfg, tdm_params, snp_params, state["mu_w"]


# ---------------------------------------------------------------------------
# Prediction and analysis on a frozen model
# ---------------------------------------------------------------------------


def predict_scores(snp_params: SnpParams, snp_cfg: SnpConfig,
                   prepared: list[PreparedInstance], view: TopicView,
                   batch_size: int = 64, pad_id: int = 0) -> np.ndarray:
    """Success probabilities, in the order of ``prepared``."""
    items = hard_instance_inputs(prepared, view)
    out = np.zeros(len(items))
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        probs = forward_batch(snp_params, snp_cfg, build_batch(chunk, pad_id))
        out[start:start + len(chunk)] = probs.data[:, 0]
    return out


def topic_similarity_summary(prepared: list[PreparedInstance],
                             view: TopicView) -> dict[str, float]:
    """Mean user-vs-context topic similarity for each outcome class.

    Instances without history are skipped: there is no user interest vector
    to compare.
    """
    sums = {0: 0.0, 1: 0.0}
    counts = {0: 0, 1: 0}
    skipped = 0
    for i, p in enumerate(prepared):
        if view.e_u[i] is None:
            skipped += 1
            continue
        sim = ev.topic_similarity(view.e_u[i], view.e_c[i])
        sums[p.label] += sim
        counts[p.label] += 1
    return {
        "mean_similarity_successful": sums[1] / counts[1] if counts[1] else float("nan"),
        "mean_similarity_failed": sums[0] / counts[0] if counts[0] else float("nan"),
        "n_successful": counts[1],
        "n_failed": counts[0],
        "n_skipped_no_history": skipped,
    }


def query_discourse_pis(prepared: list[PreparedInstance],
                        view: TopicView) -> np.ndarray:
    """π of each instance's query turn, stacked (n, D)."""
    return np.stack([view.pi[i][-1] for i in range(len(prepared))])

"""End-to-end compositions used by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import GenericModel, train_generic
from .config import DEFAULT, Config
from .detector import replay
from .evaluation import (ChanceResult, ConsistencyError, MetricsReport, adapt_threshold,
                         permutation_chance, permuted_models, session_metrics, tau_grid)
from .features import EpochSet
from .session import ProbabilityStream
from .simulator import make_profile, run_session, training_corpus

ADAPT_BLOCKS = (1, 2, 3)
EVAL_BLOCKS = (4, 5, 6, 7, 8)


def train_from_seed(seed: int, config: Config = DEFAULT) -> tuple[GenericModel, EpochSet]:
    """Generic model on the synthetic donor corpus generated from ``seed``."""
    corpus = training_corpus(seed, config)
    model = train_generic(corpus, config.variance_target, config.outlier_fraction,
                          threshold=config.tau0, filter_spec=config.filter_spec(),
                          info={"training_seed": int(seed),
                                "n_participants": config.n_training_participants})
    return model, corpus


def evaluation_profiles(seed: int, config: Config = DEFAULT, n_control: int = 8,
                        n_sci: int = 4, n_null: int = 4) -> list:
    """Fresh participants: control-like at full amplitude, SCI-like at reduced
    amplitude and participants without any ErrP."""
    rng = np.random.default_rng([seed, 2])
    seeds = rng.integers(2 ** 31, size=n_control + n_sci + n_null)
    profiles = []
    for i in range(n_control):
        profiles.append(make_profile(f"C{i + 1}", int(seeds[i]), "control", 1.0, config))
    for i in range(n_sci):
        profiles.append(make_profile(f"S{i + 1}", int(seeds[n_control + i]), "sci",
                                     config.sci_amplitude_scale, config))
    for i in range(n_null):
        profiles.append(make_profile(f"N{i + 1}", int(seeds[n_control + n_sci + i]),
                                     "control", 0.0, config))
    return profiles


def replay_blocks(session, model: GenericModel, blocks, tau: float | None = None) -> dict:
    """Rerun the detector over recorded blocks.

    Each block starts from a reset detector that is re-armed at every trial
    start, as online. ``tau=None`` uses
    the threshold that was in force in the block. Returns
    ``block -> (ProbabilityStream, detection times)``.
    """
    out = {}
    for b in blocks:
        blk = session.block(b)
        t = blk.tau if tau is None else tau
        rearm = [int(round(tr.start * session.sample_rate)) - blk.start_sample
                 for tr in session.trials_in([b])]
        probs, times, events = replay(model, session.block_raw(b), t,
                                      session.block_start_time(b), chunk=4096, rearm_at=rearm)
        out[b] = (ProbabilityStream(times, probs), np.array([e.time for e in events]))
    return out


def verify_replay(session, replayed: dict) -> None:
    """Recorded detections must match a replay of the raw samples exactly."""
    for b, (_, det) in replayed.items():
        logged = session.detection_times(b)
        if logged.shape != det.shape or np.any(logged != det):
            raise ConsistencyError(f"block {b}: replayed detections differ from the log")


def evaluate_session(session, blocks=EVAL_BLOCKS, config: Config = DEFAULT) -> MetricsReport:
    """Trial metrics of the logged online detections in ``blocks``."""
    blocks = list(blocks)
    det = np.concatenate([session.detection_times(b) for b in blocks])
    taus = sorted({session.block(b).tau for b in blocks})
    return session_metrics(session.trials_in(blocks), det,
                           tau=taus[0] if len(taus) == 1 else None, blocks=blocks,
                           tp_window=config.tp_window, far_interval=config.far_interval)


def personalised_threshold(session, model: GenericModel, blocks=ADAPT_BLOCKS,
                           config: Config = DEFAULT):
    """Threshold re-derived offline from the recorded blocks; returns ``(tau, sweep)``."""
    replayed = replay_blocks(session, model, blocks)
    streams = [replayed[b][0] for b in blocks]
    return adapt_threshold(streams, session.trials_in(blocks), tau_grid(config.grid_step),
                           config.smoothing)


@dataclass
class ParticipantResult:
    participant: str
    group: str
    scale: float
    tau: float
    metrics: MetricsReport
    chance: ChanceResult | None = None

    @property
    def p_joint(self) -> float:
        """Larger of the TPR and TNR p-values: both must beat chance together."""
        if self.chance is None:
            return float("nan")
        return max(self.chance.p_values["tpr"], self.chance.p_values["tnr"])

    @property
    def p_product(self) -> float:
        """p-value of TPR x TNR, the quantity the threshold tuning maximises."""
        return self.chance.p_values["product"] if self.chance else float("nan")

    def above_chance(self, alpha: float = 0.05) -> bool:
        return bool(self.p_joint < alpha)

    def to_dict(self) -> dict:
        row = {"participant": self.participant, "group": self.group, "scale": self.scale,
               "tau": self.tau, "tpr": self.metrics.tpr, "tnr": self.metrics.tnr,
               "edr": self.metrics.edr, "far": self.metrics.far}
        if self.chance is not None:
            row["chance"] = dict(self.chance.chance)
            row["p_values"] = dict(self.chance.p_values)
        else:
            row["chance"], row["p_values"] = {}, {}
        return row


def chance_for_session(session, model: GenericModel, weights, biases,
                       eval_blocks=EVAL_BLOCKS, tuning_blocks=ADAPT_BLOCKS,
                       config: Config = DEFAULT) -> ChanceResult:
    observed = evaluate_session(session, eval_blocks, config)
    return permutation_chance(session, model, weights, biases, eval_blocks,
                              tuning_blocks=list(tuning_blocks) if tuning_blocks else None,
                              grid=tau_grid(config.grid_step), window=config.smoothing,
                              observed=observed)


def transfer_experiment(seed: int, config: Config = DEFAULT, n_perm: int = 100,
                        profiles=None, progress=None):
    """Train on donors, run the closed-loop schedule on fresh participants and
    test each participant against label-permuted generic models.

    Returns ``(model, results)``.
    """
    model, corpus = train_from_seed(seed, config)
    weights, biases = permuted_models(corpus, n_perm, seed + 1, config.variance_target,
                                      config.outlier_fraction)
    del corpus
    profiles = evaluation_profiles(seed, config) if profiles is None else profiles
    results = []
    for profile in profiles:
        session = run_session(profile, model, config)
        chance = chance_for_session(session, model, weights, biases, config=config)
        res = ParticipantResult(profile.participant_id, profile.group,
                                profile.errp_amplitude_scale, session.block(EVAL_BLOCKS[0]).tau,
                                evaluate_session(session, EVAL_BLOCKS, config), chance)
        results.append(res)
        if progress is not None:
            progress(res)
    return model, results

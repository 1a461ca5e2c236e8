//! The kinematic digital twin of the pickling line.
//!
//! Three transport units move steel through two capacity-limited loopers:
//! the FTU unrolls strips and stops to weld them end to end, the STU (the
//! pickling baths) must always move, the TTU stops to cut the band back into
//! strips at the weld seams and recoils them. Looper volumes integrate the
//! speed differences each second; crossing looper1's lower bound or looper2's
//! upper bound terminates the episode ("death"), recoiling the last queued
//! strip completes it.
//!
//! Material is tracked in cumulative coordinates: strip `k` of the queue
//! occupies `[M_k, M_k + len_k)` where `M_k` is the summed length of its
//! predecessors. The line starts full: coordinates below zero belong to the
//! lead-in band from before the episode (attributes borrowed from strip 0),
//! and the FTU keeps welding follow-up strips (the queue repeated) so the
//! line never starves while the tail of the queue travels to the TTU.

use crate::strip::Strip;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Per-unit motion mode; the digit values match the stage-combination codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Boost = 0,
    Sync = 1,
    Slowdown = 2,
    Stopped = 3,
}

impl Stage {
    pub fn digit(self) -> u8 {
        self as u8
    }
}

/// Two-character code pairing the FTU stage digit with the TTU stage digit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageCombination(pub u8, pub u8);

impl StageCombination {
    /// Dense index in 0..16: FTU digit * 4 + TTU digit.
    pub fn index(self) -> usize {
        self.0 as usize * 4 + self.1 as usize
    }

    pub fn from_index(i: usize) -> Self {
        StageCombination((i / 4) as u8, (i % 4) as u8)
    }

    pub fn code(self) -> String {
        format!("{}{}", self.0, self.1)
    }

    /// True when either unit is in the welding/cutting stage ('3').
    pub fn has_stop(self) -> bool {
        self.0 == 3 || self.1 == 3
    }

    pub fn all() -> impl Iterator<Item = StageCombination> {
        (0..16).map(StageCombination::from_index)
    }
}

impl std::fmt::Display for StageCombination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.0, self.1)
    }
}

/// Truncated normal parameters for weld/cut durations: samples are clamped
/// from below at `min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationDist {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
}

impl DurationDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let n = Normal::new(self.mean, self.sd.max(1e-300)).expect("valid normal");
        n.sample(rng).max(self.min)
    }
}

/// Weld/cut duration distributions plus the prediction error model. The seed
/// pre-samples every event of an episode at reset so all agents face
/// identical randomness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceModel {
    pub weld: DurationDist,
    pub cut: DurationDist,
    pub prediction_sd: f64,
    pub seed: u64,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        DisturbanceModel {
            weld: DurationDist { mean: 180.0, sd: 30.0, min: 120.0 },
            cut: DurationDist { mean: 60.0, sd: 15.0, min: 30.0 },
            prediction_sd: 10.0,
            seed: 0,
        }
    }
}

/// Plant geometry and actuator limits. All speeds m/min, lengths m, times s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineConfig {
    pub looper1_bounds: (f64, f64),
    pub looper2_bounds: (f64, f64),
    /// Sync threshold as a fraction of each looper's span.
    pub sync_fraction: f64,
    /// Hysteresis on sync exit, m.
    pub sync_exit_margin: f64,
    pub unit_max_speed: f64,
    /// Acceleration/deceleration limit for every unit, m/min per second.
    pub ramp: f64,
    /// Residual length that switches a unit into slowdown, m.
    pub slowdown_trigger: f64,
    /// Speed the slowdown stage decays toward, m/min.
    pub approach_speed: f64,
    /// Strip length held inside the STU section, m.
    pub stu_length: f64,
    /// Emergency-braking projection horizon, s; 0 disables braking.
    pub braking_horizon: u32,
    /// Hard cap on episode length, steps.
    pub max_steps: u64,
}

impl Default for LineConfig {
    fn default() -> Self {
        LineConfig {
            looper1_bounds: (20.0, 400.0),
            looper2_bounds: (10.0, 200.0),
            sync_fraction: 0.1,
            sync_exit_margin: 1.0,
            unit_max_speed: 250.0,
            ramp: 10.0,
            slowdown_trigger: 50.0,
            approach_speed: 60.0,
            stu_length: 300.0,
            braking_horizon: 30,
            max_steps: 200_000,
        }
    }
}

/// How the FTU starts the episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FtuInit {
    /// Mid-unroll of strip 0, `progress` in [0, 1).
    Unrolling { progress: f64 },
    /// Mid-weld of the lead-in/strip-0 seam, `remaining_frac` in (0, 1].
    Welding { remaining_frac: f64 },
}

/// How the TTU starts the episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TtuInit {
    Recoiling,
    /// Mid-cut at a lead-in seam, `remaining_frac` in (0, 1].
    Cutting { remaining_frac: f64 },
}

/// Initial conditions of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialConditions {
    pub v1: f64,
    pub v2: f64,
    pub stu_speed: f64,
    pub ftu: FtuInit,
    pub ttu: TtuInit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalCause {
    /// A looper constraint was violated.
    Death,
    /// The last queued strip was fully recoiled.
    Complete,
}

/// Kinematic state of one transport unit.
#[derive(Clone, Debug)]
pub struct UnitState {
    pub speed: f64,
    pub stage: Stage,
    /// FTU: strip length left to unroll; TTU: length left before the blades.
    pub residual_length: f64,
    /// Remaining weld/cut seconds while stopped.
    pub process_timer: f64,
    /// Current strip index; -1 is the lead-in band, values past the queue
    /// length are follow-up strips (queue repeated).
    pub strip_index: i64,
    sync_latched: bool,
    /// Prediction for the in-progress stop, fixed at event start.
    pred_total: f64,
    elapsed_in_stop: f64,
    /// Next weld/cut event index into the pre-sampled arrays.
    event_cursor: usize,
}

/// Looper fill state and bounds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LooperState {
    pub volume: f64,
    pub lower: f64,
    pub upper: f64,
    pub sync_threshold: f64,
}

/// What one simulated second did; the harness serializes these as log rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub time: u64,
    pub combination: StageCombination,
    /// Effective speeds applied during the second (partial-feed corrected).
    pub ftu_speed: f64,
    pub stu_speed: f64,
    pub ttu_speed: f64,
    pub v1: f64,
    pub v2: f64,
    pub cap_min: f64,
    pub cap_max: f64,
    pub braked: bool,
    pub t_w_pred: f64,
    pub t_c_pred: f64,
    pub terminal: Option<TerminalCause>,
}

/// Full line state; owns the pre-sampled disturbances and the strip queue.
#[derive(Clone, Debug)]
pub struct LineState {
    cfg: LineConfig,
    queue: Vec<Strip>,
    caps: Vec<(f64, f64)>,
    prefix: Vec<f64>,
    queue_total: f64,
    pub time: u64,
    pub stu_speed: f64,
    pub ftu: UnitState,
    pub ttu: UnitState,
    pub looper1: LooperState,
    pub looper2: LooperState,
    /// Cumulative material fed through the weld point, m.
    a_fed: f64,
    /// Cumulative material cut at the blades, m.
    d_cut: f64,
    pub strips_in_stu: Vec<i64>,
    weld_true: Vec<f64>,
    weld_pred: Vec<f64>,
    cut_true: Vec<f64>,
    cut_pred: Vec<f64>,
    terminal: Option<TerminalCause>,
    /// Steps where the cap clamp or emergency braking overrode the command.
    pub clamp_events: u64,
    pub brake_events: u64,
}

fn ramp_toward(current: f64, target: f64, ramp: f64) -> f64 {
    current + (target - current).clamp(-ramp, ramp)
}

impl LineState {
    /// Builds the initial state. `caps` are the per-strip (v_min, v_max)
    /// speed-table bounds aligned with `queue`. Deterministic in
    /// (queue, ic, disturbance.seed): every weld/cut duration and its
    /// prediction is pre-sampled here.
    pub fn reset(cfg: LineConfig, queue: Vec<Strip>, caps: Vec<(f64, f64)>, ic: InitialConditions, disturbance: &DisturbanceModel) -> Result<Self> {
        if queue.is_empty() {
            return Err(Error::Config("empty strip queue".into()));
        }
        if queue.len() != caps.len() {
            return Err(Error::Config("queue/caps length mismatch".into()));
        }
        let (lo1, up1) = cfg.looper1_bounds;
        let (lo2, up2) = cfg.looper2_bounds;
        if !(lo1 < up1 && lo2 < up2) {
            return Err(Error::Config("looper bounds must be ordered".into()));
        }
        if up2 - lo2 >= up1 - lo1 {
            return Err(Error::Config("the second looper's capacity must be smaller than the first's".into()));
        }
        if !(ic.v1 > lo1 && ic.v1 < up1) {
            return Err(Error::Config(format!("initial looper1 volume {} outside ({lo1}, {up1})", ic.v1)));
        }
        if !(ic.v2 > lo2 && ic.v2 < up2) {
            return Err(Error::Config(format!("initial looper2 volume {} outside ({lo2}, {up2})", ic.v2)));
        }

        // pre-sample all weld/cut events and their predictions
        let mut rng = ChaCha12Rng::seed_from_u64(disturbance.seed);
        let noise = Normal::new(0.0, disturbance.prediction_sd.max(1e-300)).expect("valid normal");
        let events = 3 * queue.len() + 8;
        let mut weld_true = Vec::with_capacity(events);
        let mut weld_pred = Vec::with_capacity(events);
        let mut cut_true = Vec::with_capacity(events);
        let mut cut_pred = Vec::with_capacity(events);
        for _ in 0..events {
            let w = disturbance.weld.sample(&mut rng);
            weld_true.push(w);
            weld_pred.push((w + if disturbance.prediction_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 }).max(0.0));
            let c = disturbance.cut.sample(&mut rng);
            cut_true.push(c);
            cut_pred.push((c + if disturbance.prediction_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 }).max(0.0));
        }

        let mut prefix = Vec::with_capacity(queue.len());
        let mut acc = 0.0;
        for s in &queue {
            prefix.push(acc);
            acc += s.length;
        }
        let queue_total = acc;

        let span1 = up1 - lo1;
        let span2 = up2 - lo2;
        let looper1 = LooperState { volume: ic.v1, lower: lo1, upper: up1, sync_threshold: cfg.sync_fraction * span1 };
        let looper2 = LooperState { volume: ic.v2, lower: lo2, upper: up2, sync_threshold: cfg.sync_fraction * span2 };

        let len0 = queue[0].length;
        let (ftu, a_fed) = match ic.ftu {
            FtuInit::Unrolling { progress } => {
                if !(0.0..1.0).contains(&progress) {
                    return Err(Error::Config(format!("ftu progress {progress} outside [0, 1)")));
                }
                let residual = len0 * (1.0 - progress);
                let unit = UnitState {
                    speed: ic.stu_speed,
                    stage: Stage::Boost, // refined below
                    residual_length: residual,
                    process_timer: 0.0,
                    strip_index: 0,
                    sync_latched: false,
                    pred_total: 0.0,
                    elapsed_in_stop: 0.0,
                    event_cursor: 1, // event 0 was the weld that attached strip 0
                };
                (unit, len0 * progress)
            }
            FtuInit::Welding { remaining_frac } => {
                if !(remaining_frac > 0.0 && remaining_frac <= 1.0) {
                    return Err(Error::Config(format!("ftu weld fraction {remaining_frac} outside (0, 1]")));
                }
                let total = weld_true[0];
                let unit = UnitState {
                    speed: 0.0,
                    stage: Stage::Stopped,
                    residual_length: len0,
                    process_timer: total * remaining_frac,
                    strip_index: 0,
                    sync_latched: false,
                    pred_total: weld_pred[0],
                    elapsed_in_stop: total * (1.0 - remaining_frac),
                    event_cursor: 1,
                };
                (unit, 0.0)
            }
        };

        let d_cut = a_fed - ic.v1 - cfg.stu_length - ic.v2;
        if d_cut > 0.0 {
            return Err(Error::Config(format!(
                "initial conditions place the blades {d_cut} m past strip 0's head; reduce progress or looper volumes"
            )));
        }

        let ttu = match ic.ttu {
            TtuInit::Recoiling => UnitState {
                speed: ic.stu_speed,
                stage: Stage::Boost,
                residual_length: -d_cut,
                process_timer: 0.0,
                strip_index: -1,
                sync_latched: false,
                pred_total: 0.0,
                elapsed_in_stop: 0.0,
                event_cursor: 0,
            },
            TtuInit::Cutting { remaining_frac } => {
                if !(remaining_frac > 0.0 && remaining_frac <= 1.0) {
                    return Err(Error::Config(format!("ttu cut fraction {remaining_frac} outside (0, 1]")));
                }
                let total = cut_true[0];
                UnitState {
                    speed: 0.0,
                    stage: Stage::Stopped,
                    residual_length: -d_cut,
                    process_timer: total * remaining_frac,
                    strip_index: -1,
                    sync_latched: false,
                    pred_total: cut_pred[0],
                    elapsed_in_stop: total * (1.0 - remaining_frac),
                    event_cursor: 1,
                }
            }
        };

        let mut state = LineState {
            cfg,
            queue,
            caps,
            prefix,
            queue_total,
            time: 0,
            stu_speed: ic.stu_speed,
            ftu,
            ttu,
            looper1,
            looper2,
            a_fed,
            d_cut,
            strips_in_stu: Vec::new(),
            weld_true,
            weld_pred,
            cut_true,
            cut_pred,
            terminal: None,
            clamp_events: 0,
            brake_events: 0,
        };
        state.refresh_strips_in_stu();
        let (lo, hi) = state.stu_caps();
        state.stu_speed = ic.stu_speed.clamp(lo, hi);
        if state.ftu.stage != Stage::Stopped {
            state.ftu.stage = state.classify_ftu_stage();
            if state.ftu.stage == Stage::Sync {
                state.ftu.speed = state.stu_speed;
            }
        }
        if state.ttu.stage != Stage::Stopped {
            state.ttu.stage = state.classify_ttu_stage();
            if state.ttu.stage == Stage::Sync {
                state.ttu.speed = state.stu_speed;
            }
        }
        Ok(state)
    }

    pub fn config(&self) -> &LineConfig {
        &self.cfg
    }

    pub fn queue(&self) -> &[Strip] {
        &self.queue
    }

    pub fn terminal(&self) -> Option<TerminalCause> {
        self.terminal
    }

    /// Strip length by virtual index (lead-in mirrors strip 0; indices past
    /// the queue repeat it).
    fn strip_len(&self, k: i64) -> f64 {
        if k < 0 {
            f64::INFINITY
        } else {
            self.queue[(k as usize) % self.queue.len()].length
        }
    }

    /// Material interval of a virtual strip index.
    fn strip_interval(&self, k: i64) -> (f64, f64) {
        if k < 0 {
            return (f64::NEG_INFINITY, 0.0);
        }
        let n = self.queue.len();
        let cycle = (k as usize) / n;
        let idx = (k as usize) % n;
        let start = cycle as f64 * self.queue_total + self.prefix[idx];
        (start, start + self.queue[idx].length)
    }

    fn cap_of(&self, k: i64) -> (f64, f64) {
        if k < 0 {
            self.caps[0]
        } else {
            self.caps[(k as usize) % self.caps.len()]
        }
    }

    fn refresh_strips_in_stu(&mut self) {
        let b = self.a_fed - self.looper1.volume;
        let c = b - self.cfg.stu_length;
        self.strips_in_stu.clear();
        for k in self.ttu.strip_index..=self.ftu.strip_index {
            let (start, end) = self.strip_interval(k);
            if start < b && end > c {
                self.strips_in_stu.push(k);
            }
        }
    }

    /// Tightest speed-table bounds over the strips currently in the STU.
    pub fn stu_caps(&self) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for &k in &self.strips_in_stu {
            let (l, h) = self.cap_of(k);
            lo = lo.max(l);
            hi = hi.min(h);
        }
        if !lo.is_finite() || !hi.is_finite() {
            // line momentarily attributes no strips (cannot happen after
            // reset); fall back to the first strip's bounds
            return self.caps[0];
        }
        if lo > hi {
            (hi, hi)
        } else {
            (lo, hi)
        }
    }

    fn classify_ftu_stage(&self) -> Stage {
        let sync_on = self.looper1.volume >= self.looper1.upper - self.looper1.sync_threshold;
        let sync_hold = self.ftu.sync_latched
            && self.looper1.volume >= self.looper1.upper - self.looper1.sync_threshold - self.cfg.sync_exit_margin;
        if sync_on || sync_hold {
            Stage::Sync
        } else if self.ftu.residual_length < self.cfg.slowdown_trigger {
            Stage::Slowdown
        } else {
            Stage::Boost
        }
    }

    fn classify_ttu_stage(&self) -> Stage {
        let sync_on = self.looper2.volume <= self.looper2.lower + self.looper2.sync_threshold;
        let sync_hold = self.ttu.sync_latched
            && self.looper2.volume <= self.looper2.lower + self.looper2.sync_threshold + self.cfg.sync_exit_margin;
        if sync_on || sync_hold {
            Stage::Sync
        } else if self.ttu.residual_length < self.cfg.slowdown_trigger {
            Stage::Slowdown
        } else {
            Stage::Boost
        }
    }

    /// The TTU's boost target: the speed that drains looper2 back to its
    /// midpoint before the next cut. The midpoint is aimed at the slowdown
    /// entry point, lowered by the fill expected while the unit crawls the
    /// final `slowdown_trigger` meters at the approach speed.
    fn ttu_drain_target(&self) -> f64 {
        let span = self.looper2.upper - self.looper2.lower;
        let mid = 0.5 * (self.looper2.lower + self.looper2.upper);
        let slowdown_secs = 60.0 * self.cfg.slowdown_trigger / self.cfg.approach_speed.max(1.0);
        let rise = (self.stu_speed - self.cfg.approach_speed).max(0.0) * slowdown_secs / 60.0;
        let desired = (mid - rise).clamp(self.looper2.lower + 0.05 * span, mid);
        let dv = self.looper2.volume - desired;
        let lt = (self.ttu.residual_length - self.cfg.slowdown_trigger).max(1.0);
        if dv >= lt {
            return self.cfg.unit_max_speed;
        }
        let target = self.stu_speed * lt / (lt - dv);
        target.clamp(0.0, self.cfg.unit_max_speed)
    }

    /// Current stage combination code: FTU digit then TTU digit.
    pub fn stage_combination(&self) -> StageCombination {
        StageCombination(self.ftu.stage.digit(), self.ttu.stage.digit())
    }

    /// Expected seconds left in the FTU's welding stage, from the noisy
    /// prediction fixed at event start; 0 outside welds.
    pub fn t_w_pred(&self) -> f64 {
        if self.ftu.stage == Stage::Stopped {
            (self.ftu.pred_total - self.ftu.elapsed_in_stop).max(0.0)
        } else {
            0.0
        }
    }

    /// Mirror of [`Self::t_w_pred`] for the TTU's cutting stage.
    pub fn t_c_pred(&self) -> f64 {
        if self.ttu.stage == Stage::Stopped {
            (self.ttu.pred_total - self.ttu.elapsed_in_stop).max(0.0)
        } else {
            0.0
        }
    }

    /// Per-strip cycle durations in seconds: residual/speed plus the next
    /// stop's duration; a stopped unit reports its remaining timer.
    pub fn cycle_times(&self) -> (f64, f64) {
        let t_f = if self.ftu.stage == Stage::Stopped {
            self.ftu.process_timer
        } else {
            60.0 * self.ftu.residual_length / self.ftu.speed.max(1e-9) + self.weld_true[self.ftu.event_cursor % self.weld_true.len()]
        };
        let t_t = if self.ttu.stage == Stage::Stopped {
            self.ttu.process_timer
        } else {
            60.0 * self.ttu.residual_length / self.ttu.speed.max(1e-9) + self.cut_true[self.ttu.event_cursor % self.cut_true.len()]
        };
        (t_f, t_t)
    }

    /// Advances the line by one second under the commanded STU speed.
    pub fn step(&mut self, stu_command: f64) -> Result<StepRecord> {
        if self.terminal.is_some() {
            return Err(Error::Protocol("step on a terminal state".into()));
        }
        if self.time >= self.cfg.max_steps {
            return Err(Error::Protocol(format!("episode exceeded {} steps", self.cfg.max_steps)));
        }
        if !(stu_command >= 0.0) {
            return Err(Error::RejectedInput(format!("negative or NaN STU command {stu_command}")));
        }

        // (a) clamp by the speed table over strips in the STU, then by ramp
        let (cap_min, cap_max) = self.stu_caps();
        let prev = self.stu_speed;
        let mut v = stu_command.clamp(cap_min, cap_max);
        v = v.clamp(prev - self.cfg.ramp, prev + self.cfg.ramp);
        v = v.clamp(cap_min.min(cap_max), cap_max);
        if (v - stu_command).abs() > 1e-9 {
            self.clamp_events += 1;
        }

        // (b) emergency braking on a projected violation
        let mut braked = false;
        if self.cfg.braking_horizon > 0 {
            let ctx = self.projection_context(self.cfg.braking_horizon as usize, 1.0);
            let (min_v1, max_v2) = ctx.extremes(v);
            if min_v1 <= self.looper1.lower || max_v2 >= self.looper2.upper {
                let brake = (prev - self.cfg.ramp).max(cap_min.min(cap_max));
                if brake < v {
                    v = brake;
                    braked = true;
                    self.brake_events += 1;
                }
            }
        }
        self.stu_speed = v;

        // (c) units move on the stages classified at the end of the last step
        let eff_f = self.step_ftu();
        let eff_t = self.step_ttu();

        // (d) looper integration
        self.looper1.volume += (eff_f - v) / 60.0;
        self.looper2.volume += (v - eff_t) / 60.0;
        self.a_fed += eff_f / 60.0;
        self.d_cut += eff_t / 60.0;
        self.time += 1;

        // (e) terminal checks: constraint violation kills, the last cut completes
        if self.looper1.volume <= self.looper1.lower || self.looper2.volume >= self.looper2.upper {
            self.terminal = Some(TerminalCause::Death);
        }

        // (f) refresh STU membership and reclassify stages so the observable
        // state is consistent with the new volumes (sync pins the unit speed
        // to the STU immediately)
        self.refresh_strips_in_stu();
        if self.ftu.stage != Stage::Stopped {
            let stage = self.classify_ftu_stage();
            self.ftu.sync_latched = stage == Stage::Sync;
            self.ftu.stage = stage;
            if stage == Stage::Sync {
                self.ftu.speed = self.stu_speed;
            }
        }
        if self.ttu.stage != Stage::Stopped {
            let stage = self.classify_ttu_stage();
            self.ttu.sync_latched = stage == Stage::Sync;
            self.ttu.stage = stage;
            if stage == Stage::Sync {
                self.ttu.speed = self.stu_speed;
            }
        }

        Ok(StepRecord {
            time: self.time,
            combination: self.stage_combination(),
            ftu_speed: eff_f,
            stu_speed: v,
            ttu_speed: eff_t,
            v1: self.looper1.volume,
            v2: self.looper2.volume,
            cap_min,
            cap_max,
            braked,
            t_w_pred: self.t_w_pred(),
            t_c_pred: self.t_c_pred(),
            terminal: self.terminal,
        })
    }

    /// FTU second: returns the effective feed speed.
    fn step_ftu(&mut self) -> f64 {
        if self.ftu.stage == Stage::Stopped {
            self.ftu.speed = 0.0;
            self.ftu.process_timer -= 1.0;
            self.ftu.elapsed_in_stop += 1.0;
            if self.ftu.process_timer <= 0.0 {
                // weld done; next second starts unrolling the attached strip
                // (the post-step reclassification may pick sync/slowdown)
                self.ftu.stage = Stage::Boost;
                self.ftu.process_timer = 0.0;
                self.ftu.sync_latched = false;
            }
            return 0.0;
        }

        match self.ftu.stage {
            Stage::Sync => self.ftu.speed = self.stu_speed,
            Stage::Slowdown => self.ftu.speed = ramp_toward(self.ftu.speed, self.cfg.approach_speed, self.cfg.ramp),
            _ => self.ftu.speed = ramp_toward(self.ftu.speed, self.cfg.unit_max_speed, self.cfg.ramp),
        }
        let eff = self.ftu.speed.min(self.ftu.residual_length * 60.0).max(0.0);
        self.ftu.residual_length -= eff / 60.0;
        if self.ftu.residual_length <= 1e-9 {
            // strip fully unrolled: weld the next one on
            let event = self.ftu.event_cursor;
            self.ftu.event_cursor += 1;
            let total = self.weld_true[event % self.weld_true.len()];
            self.ftu.pred_total = self.weld_pred[event % self.weld_pred.len()];
            self.ftu.stage = Stage::Stopped;
            self.ftu.speed = 0.0;
            self.ftu.process_timer = total;
            self.ftu.elapsed_in_stop = 0.0;
            self.ftu.strip_index += 1;
            self.ftu.residual_length = self.strip_len(self.ftu.strip_index);
            self.ftu.sync_latched = false;
        }
        eff
    }

    /// TTU second: returns the effective exit speed.
    fn step_ttu(&mut self) -> f64 {
        if self.ttu.stage == Stage::Stopped {
            self.ttu.speed = 0.0;
            self.ttu.process_timer -= 1.0;
            self.ttu.elapsed_in_stop += 1.0;
            if self.ttu.process_timer <= 0.0 {
                if self.ttu.strip_index >= 0 && self.ttu.strip_index as usize == self.queue.len() - 1 {
                    // the last queued strip is recoiled: episode complete
                    self.terminal = Some(TerminalCause::Complete);
                } else {
                    self.ttu.stage = Stage::Boost;
                    self.ttu.process_timer = 0.0;
                    self.ttu.strip_index += 1;
                    self.ttu.residual_length = self.strip_len(self.ttu.strip_index);
                    self.ttu.sync_latched = false;
                }
            }
            return 0.0;
        }

        match self.ttu.stage {
            Stage::Sync => self.ttu.speed = self.stu_speed,
            Stage::Slowdown => self.ttu.speed = ramp_toward(self.ttu.speed, self.cfg.approach_speed, self.cfg.ramp),
            _ => self.ttu.speed = ramp_toward(self.ttu.speed, self.ttu_drain_target(), self.cfg.ramp),
        }
        let eff = self.ttu.speed.min(self.ttu.residual_length * 60.0).max(0.0);
        self.ttu.residual_length -= eff / 60.0;
        if self.ttu.residual_length <= 1e-9 {
            // seam reached the blades: cut
            let event = self.ttu.event_cursor;
            self.ttu.event_cursor += 1;
            let total = self.cut_true[event % self.cut_true.len()];
            self.ttu.pred_total = self.cut_pred[event % self.cut_pred.len()];
            self.ttu.stage = Stage::Stopped;
            self.ttu.speed = 0.0;
            self.ttu.process_timer = total;
            self.ttu.elapsed_in_stop = 0.0;
            self.ttu.residual_length = 0.0;
            self.ttu.sync_latched = false;
        }
        eff
    }

    /// Builds the per-unit speed schedules used by emergency braking and the
    /// conservative agent: units follow their stage logic with stop durations
    /// taken from the noisy predictions (scaled by `safety_factor`), the
    /// volume-dependent sync stage is ignored and speed-law targets are
    /// frozen at their current values. Volume extremes are then linear in the
    /// candidate STU speed.
    pub fn projection_context(&self, horizon: usize, safety_factor: f64) -> ProjectionContext {
        let sched_f = self.unit_schedule(true, horizon, safety_factor);
        let sched_t = self.unit_schedule(false, horizon, safety_factor);
        // prefix sums so extremes per candidate cost O(horizon)
        ProjectionContext { v1: self.looper1.volume, v2: self.looper2.volume, sched_f, sched_t }
    }

    fn unit_schedule(&self, ftu: bool, horizon: usize, safety: f64) -> Vec<f64> {
        let unit = if ftu { &self.ftu } else { &self.ttu };
        let target = if ftu { self.cfg.unit_max_speed } else { self.ttu_drain_target() };
        let preds = if ftu { &self.weld_pred } else { &self.cut_pred };
        let mut speed = unit.speed;
        let mut residual = unit.residual_length;
        let mut cursor = unit.event_cursor;
        let mut stopped = if unit.stage == Stage::Stopped {
            (unit.pred_total * safety - unit.elapsed_in_stop).max(0.0)
        } else {
            0.0
        };
        let mut strip = unit.strip_index;
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            if stopped > 0.0 {
                stopped -= 1.0;
                speed = 0.0;
                out.push(0.0);
                continue;
            }
            let goal = if residual < self.cfg.slowdown_trigger { self.cfg.approach_speed } else { target };
            speed = ramp_toward(speed, goal, self.cfg.ramp);
            let eff = speed.min(residual * 60.0).max(0.0);
            residual -= eff / 60.0;
            out.push(eff);
            if residual <= 1e-9 {
                stopped = preds[cursor % preds.len()] * safety;
                cursor += 1;
                strip += 1;
                residual = self.strip_len(strip);
                speed = 0.0;
            }
        }
        out
    }
}

/// Frozen unit schedules for volume projection at candidate STU speeds.
pub struct ProjectionContext {
    v1: f64,
    v2: f64,
    sched_f: Vec<f64>,
    sched_t: Vec<f64>,
}

impl ProjectionContext {
    /// Minimum projected looper1 volume and maximum projected looper2 volume
    /// over the horizon when the STU holds `stu_speed`.
    pub fn extremes(&self, stu_speed: f64) -> (f64, f64) {
        let mut v1 = self.v1;
        let mut v2 = self.v2;
        let mut min_v1 = v1;
        let mut max_v2 = v2;
        for (f, t) in self.sched_f.iter().zip(&self.sched_t) {
            v1 += (f - stu_speed) / 60.0;
            v2 += (stu_speed - t) / 60.0;
            min_v1 = min_v1.min(v1);
            max_v2 = max_v2.max(v2);
        }
        (min_v1, max_v2)
    }
}

//! Deterministic synthetic multi-person scenes.
//!
//! Roots follow a social-force-style integrator in the ground plane; limbs
//! oscillate with a per-person gait phase on top of a fixed body template.
//! Everything cross-person (attraction, repulsion, gait synchronization) is
//! scaled by `coupling`, so at `coupling = 0` each person's trajectory is a
//! function of their own seed-derived parameters only.

use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::motion::{MotionSequence, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionStyle {
    Walk,
    Approach,
    StopAndTalk,
    GroupWalk,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub persons: usize,
    pub observed_frames: usize,
    pub future_frames: usize,
    pub joints: usize,
    pub seed: u64,
    /// Strength of all inter-person effects, in `[0, 1]`.
    pub coupling: f64,
    /// Every generated coordinate stays within this distance of the origin (meters).
    pub arena_radius: f64,
    /// Style of person n is `motion_styles[n % len]`.
    pub motion_styles: Vec<MotionStyle>,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn default_fps() -> f64 {
    15.0
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.persons < 1 {
            return Err(CoreError::ConfigInvalid("persons must be >= 1".into()));
        }
        if self.observed_frames < 2 {
            return Err(CoreError::ConfigInvalid("observed_frames must be >= 2".into()));
        }
        if self.future_frames < 1 {
            return Err(CoreError::ConfigInvalid("future_frames must be >= 1".into()));
        }
        if self.joints < 1 {
            return Err(CoreError::ConfigInvalid("joints must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(CoreError::ConfigInvalid("coupling must be in [0,1]".into()));
        }
        if !(self.arena_radius > 0.0) {
            return Err(CoreError::ConfigInvalid("arena_radius must be positive".into()));
        }
        if self.motion_styles.is_empty() {
            return Err(CoreError::ConfigInvalid("motion_styles must not be empty".into()));
        }
        if !(self.fps > 0.0) {
            return Err(CoreError::ConfigInvalid("fps must be positive".into()));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.observed_frames + self.future_frames
    }

    pub fn style_of(&self, n: usize) -> MotionStyle {
        self.motion_styles[n % self.motion_styles.len()]
    }
}

/// Per-person parameters drawn only from that person's own RNG stream.
struct PersonParams {
    start: [f64; 2],
    heading: f64,
    pref_speed: f64,
    step_freq_hz: f64,
    phase0: f64,
    /// StopAndTalk: fraction of the sequence after which the person halts.
    stop_frac: f64,
    /// Per-joint oscillation phase offsets.
    joint_phase: Vec<f64>,
    joint_amp: Vec<f64>,
}

fn person_rng(seed: u64, n: usize) -> ChaCha8Rng {
    // distinct stream per person, independent of everyone else's parameters
    ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(n as u64 + 1)))
}

fn draw_person(cfg: &SyntheticSceneConfig, n: usize) -> PersonParams {
    let mut rng = person_rng(cfg.seed, n);
    let nf = cfg.persons as f64;
    let theta = 2.0 * std::f64::consts::PI * (n as f64 + rng.random_range(-0.15..0.15)) / nf.max(1.0);
    let r = cfg.arena_radius * rng.random_range(0.30..0.55);
    let start = [r * theta.cos(), r * theta.sin()];
    let heading = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let pref_speed = rng.random_range(0.7..1.3);
    let step_freq_hz = rng.random_range(0.8..1.3);
    let phase0 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let stop_frac = rng.random_range(0.35..0.55);
    let joint_phase = (0..cfg.joints).map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI)).collect();
    let joint_amp = (0..cfg.joints).map(|_| rng.random_range(0.5..1.0)).collect();
    PersonParams { start, heading, pref_speed, step_freq_hz, phase0, stop_frac, joint_phase, joint_amp }
}

/// Static body template: per-joint offset from the root and oscillation axis.
/// A function of the joint index alone, shared by all persons.
struct BodyTemplate {
    /// [dx, dy, dz] offsets at rest, already scaled to the arena.
    offsets: Vec<[f64; 3]>,
    /// Oscillation direction per joint (unit-ish), scaled amplitude applied on top.
    axes: Vec<[f64; 3]>,
    amp: f64,
    root_height: f64,
    max_reach: f64,
}

fn body_template(joints: usize, arena_radius: f64) -> BodyTemplate {
    let s = (arena_radius / 4.0).min(1.0);
    let mut offsets = Vec::with_capacity(joints);
    let mut axes = Vec::with_capacity(joints);
    for j in 0..joints {
        if j == 0 {
            offsets.push([0.0, 0.0, 0.0]);
            axes.push([0.0, 0.0, 0.0]);
            continue;
        }
        // alternate left/right, spread heights between ankle and head
        let side = if j % 2 == 0 { 1.0 } else { -1.0 };
        let frac = j as f64 / joints as f64;
        let dz = s * (-0.7 + 1.4 * frac); // root sits at 0.9*s; joints span ~0.2..2.3 * 0.7
        let lateral = s * 0.25 * side;
        let forward = s * 0.1 * ((j * 7 % 5) as f64 / 5.0 - 0.4);
        offsets.push([forward, lateral, dz]);
        // swing mostly fore-aft with some vertical component
        let ax = [0.8, 0.15 * side, 0.25 * (1.0 - frac)];
        let norm = (ax[0] * ax[0] + ax[1] * ax[1] + ax[2] * ax[2]).sqrt();
        axes.push([ax[0] / norm, ax[1] / norm, ax[2] / norm]);
    }
    let amp = 0.22 * s;
    let root_height = 0.9 * s;
    let max_reach = offsets
        .iter()
        .map(|o| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt())
        .fold(0.0f64, f64::max)
        + amp;
    BodyTemplate { offsets, axes, amp, root_height, max_reach }
}

/// Partner index for pairwise styles: persons pair up as (0,1), (2,3), ...
/// The last person of an odd-sized scene partners with person 0.
fn partner_of(n: usize, persons: usize) -> usize {
    if persons <= 1 {
        return n;
    }
    let p = n ^ 1;
    if p >= persons { 0 } else { p }
}

struct PersonState {
    pos: [f64; 2],
    vel: [f64; 2],
    phase: f64,
    /// low-pass speed estimate, drives limb amplitude
    speed_ema: f64,
}

/// Generate a scene of `observed + future` frames. A pure function of the
/// config: the same config always yields the same tensor.
pub fn generate_synthetic(cfg: &SyntheticSceneConfig) -> Result<MotionSequence> {
    cfg.validate()?;
    let n_persons = cfg.persons;
    let frames = cfg.total_frames();
    let j = cfg.joints;
    let dt = 1.0 / cfg.fps;
    let template = body_template(j, cfg.arena_radius);

    let params: Vec<PersonParams> = (0..n_persons).map(|n| draw_person(cfg, n)).collect();
    let z_top = template.root_height + template.max_reach;
    let r_xy_max = {
        let head = cfg.arena_radius * cfg.arena_radius - z_top * z_top;
        (head.max(0.01 * cfg.arena_radius * cfg.arena_radius)).sqrt() - template.max_reach * 0.1
    };

    let mut states: Vec<PersonState> = params
        .iter()
        .map(|p| PersonState {
            pos: p.start,
            vel: [p.pref_speed * p.heading.cos() * 0.5, p.pref_speed * p.heading.sin() * 0.5],
            phase: p.phase0,
            speed_ema: p.pref_speed * 0.5,
        })
        .collect();

    let v_max = 1.4f64;
    let mut positions = Array4::<f64>::zeros((n_persons, frames, j, 3));

    for t in 0..frames {
        let t_frac = t as f64 / frames as f64;
        let snapshot: Vec<([f64; 2], [f64; 2], f64)> =
            states.iter().map(|s| (s.pos, s.vel, s.phase)).collect();

        for n in 0..n_persons {
            let style = cfg.style_of(n);
            let p = &params[n];
            let st = &mut states[n];

            // own goal force
            let mut force = [0.0f64, 0.0f64];
            let goal = match style {
                MotionStyle::Walk | MotionStyle::GroupWalk | MotionStyle::StopAndTalk => {
                    // far waypoint along the initial heading, reflected off the arena
                    let gx = p.start[0] + 3.0 * cfg.arena_radius * p.heading.cos();
                    let gy = p.start[1] + 3.0 * cfg.arena_radius * p.heading.sin();
                    [gx, gy]
                }
                MotionStyle::Approach => [0.0, 0.0], // scene center; partner pull is in the coupling term
            };
            let mut target_speed = p.pref_speed;
            if style == MotionStyle::StopAndTalk && t_frac > p.stop_frac {
                target_speed = 0.0;
            }
            if style == MotionStyle::Approach {
                // slow down on arrival at the meeting region
                let d = (st.pos[0] * st.pos[0] + st.pos[1] * st.pos[1]).sqrt();
                target_speed = p.pref_speed * (d / (0.25 * cfg.arena_radius)).min(1.0);
            }
            let to_goal = [goal[0] - st.pos[0], goal[1] - st.pos[1]];
            let dist = (to_goal[0] * to_goal[0] + to_goal[1] * to_goal[1]).sqrt().max(1e-9);
            let desired = [to_goal[0] / dist * target_speed, to_goal[1] / dist * target_speed];
            let k_goal = 2.0;
            force[0] += k_goal * (desired[0] - st.vel[0]);
            force[1] += k_goal * (desired[1] - st.vel[1]);

            // arena containment
            let r = (st.pos[0] * st.pos[0] + st.pos[1] * st.pos[1]).sqrt();
            if r > 0.8 * r_xy_max {
                let k_wall = 4.0 * (r - 0.8 * r_xy_max) / (0.2 * r_xy_max).max(1e-9);
                force[0] -= k_wall * st.pos[0] / r;
                force[1] -= k_wall * st.pos[1] / r;
            }

            // cross-person terms, all scaled by coupling
            let mut phase_pull = 0.0;
            if cfg.coupling > 0.0 && n_persons > 1 {
                let c = cfg.coupling;
                let mate = partner_of(n, n_persons);
                for (m, &(mpos, mvel, mphase)) in snapshot.iter().enumerate() {
                    if m == n {
                        continue;
                    }
                    let dx = st.pos[0] - mpos[0];
                    let dy = st.pos[1] - mpos[1];
                    let d2 = dx * dx + dy * dy;
                    let d = d2.sqrt().max(1e-6);
                    // short-range repulsion keeps people from overlapping
                    let personal = 0.6;
                    if d < personal {
                        let push = 3.0 * (personal - d) / personal;
                        force[0] += c * push * dx / d;
                        force[1] += c * push * dy / d;
                    }
                    match style {
                        MotionStyle::Approach if m == mate => {
                            // pull toward the partner until close
                            let k_pair = 1.6 * ((d - 0.8).max(0.0)).min(1.5);
                            force[0] -= c * k_pair * dx / d;
                            force[1] -= c * k_pair * dy / d;
                            // gait synchronization grows as the pair closes in
                            let sync = 2.5 / (1.0 + d);
                            phase_pull += c * sync * (mphase - st.phase).sin();
                        }
                        MotionStyle::GroupWalk => {
                            // cohesion + velocity alignment with everyone
                            let k_coh = 0.25;
                            force[0] -= c * k_coh * dx;
                            force[1] -= c * k_coh * dy;
                            let k_align = 0.8;
                            force[0] += c * k_align * (mvel[0] - st.vel[0]) / (n_persons - 1) as f64;
                            force[1] += c * k_align * (mvel[1] - st.vel[1]) / (n_persons - 1) as f64;
                            phase_pull += c * 0.6 * (mphase - st.phase).sin() / (n_persons - 1) as f64;
                        }
                        MotionStyle::StopAndTalk if m == mate && t_frac > p.stop_frac => {
                            // face the partner while talking: drift gently closer
                            if d > 1.0 {
                                force[0] -= c * 0.4 * dx / d;
                                force[1] -= c * 0.4 * dy / d;
                            }
                        }
                        _ => {}
                    }
                }
            }

            // integrate root motion
            st.vel[0] += force[0] * dt;
            st.vel[1] += force[1] * dt;
            let sp = (st.vel[0] * st.vel[0] + st.vel[1] * st.vel[1]).sqrt();
            if sp > v_max {
                st.vel[0] *= v_max / sp;
                st.vel[1] *= v_max / sp;
            }
            st.pos[0] += st.vel[0] * dt;
            st.pos[1] += st.vel[1] * dt;
            let r = (st.pos[0] * st.pos[0] + st.pos[1] * st.pos[1]).sqrt();
            if r > r_xy_max {
                st.pos[0] *= r_xy_max / r;
                st.pos[1] *= r_xy_max / r;
            }

            // gait phase advances with actual speed; limbs quiet down when stopped
            let sp = (st.vel[0] * st.vel[0] + st.vel[1] * st.vel[1]).sqrt();
            st.speed_ema = 0.85 * st.speed_ema + 0.15 * sp;
            let rate = 2.0 * std::f64::consts::PI * p.step_freq_hz * (sp / p.pref_speed).clamp(0.0, 1.3);
            st.phase += (rate + phase_pull) * dt;

            // write joints
            let amp_scale = (st.speed_ema / p.pref_speed).clamp(0.05, 1.0);
            let heading = st.vel[1].atan2(st.vel[0]);
            let (hc, hs) = (heading.cos(), heading.sin());
            for ji in 0..j {
                let off = template.offsets[ji];
                let ax = template.axes[ji];
                let osc = if ji == 0 {
                    0.0
                } else {
                    template.amp * p.joint_amp[ji] * amp_scale * (st.phase + p.joint_phase[ji]).sin()
                };
                // rotate the template into the heading frame
                let lx = off[0] + osc * ax[0];
                let ly = off[1] + osc * ax[1];
                let lz = off[2] + osc * ax[2];
                positions[(n, t, ji, 0)] = st.pos[0] + hc * lx - hs * ly;
                positions[(n, t, ji, 1)] = st.pos[1] + hs * lx + hc * ly;
                positions[(n, t, ji, 2)] = template.root_height + lz;
            }
        }
    }

    let skeleton = Skeleton::chain(j);
    MotionSequence::new(skeleton, positions, cfg.fps)
}

//! Synthetic slip episodes.
//!
//! A robot holds an object, optionally drives around, and releases it at
//! `drop_time`. Each sensor is a small parametric process:
//!
//! * force-torque: sensor bias plus the object's load, which decays with a
//!   50 ms time constant after release; driving adds inertial oscillation
//!   and vibration.
//! * audio: background noise, an impact burst when the object lands, motor
//!   hum while driving and babble under visual-auditory disturbance.
//! * RGB and depth: a periodic background scene that pans while driving,
//!   the gripper, and the held object which falls out of view after release.
//!   Under disturbance a monitor in view flickers.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::streamsync::{write_episode, Condition, EpisodeManifest, Modality, SensorFrame, StreamSet};

const GRAVITY: f64 = 9.81;
/// Kilograms of gripper hanging below the force-torque sensor.
const GRIPPER_MASS: f64 = 0.8;
const GRIPPER_BIAS_N: f64 = GRIPPER_MASS * GRAVITY;
/// Image scale at the gripper distance.
const PX_PER_M: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPreset {
    pub name: String,
    pub weight_g: f64,
    /// Characteristic size in meters.
    pub size_m: f64,
    /// Visual contrast against the background, 0 (invisible) to 1.
    pub contrast: f64,
    /// Probability that a depth pixel on the object returns the object's
    /// range; transparent and specular surfaces let the background through.
    pub depth_return: f64,
    /// Impact loudness, relative.
    pub impact_gain: f64,
    /// Dominant ringing frequency of the impact, Hz.
    pub resonance_hz: f64,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
    /// Direction of the grasp offset from the sensor axis, radians.
    pub lever_angle: f64,
}

impl ObjectPreset {
    fn new(
        name: &str,
        weight_g: f64,
        size_m: f64,
        contrast: f64,
        depth_return: f64,
        impact_gain: f64,
        resonance_hz: f64,
        color: [f64; 3],
        lever_angle: f64,
    ) -> Self {
        ObjectPreset {
            name: name.into(),
            weight_g,
            size_m,
            contrast,
            depth_return,
            impact_gain,
            resonance_hz,
            color,
            lever_angle,
        }
    }

    pub fn mass_kg(&self) -> f64 {
        self.weight_g / 1000.0
    }

    pub fn load_n(&self) -> f64 {
        self.mass_kg() * GRAVITY
    }

    fn radius_px(&self) -> f64 {
        (2.0 + self.size_m * 30.0).clamp(3.0, 8.0)
    }
}

/// The eight object presets.
pub fn default_objects() -> Vec<ObjectPreset> {
    vec![
        ObjectPreset::new("cracker_box", 421.0, 0.21, 0.9, 0.95, 0.5, 700.0, [0.85, 0.2, 0.15], 0.3),
        ObjectPreset::new("bag_of_cookies", 30.0, 0.15, 0.7, 0.6, 0.25, 2500.0, [0.9, 0.8, 0.4], 1.1),
        ObjectPreset::new("furry_toy", 102.0, 0.14, 0.8, 0.9, 0.08, 300.0, [0.55, 0.35, 0.2], 2.0),
        ObjectPreset::new("book", 214.0, 0.2, 0.8, 0.95, 0.7, 500.0, [0.2, 0.3, 0.7], 2.8),
        ObjectPreset::new("metal_cup", 118.0, 0.08, 0.75, 0.4, 1.0, 3200.0, [0.75, 0.75, 0.78], 3.6),
        ObjectPreset::new("plastic_plate", 38.0, 0.18, 0.7, 0.8, 0.55, 1400.0, [0.95, 0.95, 0.9], 4.4),
        ObjectPreset::new("board_eraser", 10.0, 0.12, 0.8, 0.9, 0.3, 900.0, [0.15, 0.15, 0.15], 5.2),
        // transparent: weak visual contrast, mostly see-through in depth
        ObjectPreset::new("plastic_bottle", 423.0, 0.2, 0.2, 0.15, 0.6, 1100.0, [0.8, 0.9, 0.95], 6.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MovePattern {
    Forward,
    Backward,
    Sideways,
    Rotate,
}

impl MovePattern {
    pub const ALL: [MovePattern; 4] = [
        MovePattern::Forward,
        MovePattern::Backward,
        MovePattern::Sideways,
        MovePattern::Rotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MovePattern::Forward => "forward",
            MovePattern::Backward => "backward",
            MovePattern::Sideways => "sideways",
            MovePattern::Rotate => "rotate",
        }
    }

    /// Unit direction of scene motion in the image and of inertial force.
    fn axis(self) -> (f64, f64) {
        match self {
            MovePattern::Forward => (0.0, 1.0),
            MovePattern::Backward => (0.0, -1.0),
            MovePattern::Sideways => (1.0, 0.0),
            MovePattern::Rotate => (1.0, 0.0),
        }
    }
}

impl fmt::Display for MovePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MovePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MovePattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown move pattern {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timing {
    pub length: f64,
    pub drop_time: f64,
    /// Release to floor impact.
    pub impact_delay: f64,
    pub image_hz: f64,
    pub audio_hz: f64,
    /// Samples per audio frame.
    pub audio_chunk: usize,
    pub ft_hz: f64,
    pub image_height: usize,
    pub image_width: usize,
    /// Load decay after release, seconds.
    pub ft_decay: f64,
    /// Impact sound decay, seconds.
    pub impact_decay: f64,
    /// Arm spring-back after release: force amplitude per newton of load.
    pub release_ring_gain: f64,
    /// Spring-back decay, seconds.
    pub release_ring_decay: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            length: 5.5,
            drop_time: 5.0,
            impact_delay: 0.3,
            image_hz: 10.0,
            audio_hz: 16000.0,
            audio_chunk: 1600,
            ft_hz: 100.0,
            image_height: 32,
            image_width: 32,
            ft_decay: 0.05,
            impact_decay: 0.03,
            release_ring_gain: 0.3,
            release_ring_decay: 0.2,
        }
    }
}

/// Per-condition noise amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseLevels {
    /// Force noise, N.
    pub force_sigma: f64,
    /// Torque noise, N·m.
    pub torque_sigma: f64,
    /// Peak platform acceleration, m/s².
    pub acceleration: f64,
    /// Broadband vibration force, N.
    pub vibration: f64,
    pub audio_sigma: f64,
    pub motor_hum: f64,
    pub babble: f64,
    /// Pixel noise in 8-bit units.
    pub pixel_sigma: f64,
    /// Scene pan speed, px/s.
    pub pan_speed: f64,
    /// Object sway amplitude, px.
    pub sway_px: f64,
    /// Per-frame camera shake, px.
    pub shake_px: f64,
    /// Monitor flicker depth, 0 to 1.
    pub flicker: f64,
    /// Depth noise at 1 m, mm; grows with the square of range.
    pub depth_sigma_mm: f64,
    /// Fraction of depth pixels with no return (read as 0).
    pub depth_dropout: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels::standing()
    }
}

impl NoiseLevels {
    pub fn standing() -> Self {
        NoiseLevels {
            force_sigma: 0.01,
            torque_sigma: 0.0005,
            acceleration: 0.0,
            vibration: 0.0,
            audio_sigma: 0.003,
            motor_hum: 0.0,
            babble: 0.0,
            pixel_sigma: 2.0,
            pan_speed: 0.0,
            sway_px: 0.0,
            shake_px: 0.0,
            flicker: 0.0,
            depth_sigma_mm: 3.0,
            depth_dropout: 0.01,
        }
    }

    pub fn moving() -> Self {
        NoiseLevels {
            force_sigma: 0.02,
            torque_sigma: 0.001,
            acceleration: 1.2,
            vibration: 0.08,
            audio_sigma: 0.003,
            motor_hum: 0.01,
            babble: 0.0,
            pixel_sigma: 4.0,
            pan_speed: 3.0,
            sway_px: 1.0,
            shake_px: 0.4,
            flicker: 0.0,
            depth_sigma_mm: 6.0,
            depth_dropout: 0.04,
        }
    }

    pub fn vad() -> Self {
        NoiseLevels {
            vibration: 0.1,
            babble: 0.03,
            flicker: 0.6,
            ..NoiseLevels::moving()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub version: u32,
    pub seed: u64,
    pub timing: Timing,
    pub standing: NoiseLevels,
    pub moving: NoiseLevels,
    pub vad: NoiseLevels,
    pub objects: Vec<ObjectPreset>,
    pub patterns: Vec<MovePattern>,
    pub conditions: Vec<Condition>,
    pub n_per_cell: usize,
    /// Train, validation and evaluation fractions.
    pub split: [f64; 3],
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            version: 1,
            seed: 0,
            timing: Timing::default(),
            standing: NoiseLevels::standing(),
            moving: NoiseLevels::moving(),
            vad: NoiseLevels::vad(),
            objects: default_objects(),
            patterns: MovePattern::ALL.to_vec(),
            conditions: Condition::ALL.to_vec(),
            n_per_cell: 6,
            split: [0.55, 0.18, 0.27],
        }
    }
}

impl SimulatorConfig {
    pub fn noise(&self, condition: Condition) -> &NoiseLevels {
        match condition {
            Condition::Standing => &self.standing,
            Condition::Moving => &self.moving,
            Condition::Vad => &self.vad,
        }
    }

    pub fn object(&self, name: &str) -> Result<&ObjectPreset> {
        self.objects
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::Config(format!("unknown object preset {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.timing;
        if !(t.drop_time > 0.0 && t.drop_time + 0.5 <= t.length + 1e-9) {
            return Err(Error::Config("simulator: need drop_time + 0.5 <= length".into()));
        }
        if t.image_hz <= 0.0 || t.audio_hz <= 0.0 || t.ft_hz <= 0.0 || t.audio_chunk == 0 {
            return Err(Error::Config("simulator: rates must be positive".into()));
        }
        if self.objects.iter().any(|o| !(o.weight_g > 0.0)) {
            return Err(Error::Config("simulator: object weights must be positive".into()));
        }
        if self.objects.is_empty() || self.patterns.is_empty() || self.conditions.is_empty() {
            return Err(Error::Config("simulator: empty factor list".into()));
        }
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&r| r < 0.0) {
            return Err(Error::Config(format!("simulator: split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn scenario(&self, entry: &EpisodeEntry) -> Result<ScenarioConfig> {
        Ok(ScenarioConfig {
            episode_id: entry.id().to_string(),
            seed: entry.seed,
            object: self.object(&entry.object)?.clone(),
            condition: entry.condition,
            pattern: entry.pattern,
            timing: self.timing.clone(),
            noise: self.noise(entry.condition).clone(),
        })
    }
}

/// Everything needed to generate one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub episode_id: String,
    pub seed: u64,
    pub object: ObjectPreset,
    pub condition: Condition,
    pub pattern: MovePattern,
    pub timing: Timing,
    pub noise: NoiseLevels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBundle {
    pub streams: StreamSet,
    pub drop_time: f64,
    pub scenario: ScenarioConfig,
}

/// Fixed scene texture shared by every episode (one lab).
struct Scene {
    /// `(amplitude, fu, fv, phase)` per channel.
    waves: [[(f64, f64, f64, f64); 4]; 3],
    base: [f64; 3],
    depth_waves: [(f64, f64, f64, f64); 3],
}

impl Scene {
    fn lab() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1ab);
        let wave = |rng: &mut ChaCha8Rng| {
            (
                rng.gen_range(0.05..0.15),
                rng.gen_range(1..4) as f64,
                rng.gen_range(0..4) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        };
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 4]; 3];
        for ch in waves.iter_mut() {
            for w in ch.iter_mut() {
                *w = wave(&mut rng);
            }
        }
        let depth_waves = [wave(&mut rng), wave(&mut rng), wave(&mut rng)];
        Scene {
            waves,
            base: [0.45, 0.5, 0.42],
            depth_waves,
        }
    }

    /// Background color at scene coordinates, periodic over 32 px.
    fn color(&self, u: f64, v: f64, ch: usize) -> f64 {
        let period = 32.0;
        let mut c = self.base[ch];
        for &(a, fu, fv, ph) in &self.waves[ch] {
            c += a * (std::f64::consts::TAU * (fu * u + fv * v) / period + ph).sin();
        }
        c
    }

    /// Background depth in mm; rows nearer the bottom are closer.
    fn depth(&self, u: f64, v: f64, row: f64, height: f64) -> f64 {
        let mut d = 3000.0 - 1500.0 * (row / height);
        for &(a, fu, fv, ph) in &self.depth_waves {
            d += 1000.0 * a * (std::f64::consts::TAU * (fu * u + fv * v) / 32.0 + ph).sin();
        }
        d
    }
}

struct Kinematics {
    /// Inertial oscillation frequency, Hz.
    freq: f64,
    phase: f64,
    axis: (f64, f64),
    pan: (f64, f64),
    camera0: (f64, f64),
}

impl Kinematics {
    fn accel(&self, t: f64, peak: f64) -> f64 {
        peak * (std::f64::consts::TAU * self.freq * t + self.phase).sin()
    }

    fn sway(&self, t: f64, amp: f64) -> f64 {
        amp * (std::f64::consts::TAU * self.freq * t + self.phase).sin()
    }
}

/// Vertical fall distance in meters after release.
fn fall_m(t: f64, cfg: &ScenarioConfig) -> f64 {
    let tau = t - cfg.timing.drop_time;
    if tau <= 0.0 {
        return 0.0;
    }
    0.5 * GRAVITY * tau.min(cfg.timing.impact_delay).powi(2)
}

fn load_fraction(t: f64, cfg: &ScenarioConfig) -> f64 {
    let tau = t - cfg.timing.drop_time;
    if tau <= 0.0 {
        1.0
    } else {
        (-tau / cfg.timing.ft_decay).exp()
    }
}

fn frame_times(hz: f64, length: f64) -> Vec<f64> {
    let n = (length * hz + 1e-9).floor() as i64;
    (1..=n).map(|k| k as f64 / hz).collect()
}

pub fn generate_episode(cfg: &ScenarioConfig) -> Result<EpisodeBundle> {
    let t = &cfg.timing;
    if !(t.drop_time + 0.5 <= t.length + 1e-9) || cfg.object.weight_g <= 0.0 {
        return Err(Error::Config("invalid scenario".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let moving = cfg.condition != Condition::Standing;
    let axis = cfg.pattern.axis();
    let pan_scale = if cfg.pattern == MovePattern::Rotate { 2.0 } else { 1.0 };
    let kin = Kinematics {
        freq: rng.gen_range(1.2..1.8),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        axis,
        pan: if moving {
            (
                axis.0 * cfg.noise.pan_speed * pan_scale,
                axis.1 * cfg.noise.pan_speed * pan_scale,
            )
        } else {
            (0.0, 0.0)
        },
        camera0: (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
    };

    let mut streams = StreamSet::new(cfg.episode_id.clone(), cfg.condition, Some(t.drop_time));
    let ft = ft_stream(cfg, &kin, &mut rng)?;
    let audio = audio_stream(cfg, &kin, &mut rng)?;
    let (rgb, depth) = image_streams(cfg, &kin, &mut rng)?;
    streams = streams
        .with_stream(Modality::Rgb, rgb)
        .with_stream(Modality::Depth, depth)
        .with_stream(Modality::Audio, audio)
        .with_stream(Modality::ForceTorque, ft);
    streams.validate()?;
    Ok(EpisodeBundle {
        streams,
        drop_time: t.drop_time,
        scenario: cfg.clone(),
    })
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

fn f32q(v: f64) -> f64 {
    v as f32 as f64
}

fn ft_stream(cfg: &ScenarioConfig, kin: &Kinematics, rng: &mut ChaCha8Rng) -> Result<Vec<SensorFrame>> {
    let n = &cfg.noise;
    let obj = &cfg.object;
    let lever = 0.5 * obj.size_m * rng.gen_range(0.9..1.1);
    let (lx, ly) = (lever * obj.lever_angle.cos(), lever * obj.lever_angle.sin());
    let bias = [
        0.05 + gauss(rng, 0.01),
        -0.03 + gauss(rng, 0.01),
        GRIPPER_BIAS_N + gauss(rng, 0.02),
        0.002,
        -0.001,
        0.0005,
    ];
    let rotate = cfg.pattern == MovePattern::Rotate;
    let ring_hz = rng.gen_range(9.0..13.0);
    let ring_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut frames = Vec::new();
    for time in frame_times(cfg.timing.ft_hz, cfg.timing.length) {
        let tau = time - cfg.timing.drop_time;
        // the unloaded arm springs back and rings
        let ring = if tau > 0.0 {
            cfg.timing.release_ring_gain
                * obj.load_n()
                * (-tau / cfg.timing.release_ring_decay).exp()
                * (std::f64::consts::TAU * ring_hz * tau).sin()
        } else {
            0.0
        };
        let frac = load_fraction(time, cfg);
        let load = obj.load_n() * frac;
        let mass = GRIPPER_MASS + obj.mass_kg() * frac;
        let a = kin.accel(time, n.acceleration);
        let bounce = 0.3 * kin.accel(time * 2.0, n.acceleration);
        let fx = bias[0] - mass * a * kin.axis.0 + 0.3 * ring * ring_dir.cos() + gauss(rng, n.vibration) + gauss(rng, n.force_sigma);
        let fy = bias[1] - mass * a * kin.axis.1 + 0.3 * ring * ring_dir.sin() + gauss(rng, n.vibration) + gauss(rng, n.force_sigma);
        let fz = bias[2] + load + ring - mass * bounce + gauss(rng, n.vibration) + gauss(rng, n.force_sigma);
        let tz_osc = if rotate { 0.05 * a } else { 0.0 };
        let tx = bias[3] + (load + ring) * ly + gauss(rng, n.torque_sigma) + 0.02 * gauss(rng, n.vibration);
        let ty = bias[4] - (load + ring) * lx + gauss(rng, n.torque_sigma) + 0.02 * gauss(rng, n.vibration);
        let tz = bias[5] + tz_osc + gauss(rng, n.torque_sigma);
        let payload = [fx, fy, fz, tx, ty, tz].map(f32q).to_vec();
        frames.push(SensorFrame::new(Modality::ForceTorque, time, vec![6], payload)?);
    }
    Ok(frames)
}

fn audio_stream(cfg: &ScenarioConfig, kin: &Kinematics, rng: &mut ChaCha8Rng) -> Result<Vec<SensorFrame>> {
    let t = &cfg.timing;
    let n = &cfg.noise;
    let total = (t.length * t.audio_hz + 1e-9).floor() as usize;
    let dt = 1.0 / t.audio_hz;
    let impact = t.drop_time + t.impact_delay;
    let tau2pi = std::f64::consts::TAU;

    let hum_f0 = if cfg.pattern == MovePattern::Rotate { 90.0 } else { 110.0 } * rng.gen_range(0.97..1.03);
    let hum_phase: [f64; 3] = [rng.gen_range(0.0..tau2pi), rng.gen_range(0.0..tau2pi), rng.gen_range(0.0..tau2pi)];

    // babble: a few voices with drifting pitch and syllabic envelopes
    struct Voice {
        f0: f64,
        drift: f64,
        rate: f64,
        env_phase: f64,
        phase: f64,
        on: Vec<bool>,
    }
    let segments = (t.length / 0.5).ceil() as usize + 1;
    let mut voices: Vec<Voice> = (0..3)
        .map(|_| Voice {
            f0: rng.gen_range(100.0..250.0),
            drift: rng.gen_range(0.3..1.0),
            rate: rng.gen_range(3.0..5.0),
            env_phase: rng.gen_range(0.0..tau2pi),
            phase: 0.0,
            on: (0..segments).map(|_| rng.gen_bool(0.6)).collect(),
        })
        .collect();

    let impact_noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let time = i as f64 * dt;
        let mut s = gauss(rng, n.audio_sigma);
        if n.motor_hum > 0.0 {
            let wobble = 1.0 + 0.2 * kin.sway(time, 1.0);
            for (h, ph) in hum_phase.iter().enumerate() {
                let h1 = (h + 1) as f64;
                s += n.motor_hum * wobble / h1 * (tau2pi * h1 * hum_f0 * time + ph).sin();
            }
        }
        if n.babble > 0.0 {
            for v in voices.iter_mut() {
                let f0 = v.f0 * (1.0 + 0.1 * (tau2pi * v.drift * time).sin());
                v.phase += tau2pi * f0 * dt;
                let seg = (time / 0.5) as usize;
                if !v.on[seg.min(v.on.len() - 1)] {
                    continue;
                }
                let env = (tau2pi * v.rate * time + v.env_phase).sin().max(0.0);
                let mut voiced = 0.0;
                for h in 1..=8 {
                    voiced += (h as f64 * v.phase).sin() / h as f64;
                }
                s += n.babble * env * voiced / 3.0;
            }
        }
        let tau = time - impact;
        if tau >= 0.0 {
            let decay = (-tau / t.impact_decay).exp();
            let ring = (tau2pi * cfg.object.resonance_hz * tau).sin();
            s += 0.5 * cfg.object.impact_gain * decay * (0.6 * ring + 0.4 * impact_noise.sample(rng));
        }
        samples.push(f32q(s));
    }
    let chunk = t.audio_chunk;
    let mut frames = Vec::new();
    for (k, c) in samples.chunks(chunk).enumerate() {
        if c.len() < chunk {
            break;
        }
        // timestamp at chunk end
        let time = ((k + 1) * chunk) as f64 / t.audio_hz;
        frames.push(SensorFrame::new(Modality::Audio, time, vec![chunk], c.to_vec())?);
    }
    Ok(frames)
}

/// Soft-edged ellipse coverage in `[0, 1]`.
fn coverage(dy: f64, dx: f64, ry: f64, rx: f64) -> f64 {
    let r = ((dy / ry).powi(2) + (dx / rx).powi(2)).sqrt();
    (1.0 - (r - 1.0) * 2.0).clamp(0.0, 1.0).min(1.0) * if r < 1.5 { 1.0 } else { 0.0 }
}

fn image_streams(
    cfg: &ScenarioConfig,
    kin: &Kinematics,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SensorFrame>, Vec<SensorFrame>)> {
    let t = &cfg.timing;
    let n = &cfg.noise;
    let (h, w) = (t.image_height, t.image_width);
    let (hf, wf) = (h as f64, w as f64);
    let scene = Scene::lab();
    let gain = 1.0 + gauss(rng, 0.03);
    let obj = &cfg.object;
    let r = obj.radius_px();
    let (ry, rx) = (r, r * 0.8);
    let gripper_rows = (hf * 0.2).round();
    let (gripper_c0, gripper_c1) = (wf * 0.35, wf * 0.65);
    let cx0 = wf / 2.0;
    let cy0 = gripper_rows + ry - 1.0;
    let (mon_r0, mon_r1, mon_c0, mon_c1) = (2.0, hf * 0.35, 1.0, wf * 0.3);

    let mut rgb_frames = Vec::new();
    let mut depth_frames = Vec::new();
    for time in frame_times(t.image_hz, t.length) {
        let shake = (gauss(rng, n.shake_px), gauss(rng, n.shake_px));
        let cam = (
            kin.camera0.0 + kin.pan.0 * time + shake.0,
            kin.camera0.1 + kin.pan.1 * time + shake.1,
        );
        let fall_px = fall_m(time, cfg) * PX_PER_M;
        let landed = time - t.drop_time >= t.impact_delay;
        let sway = kin.sway(time, n.sway_px);
        let cy = cy0 + fall_px;
        let cx = cx0 + sway;
        let flicker = if n.flicker > 0.0 {
            Some(1.0 - n.flicker * rng.gen::<f64>())
        } else {
            None
        };

        let mut rgb = Vec::with_capacity(h * w * 3);
        let mut depth = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
                let (u, v) = (x + cam.0, y + cam.1);
                let mut px = [0.0; 3];
                for (ch, p) in px.iter_mut().enumerate() {
                    *p = scene.color(u, v, ch);
                }
                let mut d = scene.depth(u, v, y, hf);
                if let Some(level) = flicker {
                    if y >= mon_r0 && y < mon_r1 && x >= mon_c0 && x < mon_c1 {
                        px = [0.3 + 0.6 * level, 0.35 + 0.6 * level, 0.5 + 0.5 * level];
                    }
                }
                let in_gripper = y < gripper_rows && x >= gripper_c0 && x < gripper_c1;
                if in_gripper {
                    px = [0.25, 0.25, 0.27];
                    d = 850.0;
                }
                if !landed {
                    let cov = coverage(y - cy, x - cx, ry, rx);
                    if cov > 0.0 && !in_gripper {
                        let shade = 1.0 - 0.15 * (y - cy) / ry;
                        for ch in 0..3 {
                            let target = obj.color[ch] * shade;
                            px[ch] += cov * obj.contrast * (target - px[ch]);
                        }
                        if rng.gen::<f64>() < obj.depth_return {
                            let rr = ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2);
                            let bulge = 950.0 - 60.0 * (1.0 - rr).max(0.0);
                            d += cov * (bulge - d);
                        }
                    }
                }
                for p in px {
                    let v = (p * gain * 255.0 + gauss(rng, n.pixel_sigma)).round().clamp(0.0, 255.0);
                    rgb.push(v);
                }
                let sigma = n.depth_sigma_mm * (d / 1000.0).powi(2);
                let reading = if rng.gen::<f64>() < n.depth_dropout {
                    0.0
                } else {
                    (d + gauss(rng, sigma)).round().clamp(0.0, 65535.0)
                };
                depth.push(reading);
            }
        }
        rgb_frames.push(SensorFrame::new(Modality::Rgb, time, vec![h, w, 3], rgb)?);
        depth_frames.push(SensorFrame::new(Modality::Depth, time, vec![h, w], depth)?);
    }
    Ok((rgb_frames, depth_frames))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    /// Episode directory, relative to the manifest.
    pub path: String,
    pub split: Split,
    pub condition: Condition,
    pub object: String,
    pub pattern: MovePattern,
    pub seed: u64,
}

impl EpisodeEntry {
    pub fn id(&self) -> &str {
        self.path.rsplit('/').next().unwrap_or(&self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<EpisodeEntry>,
}

const MANIFEST_HEADER: &str = "path\tsplit\tcondition\tobject\tpattern\tseed";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &EpisodeEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.path, e.split, e.condition, e.object, e.pattern, e.seed
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(Error::Format("manifest header missing".into())),
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!("manifest line {}: expected 6 columns", i + 2)));
            }
            entries.push(EpisodeEntry {
                path: cols[0].to_string(),
                split: cols[1].parse()?,
                condition: cols[2].parse()?,
                object: cols[3].to_string(),
                pattern: cols[4].parse()?,
                seed: cols[5]
                    .parse()
                    .map_err(|_| Error::Format(format!("manifest line {}: bad seed", i + 2)))?,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Largest-remainder apportionment of `n` items. Ties in the remainder go
/// to the earlier split.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Plans the full factorial dataset and assigns splits after a seeded
/// shuffle. Nothing is generated yet.
pub fn generate_dataset(cfg: &SimulatorConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    if cfg.n_per_cell == 0 {
        return Err(Error::Config("simulator: n_per_cell must be > 0".into()));
    }
    let mut entries = Vec::new();
    for &condition in &cfg.conditions {
        for obj in &cfg.objects {
            for &pattern in &cfg.patterns {
                for rep in 0..cfg.n_per_cell {
                    let id = format!("{condition}-{}-{pattern}-{rep:03}", obj.name);
                    entries.push(EpisodeEntry {
                        path: format!("episodes/{id}"),
                        split: Split::Train,
                        condition,
                        object: obj.name.clone(),
                        pattern,
                        seed: derive_seed(cfg.seed, &format!("episode/{id}")),
                    });
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split"));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let counts = split_counts(entries.len(), cfg.split);
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Eval
        };
    }
    Ok(DatasetManifest { entries })
}

pub fn episode_manifest(entry: &EpisodeEntry, bundle: &EpisodeBundle) -> EpisodeManifest {
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert("object".to_string(), entry.object.clone());
    metadata.insert("pattern".to_string(), entry.pattern.to_string());
    metadata.insert("seed".to_string(), entry.seed.to_string());
    metadata.insert("split".to_string(), entry.split.to_string());
    EpisodeManifest {
        episode_id: entry.id().to_string(),
        condition: entry.condition,
        drop_time: Some(bundle.drop_time),
        metadata,
    }
}

/// Generates every episode of the manifest under `out_dir` and writes
/// `out_dir/manifest.tsv`.
pub fn write_dataset(cfg: &SimulatorConfig, out_dir: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let manifest = generate_dataset(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for entry in &manifest.entries {
        let bundle = generate_episode(&cfg.scenario(entry)?)?;
        write_episode(
            &out_dir.join(&entry.path),
            &bundle.streams,
            &episode_manifest(entry, &bundle),
        )?;
    }
    let path = out_dir.join("manifest.tsv");
    manifest.save(&path)?;
    Ok((manifest, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(condition: Condition) -> ScenarioConfig {
        let sim = SimulatorConfig::default();
        ScenarioConfig {
            episode_id: "test".into(),
            seed: 11,
            object: sim.objects[0].clone(),
            condition,
            pattern: MovePattern::Forward,
            timing: sim.timing.clone(),
            noise: sim.noise(condition).clone(),
        }
    }

    #[test]
    fn split_rounding() {
        assert_eq!(split_counts(100, [0.55, 0.18, 0.27]), [55, 18, 27]);
        assert_eq!(split_counts(576, [0.55, 0.18, 0.27]), [317, 104, 155]);
        assert_eq!(split_counts(10, [1.0 / 3.0; 3]), [4, 3, 3]);
    }

    #[test]
    fn frame_counts() {
        let ep = generate_episode(&scenario(Condition::Standing)).unwrap();
        assert_eq!(ep.streams.stream(Modality::Rgb).len(), 55);
        assert_eq!(ep.streams.stream(Modality::Depth).len(), 55);
        assert_eq!(ep.streams.stream(Modality::Audio).len(), 55);
        assert_eq!(ep.streams.stream(Modality::ForceTorque).len(), 550);
    }

    #[test]
    fn same_seed_same_episode() {
        let a = generate_episode(&scenario(Condition::Vad)).unwrap();
        let b = generate_episode(&scenario(Condition::Vad)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn factorial_size() {
        let cfg = SimulatorConfig {
            conditions: vec![Condition::Standing],
            n_per_cell: 2,
            ..SimulatorConfig::default()
        };
        assert_eq!(generate_dataset(&cfg).unwrap().entries.len(), 64);
        let bad = SimulatorConfig {
            n_per_cell: 0,
            ..SimulatorConfig::default()
        };
        assert!(generate_dataset(&bad).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let cfg = SimulatorConfig {
            n_per_cell: 1,
            ..SimulatorConfig::default()
        };
        let m = generate_dataset(&cfg).unwrap();
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }
}

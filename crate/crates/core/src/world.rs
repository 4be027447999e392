//! Synthetic dyadic conversations with known reactive coupling.
//!
//! Motion channels: 0-1 head pose, 2-3 expression, 4 lip, 5 blink.
//! Audio channels: 0 envelope, 1-3 band energies.
//!
//! The avatar's expression copies the user's expression `lag` frames later
//! with gain `gain`, and its head nods `lag` frames after each stress peak
//! in the user's speech while the avatar is listening. Everything else is
//! either driven by the avatar's own audio (lip) or independent noise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{write_tensor, Reader, SeededRng, Tensor};

pub const MOTION_DIM: usize = 6;
pub const AUDIO_DIM: usize = 4;
pub const POSE: [usize; 2] = [0, 1];
pub const EXPRESSION: [usize; 2] = [2, 3];
pub const LIP: usize = 4;
pub const BLINK: usize = 5;
pub const SPEAKING_THRESHOLD: f32 = 0.3;
pub const BOUND: f32 = 3.0;

pub const DATASET_MAGIC: [u8; 4] = *b"AFDS";
pub const DATASET_VERSION: u32 = 1;

const SMILE_LEN: usize = 25;
const NOD_LEN: usize = 8;
const NOD_AMPLITUDE: f64 = 0.8;
const SYLLABLE_PERIOD: f64 = 6.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    /// Reaction delay in frames.
    pub react_lag: usize,
    /// Reaction gain in `[0, 1]`.
    pub react_gain: f64,
    /// Expected user smile onsets per frame.
    pub smile_rate: f64,
    pub turn_min: usize,
    pub turn_max: usize,
    /// Standard deviation of the white noise added to every motion channel.
    pub noise: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            react_lag: 5,
            react_gain: 0.8,
            smile_rate: 0.01,
            turn_min: 20,
            turn_max: 60,
            noise: 0.05,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.react_gain) {
            return Err(Error::Config(format!("react_gain {} outside [0, 1]", self.react_gain)));
        }
        if self.turn_min == 0 || self.turn_min > self.turn_max {
            return Err(Error::Config(format!(
                "turn length range {}..{}",
                self.turn_min, self.turn_max
            )));
        }
        if !(self.smile_rate >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("smile_rate and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Speaker {
    User,
    Avatar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DyadicClip {
    pub user_motion: Tensor,
    pub user_audio: Tensor,
    pub avatar_audio: Tensor,
    pub avatar_motion: Tensor,
    pub speaker: Vec<Speaker>,
    /// Onset frames of user smiles.
    pub smile_events: Vec<u32>,
    /// Frames of stress peaks in the user's speech.
    pub stress_peaks: Vec<u32>,
}

impl DyadicClip {
    pub fn len(&self) -> usize {
        self.speaker.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speaker.is_empty()
    }

    /// Frames `[start, start + len)` of every stream; events are re-indexed.
    pub fn window(&self, start: usize, len: usize) -> DyadicClip {
        let shift = |v: &[u32]| {
            v.iter()
                .filter(|&&e| (e as usize) >= start && (e as usize) < start + len)
                .map(|&e| e - start as u32)
                .collect()
        };
        DyadicClip {
            user_motion: self.user_motion.slice_rows(start, len),
            user_audio: self.user_audio.slice_rows(start, len),
            avatar_audio: self.avatar_audio.slice_rows(start, len),
            avatar_motion: self.avatar_motion.slice_rows(start, len),
            speaker: self.speaker[start..start + len].to_vec(),
            smile_events: shift(&self.smile_events),
            stress_peaks: shift(&self.stress_peaks),
        }
    }

    pub fn frames_where(&self, who: Speaker) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.speaker[i] == who).collect()
    }
}

struct Ar1 {
    phi: f64,
    x: f64,
}

impl Ar1 {
    fn new(phi: f64) -> Self {
        Self { phi, x: 0.0 }
    }

    fn step(&mut self, rng: &mut SeededRng, sigma: f64) -> f64 {
        self.x = self.phi * self.x + sigma * rng.normal();
        self.x
    }
}

fn turn_schedule(rng: &mut SeededRng, n: usize, p: &WorldParams) -> Vec<Speaker> {
    let mut who = if rng.bernoulli(0.5) {
        Speaker::User
    } else {
        Speaker::Avatar
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = p.turn_min + rng.below(p.turn_max - p.turn_min + 1);
        for _ in 0..len.min(n - out.len()) {
            out.push(who);
        }
        who = match who {
            Speaker::User => Speaker::Avatar,
            Speaker::Avatar => Speaker::User,
        };
    }
    out
}

/// Audio for one party plus its stress-peak frames.
fn speech(rng: &mut SeededRng, speaker: &[Speaker], me: Speaker) -> (Tensor, Vec<u32>) {
    let n = speaker.len();
    let mut a = Tensor::zeros(&[n, AUDIO_DIM]);
    let mut peaks = Vec::new();
    let mut phase = 0.0;
    let mut bands = [0.5f64; 3];
    let mut last_peak: Option<usize> = None;
    let mut env = vec![0.0f64; n];
    for i in 0..n {
        let talking = speaker[i] == me;
        if i == 0 || speaker[i] != speaker[i - 1] {
            phase = rng.uniform() * std::f64::consts::TAU;
            for b in &mut bands {
                *b = rng.uniform_range(0.3, 1.0);
            }
        }
        if talking {
            let syll = (std::f64::consts::TAU * i as f64 / SYLLABLE_PERIOD + phase).sin();
            env[i] = (0.55 + 0.2 * syll + 0.05 * rng.normal()).max(0.35);
            let spaced = last_peak.is_none_or(|p| i >= p + 6);
            let inside = i >= 1 && i + 1 < n && speaker[i - 1] == me && speaker[i + 1] == me;
            if spaced && inside && rng.bernoulli(1.0 / 12.0) {
                peaks.push(i as u32);
                last_peak = Some(i);
            }
        } else {
            env[i] = (0.03 * rng.normal()).abs().min(0.1);
        }
    }
    for &p in &peaks {
        let p = p as usize;
        env[p] += 0.9;
        env[p - 1] += 0.45;
        env[p + 1] += 0.45;
    }
    for i in 0..n {
        let e = env[i];
        let r = a.row_mut(i);
        r[0] = e as f32;
        for k in 0..3 {
            r[k + 1] = (e * bands[k] + 0.02 * rng.normal()) as f32;
        }
    }
    clamp(&mut a);
    (a, peaks)
}

fn clamp(t: &mut Tensor) {
    for x in t.data_mut() {
        *x = x.clamp(-BOUND, BOUND);
    }
}

fn raised_cosine(k: usize, len: usize) -> f64 {
    0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / len as f64).cos())
}

/// The part of the avatar's motion that is a reaction to the user.
pub fn reactive_component(
    user_motion: &Tensor,
    stress_peaks: &[u32],
    speaker: &[Speaker],
    params: &WorldParams,
) -> Tensor {
    let n = speaker.len();
    let g = params.react_gain;
    let lag = params.react_lag;
    let mut r = Tensor::zeros(&[n, MOTION_DIM]);
    for i in lag..n {
        for &c in &EXPRESSION {
            r.set(i, c, (g * user_motion.get(i - lag, c) as f64) as f32);
        }
    }
    for &p in stress_peaks {
        let p = p as usize;
        if speaker[p] != Speaker::User {
            continue;
        }
        for k in 0..NOD_LEN {
            let i = p + lag + k;
            if i >= n {
                break;
            }
            let v = g * NOD_AMPLITUDE * (std::f64::consts::PI * k as f64 / NOD_LEN as f64).sin();
            r.set(i, POSE[0], r.get(i, POSE[0]) + v as f32);
        }
    }
    r
}

pub fn generate_clip(seed: u64, n: usize, params: &WorldParams) -> Result<DyadicClip> {
    params.validate()?;
    if n < 2 * params.turn_min {
        return Err(Error::Invalid(format!(
            "clip of {n} frames is shorter than two minimum turns"
        )));
    }
    let root = SeededRng::new(seed);
    let speaker = turn_schedule(&mut root.derive(0), n, params);
    let (user_audio, stress_peaks) = speech(&mut root.derive(1), &speaker, Speaker::User);
    let (avatar_audio, _) = speech(&mut root.derive(2), &speaker, Speaker::Avatar);
    let sw = params.noise;

    let mut rng = root.derive(3);
    let mut user = Tensor::zeros(&[n, MOTION_DIM]);
    let mut smiles = Vec::new();
    let mut pose = [Ar1::new(0.95), Ar1::new(0.95)];
    let mut expr = [Ar1::new(0.7), Ar1::new(0.7)];
    for i in 0..n {
        if rng.bernoulli(params.smile_rate) {
            smiles.push(i as u32);
        }
        let r = user.row_mut(i);
        r[0] = pose[0].step(&mut rng, 0.08) as f32;
        r[1] = pose[1].step(&mut rng, 0.08) as f32;
        r[2] = expr[0].step(&mut rng, 0.05) as f32;
        r[3] = expr[1].step(&mut rng, 0.05) as f32;
        let env = user_audio.get(i, 0) as f64;
        r[LIP] = if speaker[i] == Speaker::User {
            (1.2 * (env - 0.35)) as f32
        } else {
            0.0
        };
    }
    for &e in &smiles {
        let amp = rng.uniform_range(0.8, 1.2);
        for k in 0..SMILE_LEN {
            let i = e as usize + k;
            if i >= n {
                break;
            }
            let b = amp * raised_cosine(k, SMILE_LEN);
            user.set(i, 2, user.get(i, 2) + b as f32);
            user.set(i, 3, user.get(i, 3) + (0.6 * b) as f32);
        }
    }
    add_blinks(&mut rng, &mut user);
    add_white(&mut rng, &mut user, sw);
    clamp(&mut user);

    let mut rng = root.derive(4);
    let mut avatar = Tensor::zeros(&[n, MOTION_DIM]);
    let mut pose = [Ar1::new(0.95), Ar1::new(0.95)];
    let mut expr = [Ar1::new(0.5), Ar1::new(0.5)];
    for i in 0..n {
        let talking = speaker[i] == Speaker::Avatar;
        let env = avatar_audio.get(i, 0) as f64;
        let es = if talking { 0.3 } else { 0.1 };
        let r = avatar.row_mut(i);
        r[0] = pose[0].step(&mut rng, 0.06) as f32;
        r[1] = (pose[1].step(&mut rng, 0.06) + if talking { 0.3 * (env - 0.55) } else { 0.0 }) as f32;
        r[2] = expr[0].step(&mut rng, es) as f32;
        r[3] = expr[1].step(&mut rng, es) as f32;
        r[LIP] = if talking { (1.2 * (env - 0.35)) as f32 } else { 0.0 };
    }
    add_blinks(&mut rng, &mut avatar);
    add_white(&mut rng, &mut avatar, sw);
    let reactive = reactive_component(&user, &stress_peaks, &speaker, params);
    for (a, r) in avatar.data_mut().iter_mut().zip(reactive.data()) {
        *a += r;
    }
    clamp(&mut avatar);

    Ok(DyadicClip {
        user_motion: user,
        user_audio,
        avatar_audio,
        avatar_motion: avatar,
        speaker,
        smile_events: smiles,
        stress_peaks,
    })
}

fn add_blinks(rng: &mut SeededRng, m: &mut Tensor) {
    let n = m.rows();
    let mut i = 0;
    while i < n {
        if rng.bernoulli(1.0 / 40.0) {
            for (k, v) in [0.5f32, 1.0, 0.5].into_iter().enumerate() {
                if i + k < n {
                    m.set(i + k, BLINK, m.get(i + k, BLINK) + v);
                }
            }
            i += 3;
        } else {
            i += 1;
        }
    }
}

fn add_white(rng: &mut SeededRng, m: &mut Tensor, sigma: f64) {
    for x in m.data_mut() {
        *x += (sigma * rng.normal()) as f32;
    }
}

/// Reaction removed and non-lip motion damped to 30%; lip sync kept.
pub fn passive_variant(clip: &DyadicClip, params: &WorldParams) -> DyadicClip {
    let reactive = reactive_component(&clip.user_motion, &clip.stress_peaks, &clip.speaker, params);
    let mut out = clip.clone();
    for i in 0..clip.len() {
        for c in 0..MOTION_DIM {
            if c == LIP {
                continue;
            }
            let v = (clip.avatar_motion.get(i, c) - reactive.get(i, c)) * 0.3;
            out.avatar_motion.set(i, c, v.clamp(-BOUND, BOUND));
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub clips: Vec<DyadicClip>,
}

impl Dataset {
    pub fn generate(seed: u64, clips: usize, frames: usize, params: &WorldParams) -> Result<Self> {
        let root = SeededRng::new(seed);
        let clips = (0..clips)
            .map(|k| generate_clip(root.derive(1000 + k as u64).next_u64(), frames, params))
            .collect::<Result<_>>()?;
        Ok(Self { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.clips.len() as u32).to_le_bytes());
        for c in &self.clips {
            write_clip(&mut buf, c);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let v = r.u32("version")?;
        if v != DATASET_VERSION {
            return Err(Error::BadVersion(v));
        }
        let count = r.u32("clip count")?;
        let clips = (0..count).map(|_| read_clip(&mut r)).collect::<Result<_>>()?;
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after last clip".into()));
        }
        Ok(Self { clips })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_clip(buf: &mut Vec<u8>, c: &DyadicClip) {
    write_tensor(buf, &c.user_motion);
    write_tensor(buf, &c.user_audio);
    write_tensor(buf, &c.avatar_audio);
    write_tensor(buf, &c.avatar_motion);
    let sched: Vec<f32> = c
        .speaker
        .iter()
        .map(|s| match s {
            Speaker::User => 0.0,
            Speaker::Avatar => 1.0,
        })
        .collect();
    write_tensor(buf, &Tensor::new(vec![sched.len()], sched).unwrap());
    for list in [&c.smile_events, &c.stress_peaks] {
        buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for &e in list {
            buf.extend_from_slice(&e.to_le_bytes());
        }
    }
}

pub(crate) fn read_clip(r: &mut Reader<'_>) -> Result<DyadicClip> {
    let user_motion = r.tensor()?;
    let user_audio = r.tensor()?;
    let avatar_audio = r.tensor()?;
    let avatar_motion = r.tensor()?;
    let sched = r.tensor()?;
    let n = sched.len();
    for (t, w) in [
        (&user_motion, MOTION_DIM),
        (&user_audio, AUDIO_DIM),
        (&avatar_audio, AUDIO_DIM),
        (&avatar_motion, MOTION_DIM),
    ] {
        if t.rows() != n || t.cols() != w {
            return Err(Error::Format(format!(
                "clip stream {:?} does not match {n} frames x {w}",
                t.shape()
            )));
        }
    }
    let speaker = sched
        .data()
        .iter()
        .map(|&s| if s == 0.0 { Speaker::User } else { Speaker::Avatar })
        .collect();
    let mut lists = [Vec::new(), Vec::new()];
    for list in &mut lists {
        let k = r.u32("event count")?;
        for _ in 0..k {
            list.push(r.u32("event index")?);
        }
    }
    let [smile_events, stress_peaks] = lists;
    Ok(DyadicClip {
        user_motion,
        user_audio,
        avatar_audio,
        avatar_motion,
        speaker,
        smile_events,
        stress_peaks,
    })
}

/// Pearson correlation of two equally long series; `None` when either is constant.
pub fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// `corr(x[i], y[i + lag])`.
pub fn lagged_correlation(x: &[f64], y: &[f64], lag: usize) -> Option<f64> {
    let n = x.len().min(y.len());
    if lag >= n {
        return None;
    }
    correlation(&x[..n - lag], &y[lag..n])
}

pub fn channel(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.get(i, c) as f64).collect()
}

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    ecg_rationale_prompt, har_rationale_prompt, make_splits, rationale_stub, sleep_rationale_prompt, Chunk,
    DissimilarityMap, MultimodalPrompt, RationaleGenerator, Split,
};
use crate::error::Result;
use crate::timeseries::{fmt_g, TimeSeries};

pub const TREND_CLASSES: [&str; 3] = ["ascending", "descending", "flat"];
pub const TREND_LEN: usize = 64;

pub const HAR_CLASSES: [&str; 8] =
    ["sitting", "standing", "lying", "walking", "running", "biking", "walking up", "walking down"];
pub const HAR_RATE_HZ: f64 = 50.0;
pub const HAR_WINDOW_S: f64 = 2.56;
pub const HAR_LEN: usize = 128;

/// Wake, N1, N2, N3 (stage 4 folded in), REM.
pub const SLEEP_CLASSES: [&str; 5] = ["W", "N1", "N2", "N3", "REM"];
pub const SLEEP_LEN: usize = 3000;

pub const ECG_CLASSES: [&str; 2] = ["yes", "no"];
pub const ECG_LEADS: [&str; 12] = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];
pub const ECG_LEN: usize = 1000;

pub const SIMULATION_COUNT: usize = 200;
pub const SIMULATION_ANSWER: &str = "This is a random pattern.";
pub const SIMULATION_POST: &str = "Predict the pattern of the time series. Answer:";

pub fn har_map() -> DissimilarityMap {
    let still: &[&str] = &["walking", "running", "biking", "walking up", "walking down"];
    let stairs: &[&str] = &["sitting", "lying", "standing", "biking", "running"];
    DissimilarityMap::new(&[
        ("sitting", still),
        ("walking", &["sitting", "lying", "standing", "biking", "running"]),
        ("standing", still),
        ("running", &["sitting", "lying", "standing", "biking", "walking"]),
        ("walking up", stairs),
        ("walking down", stairs),
        ("lying", still),
        ("biking", &["sitting", "lying", "standing", "walking", "running"]),
    ])
    .expect("static map is closed")
}

/// Five-class map: stage 4 entries collapse into N3.
pub fn sleep_map() -> DissimilarityMap {
    DissimilarityMap::new(&[
        ("W", &["N3", "REM"]),
        ("N1", &["W", "N3"]),
        ("N2", &["W", "REM"]),
        ("N3", &["W", "REM"]),
        ("REM", &["N2", "N3"]),
    ])
    .expect("static map is closed")
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Labels `i % k` for `i < count`, shuffled.
fn balanced_labels(count: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..count).map(|i| i % k).collect();
    v.shuffle(rng);
    v
}

fn two_options<'a>(a: &'a str, b: &'a str, rng: &mut ChaCha8Rng) -> (&'a str, &'a str) {
    if rng.random_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

fn finish(mut corpus: Vec<MultimodalPrompt>, seed: u64) -> Result<Vec<MultimodalPrompt>> {
    if corpus.len() >= 10 {
        make_splits(&mut corpus, seed)?;
    }
    Ok(corpus)
}

/// Raw trend signal of the given class.
pub fn trend_signal(label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let level = rng.random_range(-20.0..20.0);
    let amp = rng.random_range(0.5..5.0);
    let slope = match label {
        0 => rng.random_range(1.5..3.0),
        1 => -rng.random_range(1.5..3.0),
        _ => 0.0,
    };
    let wiggle = if label == 2 { rng.random_range(0.0..0.3) } else { 0.0 };
    let freq = rng.random_range(2.0..4.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..TREND_LEN)
        .map(|t| {
            let u = t as f64 / (TREND_LEN - 1) as f64;
            level
                + amp * (slope * (u - 0.5) + wiggle * (2.0 * PI * freq * u + phase).sin() + 0.25 * gauss(rng))
        })
        .collect()
}

pub fn trend_prompt_pre() -> &'static str {
    "Is the trend ascending, descending or flat?\n"
}

/// Three-way trend questions with balanced labels.
pub fn gen_trend_qa(count: usize, seed: u64) -> Result<Vec<MultimodalPrompt>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(count, 3, &mut rng);
    let cues = ["a steady rise", "a steady decline", "no lasting drift"];
    let mut out = Vec::with_capacity(count);
    for &l in &labels {
        let raw = TimeSeries::new(trend_signal(l, &mut rng), format!("{TREND_LEN} steps"));
        let label = TREND_CLASSES[l].to_string();
        out.push(MultimodalPrompt {
            pre: trend_prompt_pre().into(),
            chunks: vec![Chunk::from_raw(raw, "sensor")?],
            post: "\n".into(),
            target: super::template_rationale(cues[l], &label),
            label,
            split: Split::Train,
        });
    }
    finish(out, seed)
}

/// Caption-style targets over simple shapes (stage-one warm-up data).
pub fn gen_captions(count: usize, seed: u64) -> Result<Vec<MultimodalPrompt>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [
        ("rise", "It starts low, climbs steadily and ends near its maximum."),
        ("fall", "It starts high, falls steadily and ends near its minimum."),
        ("peak", "It rises to a single peak in the middle and falls back."),
        ("dip", "It drops to a single trough in the middle and recovers."),
        ("oscillation", "It oscillates regularly around a constant level."),
    ];
    let labels = balanced_labels(count, shapes.len(), &mut rng);
    let mut out = Vec::with_capacity(count);
    for &l in &labels {
        let amp = rng.random_range(0.5..5.0);
        let level = rng.random_range(-20.0..20.0);
        let cycles = rng.random_range(3.0..6.0);
        let values: Vec<f64> = (0..TREND_LEN)
            .map(|t| {
                let u = t as f64 / (TREND_LEN - 1) as f64;
                let shape = match l {
                    0 => u,
                    1 => 1.0 - u,
                    2 => 1.0 - (2.0 * u - 1.0).abs(),
                    3 => (2.0 * u - 1.0).abs(),
                    _ => 0.5 + 0.5 * (2.0 * PI * cycles * u).sin(),
                };
                level + amp * (2.0 * shape + 0.1 * gauss(&mut rng))
            })
            .collect();
        out.push(MultimodalPrompt {
            pre: "Describe the series.\n".into(),
            chunks: vec![Chunk::from_raw(TimeSeries::new(values, format!("{TREND_LEN} steps")), "sensor")?],
            post: "\n".into(),
            target: shapes[l].1.into(),
            label: shapes[l].0.into(),
            split: Split::Train,
        });
    }
    finish(out, seed)
}

struct Motion {
    gravity: [f64; 3],
    freq: f64,
    amp: [f64; 3],
    noise: f64,
    cue: &'static str,
}

fn motion(label: &str) -> Motion {
    let m = |gravity, freq, amp, noise, cue| Motion { gravity, freq, amp, noise, cue };
    match label {
        "sitting" => m([0.5, 2.0, 9.5], 0.0, [0.0; 3], 0.05, "near-constant acceleration with gravity mostly on the z axis"),
        "standing" => m([9.6, 0.5, 1.0], 0.0, [0.0; 3], 0.08, "near-constant acceleration with gravity mostly on the x axis"),
        "lying" => m([0.3, 9.6, 0.8], 0.0, [0.0; 3], 0.03, "near-constant acceleration with gravity mostly on the y axis"),
        "walking" => m([9.3, 1.0, 2.0], 1.9, [2.0, 1.0, 1.5], 0.3, "a moderate periodic swing near two steps per second"),
        "running" => m([9.0, 1.0, 2.0], 2.8, [6.0, 3.0, 4.0], 0.6, "large fast periodic impacts"),
        "biking" => m([6.0, 3.0, 6.0], 1.2, [0.8, 0.6, 0.8], 0.2, "a small slow pedalling rhythm"),
        "walking up" => m([9.3, 1.0, 3.0], 1.6, [2.2, 1.2, 2.5], 0.3, "a slower periodic swing with strong vertical lift"),
        _ => m([9.3, 1.0, 1.5], 2.1, [3.0, 1.5, 1.5], 0.4, "a quick periodic swing with sharp downward impacts"),
    }
}

fn har_axes(label: &str, rng: &mut ChaCha8Rng) -> [Vec<f64>; 3] {
    let m = motion(label);
    let f = m.freq * rng.random_range(0.9..1.1);
    std::array::from_fn(|axis| {
        let g = m.gravity[axis] + 0.3 * gauss(rng);
        let a = m.amp[axis] * rng.random_range(0.8..1.2);
        let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        (0..HAR_LEN)
            .map(|i| {
                let t = i as f64 / HAR_RATE_HZ;
                g + a * (2.0 * PI * f * t + p1).sin() + 0.3 * a * (4.0 * PI * f * t + p2).sin() + m.noise * gauss(rng)
            })
            .collect()
    })
}

pub fn gen_activity_windows(count: usize, seed: u64) -> Result<Vec<MultimodalPrompt>> {
    gen_activity_windows_with(count, seed, None)
}

/// Three-axis accelerometer windows, 8 activities, one dissimilar
/// distractor offered next to the true label.
pub fn gen_activity_windows_with(
    count: usize,
    seed: u64,
    generator: Option<&dyn RationaleGenerator>,
) -> Result<Vec<MultimodalPrompt>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = har_map();
    let classes: Vec<String> = HAR_CLASSES.iter().map(|s| s.to_string()).collect();
    let labels = balanced_labels(count, HAR_CLASSES.len(), &mut rng);
    let rate = format!("{HAR_WINDOW_S} s sampled at {HAR_RATE_HZ} Hz");
    let mut out = Vec::with_capacity(count);
    for &l in &labels {
        let label = HAR_CLASSES[l];
        let distractor = map.pick(label, &mut rng)?;
        let (a, b) = two_options(label, &distractor, &mut rng);
        let axes = har_axes(label, &mut rng);
        let chunks = axes
            .into_iter()
            .zip(["x", "y", "z"])
            .map(|(v, ax)| Chunk::from_raw(TimeSeries::new(v, rate.clone()), &format!("accelerometer {ax}-axis")))
            .collect::<Result<Vec<_>>>()?;
        let mut s = MultimodalPrompt {
            pre: format!("Accelerometer window in three axes. The activity is either {a} or {b}.\n"),
            chunks,
            post: "\n".into(),
            target: String::new(),
            label: label.into(),
            split: Split::Train,
        };
        rationale_stub(&mut s, motion(label).cue, &har_rationale_prompt(label, &distractor), generator, &classes);
        out.push(s);
    }
    finish(out, seed)
}

fn eeg_epoch(label: &str, rng: &mut ChaCha8Rng) -> (Vec<f64>, &'static str) {
    let fs = 100.0;
    let mut comps: Vec<(f64, f64)> = Vec::new();
    let (noise, cue) = match label {
        "W" => {
            comps.extend([(10.0, 20.0), (20.0, 10.0)]);
            (5.0, "fast low-amplitude activity with a clear alpha rhythm")
        }
        "N1" => {
            comps.extend([(5.0, 25.0), (9.0, 5.0)]);
            (5.0, "slowing theta activity with fading alpha")
        }
        "N2" => {
            comps.push((5.0, 30.0));
            (5.0, "theta background with spindle bursts and a K-complex")
        }
        "N3" => {
            comps.extend([(1.0, 80.0), (2.0, 40.0)]);
            (5.0, "dominant high-amplitude slow waves")
        }
        _ => {
            comps.extend([(4.0, 20.0), (18.0, 8.0)]);
            (6.0, "low-amplitude mixed frequencies with sawtooth theta")
        }
    };
    let comps: Vec<(f64, f64, f64)> = comps
        .into_iter()
        .map(|(f, a)| (f * rng.random_range(0.9..1.1), a * rng.random_range(0.8..1.2), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let mut v: Vec<f64> = (0..SLEEP_LEN)
        .map(|i| {
            let t = i as f64 / fs;
            comps.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>() + noise * gauss(rng)
        })
        .collect();
    if label == "N2" {
        for _ in 0..rng.random_range(2..4) {
            let start = rng.random_range(0..SLEEP_LEN - 100);
            for (k, x) in v[start..start + 100].iter_mut().enumerate() {
                let env = (PI * k as f64 / 100.0).sin();
                *x += 30.0 * env * (2.0 * PI * 13.0 * k as f64 / fs).sin();
            }
        }
        let at = rng.random_range(0..SLEEP_LEN - 100);
        for (k, x) in v[at..at + 100].iter_mut().enumerate() {
            *x -= 100.0 * (2.0 * PI * k as f64 / 100.0).sin();
        }
    }
    (v, cue)
}

pub fn gen_sleep_epochs(count: usize, seed: u64) -> Result<Vec<MultimodalPrompt>> {
    gen_sleep_epochs_with(count, seed, None)
}

/// Single-channel 30 s EEG epochs at 100 Hz, five stages.
pub fn gen_sleep_epochs_with(
    count: usize,
    seed: u64,
    generator: Option<&dyn RationaleGenerator>,
) -> Result<Vec<MultimodalPrompt>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = sleep_map();
    let classes: Vec<String> = SLEEP_CLASSES.iter().map(|s| s.to_string()).collect();
    let labels = balanced_labels(count, SLEEP_CLASSES.len(), &mut rng);
    let mut out = Vec::with_capacity(count);
    for &l in &labels {
        let label = SLEEP_CLASSES[l];
        let distractor = map.pick(label, &mut rng)?;
        let (a, b) = two_options(label, &distractor, &mut rng);
        let (values, cue) = eeg_epoch(label, &mut rng);
        let mut s = MultimodalPrompt {
            pre: format!("EEG epoch of 30 s. The sleep stage is either {a} or {b}.\n"),
            chunks: vec![Chunk::from_raw(TimeSeries::new(values, "30 s sampled at 100 Hz"), "EEG Fpz-Cz")?],
            post: "\n".into(),
            target: String::new(),
            label: label.into(),
            split: Split::Train,
        };
        rationale_stub(&mut s, cue, &sleep_rationale_prompt(a, b, label), generator, &classes);
        out.push(s);
    }
    finish(out, seed)
}

const ECG_QUESTIONS: [(&str, &str, &str); 6] = [
    ("Does this ECG show sinus rhythm?", "regular beats each preceded by a P wave", "irregular beats without clear P waves"),
    ("Does this ECG show atrial fibrillation?", "irregular beats without clear P waves", "regular beats each preceded by a P wave"),
    ("Is the heart rate above 100 bpm?", "closely spaced beats at a fast rate", "beats spaced at a normal rate"),
    ("Is the heart rate below 60 bpm?", "widely spaced beats at a slow rate", "beats spaced at a normal rate"),
    ("Does this ECG show ST elevation?", "raised ST segments in the precordial leads", "flat ST segments"),
    ("Is the QRS complex wider than normal?", "broad QRS complexes", "narrow QRS complexes"),
];

#[derive(Debug, Clone, Copy)]
struct Heart {
    hr: f64,
    irregular: bool,
    st: f64,
    qrs_width: f64,
}

fn heart_for(template: usize, yes: bool, rng: &mut ChaCha8Rng) -> Heart {
    let mut h = Heart { hr: rng.random_range(62.0..95.0), irregular: false, st: 0.0, qrs_width: 1.0 };
    match (template, yes) {
        (0, false) | (1, true) => h.irregular = true,
        (2, true) => h.hr = rng.random_range(110.0..150.0),
        (3, true) => h.hr = rng.random_range(40.0..55.0),
        (4, true) => h.st = rng.random_range(0.15..0.3),
        (5, true) => h.qrs_width = rng.random_range(1.8..2.5),
        _ => {}
    }
    h
}

fn ecg_leads(h: Heart, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let fs = 100.0;
    let mut beats = Vec::new();
    let mut t = rng.random_range(0.1..0.6);
    while t < 10.0 {
        beats.push(t);
        let rr = 60.0 / h.hr;
        t += if h.irregular { rr * rng.random_range(0.6..1.4) } else { rr * rng.random_range(0.98..1.02) };
    }
    // lead gains for the P/QRS/T waves
    let gain = [1.0, 1.2, 0.4, -0.9, 0.5, 0.8, -0.6, 0.3, 0.8, 1.3, 1.2, 1.0];
    let bump = |t: f64, c: f64, w: f64| (-(t - c).powi(2) / (2.0 * w * w)).exp();
    let wander = rng.random_range(0.0..2.0 * PI);
    (0..12)
        .map(|lead| {
            let g = gain[lead] * rng.random_range(0.9..1.1);
            let st_gain = if (6..10).contains(&lead) { 1.0 } else { 0.2 };
            (0..ECG_LEN)
                .map(|i| {
                    let ti = i as f64 / fs;
                    let mut v = 0.05 * (2.0 * PI * 0.3 * ti + wander).sin() + 0.02 * gauss(rng);
                    for &b in &beats {
                        if (ti - b).abs() > 0.8 {
                            continue;
                        }
                        let w = 0.012 * h.qrs_width;
                        if !h.irregular {
                            v += g * 0.15 * bump(ti, b - 0.16, 0.02);
                        }
                        v += g * (-0.1 * bump(ti, b - 0.02 * h.qrs_width, w) + bump(ti, b, w)
                            - 0.25 * bump(ti, b + 0.025 * h.qrs_width, w));
                        v += g * 0.3 * bump(ti, b + 0.3, 0.05);
                        if ti > b + 0.06 && ti < b + 0.2 {
                            v += st_gain * h.st;
                        }
                    }
                    v
                })
                .collect()
        })
        .collect()
}

pub fn gen_ecg_qa(count: usize, seed: u64) -> Result<Vec<MultimodalPrompt>> {
    gen_ecg_qa_with(count, seed, None)
}

/// 12-lead 10 s ECGs at 100 Hz with binary questions from a small pool.
pub fn gen_ecg_qa_with(
    count: usize,
    seed: u64,
    generator: Option<&dyn RationaleGenerator>,
) -> Result<Vec<MultimodalPrompt>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<String> = ECG_CLASSES.iter().map(|s| s.to_string()).collect();
    let labels = balanced_labels(count, 2 * ECG_QUESTIONS.len(), &mut rng);
    let mut out = Vec::with_capacity(count);
    for &l in &labels {
        let (template, yes) = (l / 2, l % 2 == 0);
        let (question, yes_cue, no_cue) = ECG_QUESTIONS[template];
        let label = if yes { "yes" } else { "no" };
        let heart = heart_for(template, yes, &mut rng);
        let age = rng.random_range(25..90);
        let sex = if rng.random_bool(0.5) { "Female" } else { "Male" };
        let context = format!("{sex} patient, {age} years old.");
        let (a, b) = two_options("yes", "no", &mut rng);
        let chunks = ecg_leads(heart, &mut rng)
            .into_iter()
            .zip(ECG_LEADS)
            .map(|(v, lead)| Chunk::from_raw(TimeSeries::new(v, "10 s sampled at 100 Hz"), &format!("ECG lead {lead}")))
            .collect::<Result<Vec<_>>>()?;
        let mut s = MultimodalPrompt {
            pre: format!("12-lead ECG.\nClinical context: {context}\nQuestion: {question}\nThe answer is either {a} or {b}.\n"),
            chunks,
            post: "\n".into(),
            target: String::new(),
            label: label.into(),
            split: Split::Train,
        };
        let cue = if yes { yes_cue } else { no_cue };
        rationale_stub(&mut s, cue, &ecg_rationale_prompt(&context, question, a, b, label), generator, &classes);
        out.push(s);
    }
    finish(out, seed)
}

/// Random-normal series for memory sweeps: `num_series` chunks of
/// `length` points, fixed prompts and answer.
pub fn gen_simulation(num_series: usize, length: usize, count: usize, seed: u64) -> Result<Vec<MultimodalPrompt>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut chunks = Vec::with_capacity(num_series);
        for _ in 0..num_series {
            let raw = TimeSeries::new((0..length).map(|_| gauss(&mut rng)).collect(), "");
            let n = raw.normalize()?;
            let desc = format!("This is a time series with mean {} and std {}.", fmt_g(n.mean), fmt_g(n.std));
            chunks.push(Chunk { values: n.values, mean: n.mean, std: n.std, desc });
        }
        out.push(MultimodalPrompt {
            pre: format!("You are given different time series. All have the same length of {length} data points."),
            chunks,
            post: SIMULATION_POST.into(),
            target: SIMULATION_ANSWER.into(),
            label: "random".into(),
            split: Split::Train,
        });
    }
    finish(out, seed)
}

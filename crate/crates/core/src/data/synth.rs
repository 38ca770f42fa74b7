//! Seeded synthetic image classes.
//!
//! Each class archetype pairs a local motif (a small textured patch stamped
//! at a few anchor positions, jittered per sample) with a global layout (a
//! linear intensity ramp over a background level). Base and novel classes are
//! drawn without replacement from one archetype pool, or from a second pool
//! built with a different motif generator when `novel_family` is `Shifted`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, DatasetPair, LabeledDataset, Role};
use crate::rng::{rng_stream, RngStream};
use crate::tensor::Tensor;

/// Archetypes available per motif family.
pub const ARCHETYPE_POOL: usize = 96;

const MOTIF: usize = 7;
const STAMPS: usize = 3;
const MOTIF_ALPHA: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotifFamily {
    /// Novel archetypes come from the same pool as base archetypes.
    Same,
    /// Novel archetypes come from a pool with a different motif generator.
    Shifted,
}

impl FromStr for MotifFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same" => Ok(MotifFamily::Same),
            "shifted" => Ok(MotifFamily::Shifted),
            _ => Err(format!("unknown motif family `{s}` (expected same or shifted)")),
        }
    }
}

impl fmt::Display for MotifFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotifFamily::Same => "same",
            MotifFamily::Shifted => "shifted",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub channels: usize,
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    /// Training samples per class (base train and novel pool).
    pub samples_per_class: usize,
    /// Test samples per class (base and novel test).
    pub test_per_class: usize,
    pub noise_sigma: f64,
    /// Maximum per-sample displacement of each motif stamp, in pixels.
    pub jitter: usize,
    /// Number of global layouts shared among classes; 0 gives every class its
    /// own layout.
    pub layout_groups: usize,
    pub novel_family: MotifFamily,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 32,
            channels: 1,
            n_base_classes: 8,
            n_novel_classes: 8,
            samples_per_class: 50,
            test_per_class: 20,
            noise_sigma: 0.05,
            jitter: 3,
            layout_groups: 4,
            novel_family: MotifFamily::Same,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
struct Archetype {
    motif: [f64; MOTIF * MOTIF],
    anchors: [(f64, f64); STAMPS],
    ramp_angle: f64,
    ramp_amplitude: f64,
    background: f64,
    tint: [f64; 3],
}

fn grating_motif(rng: &mut RngStream) -> [f64; MOTIF * MOTIF] {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.random_range(0.12..0.4);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut m = [0.0; MOTIF * MOTIF];
    for y in 0..MOTIF {
        for x in 0..MOTIF {
            let u = x as f64 * theta.cos() + y as f64 * theta.sin();
            m[y * MOTIF + x] = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u + phase).cos();
        }
    }
    m
}

fn ring_motif(rng: &mut RngStream) -> [f64; MOTIF * MOTIF] {
    let freq: f64 = rng.random_range(0.12..0.4);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (cx, cy) = (rng.random_range(1.5..4.5), rng.random_range(1.5..4.5));
    let mut m = [0.0; MOTIF * MOTIF];
    for y in 0..MOTIF {
        for x in 0..MOTIF {
            let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            m[y * MOTIF + x] = 0.5 + 0.5 * (std::f64::consts::TAU * freq * r + phase).cos();
        }
    }
    m
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    ramp_angle: f64,
    ramp_amplitude: f64,
    background: f64,
}

fn random_layout(rng: &mut RngStream) -> Layout {
    Layout {
        ramp_angle: rng.random_range(0.0..std::f64::consts::TAU),
        ramp_amplitude: rng.random_range(0.2..0.6),
        background: rng.random_range(0.25..0.75),
    }
}

fn archetype_pool(seed: u64, family: MotifFamily, layout_groups: usize) -> Vec<Archetype> {
    let stream = match family {
        MotifFamily::Same => 1,
        MotifFamily::Shifted => 2,
    };
    let mut rng = rng_stream(seed, stream);
    // Shared layouts come from their own stream so both families use the same set.
    let mut layout_rng = rng_stream(seed, 5);
    let shared: Vec<Layout> = (0..layout_groups).map(|_| random_layout(&mut layout_rng)).collect();
    (0..ARCHETYPE_POOL)
        .map(|i| {
            let motif = match family {
                MotifFamily::Same => grating_motif(&mut rng),
                MotifFamily::Shifted => ring_motif(&mut rng),
            };
            let mut anchors = [(0.0, 0.0); STAMPS];
            for a in &mut anchors {
                *a = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            }
            let own = random_layout(&mut rng);
            let layout = if shared.is_empty() { own } else { shared[i % shared.len()] };
            Archetype {
                motif,
                anchors,
                ramp_angle: layout.ramp_angle,
                ramp_amplitude: layout.ramp_amplitude,
                background: layout.background,
                tint: [
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.6..1.0),
                ],
            }
        })
        .collect()
}

fn render(arch: &Archetype, spec: &SynthSpec, rng: &mut RngStream, noise: &Normal<f64>) -> Tensor {
    let s = spec.image_size;
    let mut plane = vec![0.0; s * s];
    let (dx, dy) = (arch.ramp_angle.cos(), arch.ramp_angle.sin());
    let centre = (s as f64 - 1.0) / 2.0;
    for y in 0..s {
        for x in 0..s {
            let u = ((x as f64 - centre) * dx + (y as f64 - centre) * dy) / s as f64;
            plane[y * s + x] = arch.background + arch.ramp_amplitude * u;
        }
    }
    let span = s.saturating_sub(MOTIF) as i64;
    let j = spec.jitter as i64;
    for &(ax, ay) in &arch.anchors {
        let ox = ((ax * span as f64).round() as i64 + rng.random_range(-j..=j)).clamp(0, span) as usize;
        let oy = ((ay * span as f64).round() as i64 + rng.random_range(-j..=j)).clamp(0, span) as usize;
        for my in 0..MOTIF.min(s) {
            for mx in 0..MOTIF.min(s) {
                let p = &mut plane[(oy + my) * s + ox + mx];
                *p = (1.0 - MOTIF_ALPHA) * *p + MOTIF_ALPHA * arch.motif[my * MOTIF + mx];
            }
        }
    }
    let c = spec.channels;
    let mut data = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        let tint = if c == 1 { 1.0 } else { arch.tint[ch] };
        for &v in &plane {
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            let v = (v * tint + n).clamp(0.0, 1.0);
            // 8-bit quantisation keeps in-memory data identical to its on-disk form.
            data.push((v * 255.0).round() / 255.0);
        }
    }
    Tensor::new(vec![c, s, s], data).expect("shape")
}

fn build(
    archetypes: &[&Archetype],
    names: &[String],
    per_class: usize,
    role: Role,
    spec: &SynthSpec,
    stream: u64,
) -> LabeledDataset {
    let mut rng = rng_stream(spec.seed, stream);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut images = Vec::with_capacity(archetypes.len() * per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (label, arch) in archetypes.iter().enumerate() {
        for _ in 0..per_class {
            images.push(render(arch, spec, &mut rng, &noise));
            labels.push(label);
        }
    }
    LabeledDataset {
        images,
        labels,
        label_space: names.to_vec(),
        role,
    }
}

impl SynthSpec {
    /// Checks counts and ranges; returns the number of archetypes drawn from
    /// the primary pool.
    pub fn validate(&self) -> Result<usize, DataError> {
        let spec = self;
        let requested = self.n_base_classes
            + match spec.novel_family {
                MotifFamily::Same => spec.n_novel_classes,
                MotifFamily::Shifted => 0,
            };
        if requested > ARCHETYPE_POOL || spec.n_novel_classes > ARCHETYPE_POOL {
            return Err(DataError::ArchetypeExhausted {
                requested: requested.max(spec.n_novel_classes),
                available: ARCHETYPE_POOL,
            });
        }
        if spec.n_base_classes == 0
            || spec.n_novel_classes == 0
            || spec.samples_per_class == 0
            || spec.test_per_class == 0
            || spec.image_size == 0
        {
            return Err(DataError::Inconsistent("synthetic class and sample counts must be positive".into()));
        }
        if spec.channels != 1 && spec.channels != 3 {
            return Err(DataError::Inconsistent(format!("channels must be 1 or 3, got {}", spec.channels)));
        }
        if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
            return Err(DataError::Inconsistent("noise_sigma must be finite and nonnegative".into()));
        }
        Ok(requested)
    }
}

/// Generates a deterministic [`DatasetPair`] from `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<DatasetPair, DataError> {
    let requested = spec.validate()?;

    let primary = archetype_pool(spec.seed, MotifFamily::Same, spec.layout_groups);
    let mut order: Vec<usize> = (0..ARCHETYPE_POOL).collect();
    order.shuffle(&mut rng_stream(spec.seed, 3));
    let base: Vec<&Archetype> = order[..spec.n_base_classes].iter().map(|&i| &primary[i]).collect();

    let shifted;
    let novel: Vec<&Archetype> = match spec.novel_family {
        MotifFamily::Same => order[spec.n_base_classes..requested].iter().map(|&i| &primary[i]).collect(),
        MotifFamily::Shifted => {
            shifted = archetype_pool(spec.seed, MotifFamily::Shifted, spec.layout_groups);
            let mut o: Vec<usize> = (0..ARCHETYPE_POOL).collect();
            o.shuffle(&mut rng_stream(spec.seed, 4));
            o[..spec.n_novel_classes].iter().map(|&i| &shifted[i]).collect()
        }
    };

    let base_names: Vec<String> = (0..base.len()).map(|i| format!("base{i:02}")).collect();
    let novel_names: Vec<String> = (0..novel.len()).map(|i| format!("novel{i:02}")).collect();
    let pair = DatasetPair {
        base_train: build(&base, &base_names, spec.samples_per_class, Role::Base, spec, 10),
        base_test: build(&base, &base_names, spec.test_per_class, Role::Base, spec, 11),
        novel_train_pool: build(&novel, &novel_names, spec.samples_per_class, Role::Novel, spec, 12),
        novel_test: build(&novel, &novel_names, spec.test_per_class, Role::Novel, spec, 13),
    };
    pair.validate()?;
    Ok(pair)
}
